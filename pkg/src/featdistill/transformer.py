"""Minimal decoder-only transformer LM exposing per-layer internals.

The forward pass returns logits plus, for every block, the residual-stream
feature tensor and the post-softmax attention map, so teacher/student
alignment losses can reach inside the model. Pre-norm blocks, GELU FFN,
learned positional embeddings, weight-tied output projection, no dropout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor, embedding, gelu, layer_norm, no_grad, softmax

__all__ = [
    "ModelConfig",
    "ParameterSet",
    "ForwardTrace",
    "CopyReport",
    "init_parameters",
    "forward",
    "init_student_from_teacher",
    "greedy_generate",
]

INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    num_layers: int
    hidden_dim: int
    num_heads: int
    ffn_dim: int
    max_seq_len: int
    seed: int

    def __post_init__(self) -> None:
        for name in ("vocab_size", "num_layers", "hidden_dim", "num_heads", "ffn_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.hidden_dim % self.num_heads != 0:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.max_seq_len < 2:
            raise ValueError("max_seq_len must be >= 2")

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "num_layers": self.num_layers,
            "hidden_dim": self.hidden_dim,
            "num_heads": self.num_heads,
            "ffn_dim": self.ffn_dim,
            "max_seq_len": self.max_seq_len,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class ParameterSet:
    """Named, insertion-ordered trainable tensors for one model."""

    config: ModelConfig
    params: dict[str, Tensor]

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def names(self) -> list[str]:
        return list(self.params)

    def tensors(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def copy(self) -> "ParameterSet":
        return ParameterSet(
            self.config,
            {k: Tensor(v.data, requires_grad=v.requires_grad) for k, v in self.params.items()},
        )

    def state_hash(self) -> int:
        import hashlib

        h = hashlib.sha256()
        for name, t in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return int.from_bytes(h.digest()[:8], "little")

    @classmethod
    def from_arrays(cls, config: ModelConfig, arrays: dict[str, np.ndarray]) -> "ParameterSet":
        ref = init_parameters(config)
        params: dict[str, Tensor] = {}
        for name, t in ref.params.items():
            if name not in arrays:
                raise ValueError(f"missing parameter array: {name}")
            if arrays[name].shape != t.data.shape:
                raise ValueError(
                    f"parameter {name}: shape {arrays[name].shape} != expected {t.data.shape}"
                )
            params[name] = Tensor(arrays[name], requires_grad=True)
        return cls(config, params)


@dataclass
class ForwardTrace:
    """Outputs of one forward pass: logits, per-layer features, attention maps."""

    logits: Tensor
    features: list[Tensor] = field(default_factory=list)
    attentions: list[Tensor] = field(default_factory=list)


@dataclass
class CopyReport:
    """Which parameters init_student_from_teacher copied vs re-initialized."""

    copied: list[str]
    fresh: list[str]


def _block_names(layer: int) -> list[tuple[str, str]]:
    """(suffix, kind) pairs for one block; kind drives the initializer."""
    b = f"block{layer}."
    return [
        (b + "ln1.g", "gain"),
        (b + "ln1.b", "bias"),
        (b + "wq", "weight"),
        (b + "bq", "bias"),
        (b + "wk", "weight"),
        (b + "bk", "bias"),
        (b + "wv", "weight"),
        (b + "bv", "bias"),
        (b + "wo", "weight"),
        (b + "bo", "bias"),
        (b + "ln2.g", "gain"),
        (b + "ln2.b", "bias"),
        (b + "w1", "weight"),
        (b + "b1", "bias"),
        (b + "w2", "weight"),
        (b + "b2", "bias"),
    ]


def _param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.hidden_dim, cfg.ffn_dim
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (cfg.vocab_size, d),
        "pos_emb": (cfg.max_seq_len, d),
    }
    for layer in range(cfg.num_layers):
        per = {
            f"block{layer}.ln1.g": (d,),
            f"block{layer}.ln1.b": (d,),
            f"block{layer}.wq": (d, d),
            f"block{layer}.bq": (d,),
            f"block{layer}.wk": (d, d),
            f"block{layer}.bk": (d,),
            f"block{layer}.wv": (d, d),
            f"block{layer}.bv": (d,),
            f"block{layer}.wo": (d, d),
            f"block{layer}.bo": (d,),
            f"block{layer}.ln2.g": (d,),
            f"block{layer}.ln2.b": (d,),
            f"block{layer}.w1": (d, f),
            f"block{layer}.b1": (f,),
            f"block{layer}.w2": (f, d),
            f"block{layer}.b2": (d,),
        }
        shapes.update(per)
    shapes["ln_f.g"] = (d,)
    shapes["ln_f.b"] = (d,)
    return shapes


def _kind(name: str) -> str:
    if name.endswith(".g"):
        return "gain"
    if name.endswith((".b", "bq", "bk", "bv", "bo", "b1", "b2")):
        return "bias"
    return "weight"


def init_parameters(config: ModelConfig) -> ParameterSet:
    """Seeded init: weights ~ N(0, 0.02^2), biases 0, layer-norm gains 1.

    Draw order is fixed by the parameter naming order, so the same config and
    seed reproduce bit-identical parameters.
    """
    rng = np.random.default_rng(config.seed)
    params: dict[str, Tensor] = {}
    for name, shape in _param_shapes(config).items():
        kind = _kind(name)
        if kind == "weight":
            data = rng.normal(0.0, INIT_STD, size=shape)
        elif kind == "gain":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True)
    return ParameterSet(config, params)


def _validate_tokens(cfg: ModelConfig, tokens: np.ndarray) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ValueError(f"tokens must be [batch, seq], got shape {tokens.shape}")
    if tokens.shape[1] > cfg.max_seq_len:
        raise ValueError(
            f"sequence length {tokens.shape[1]} exceeds max_seq_len {cfg.max_seq_len}"
        )
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise ValueError(
            f"token id out of range [0, {cfg.vocab_size}): "
            f"min {tokens.min()}, max {tokens.max()}"
        )
    return tokens.astype(np.int64, copy=False)


def forward(
    params: ParameterSet,
    tokens: np.ndarray,
    feature_tap: str = "post_block",
) -> ForwardTrace:
    """Run the model over ``tokens`` ([batch, seq] ids).

    Causal masking zeroes attention to future positions exactly. Per layer,
    ``features[l]`` is the residual stream after block l (``feature_tap=
    "post_block"``, default) or the block's pre-attention LayerNorm output
    (``feature_tap="pre_norm"``); ``attentions[l]`` is the post-softmax map
    [batch, heads, seq, seq].
    """
    if feature_tap not in ("post_block", "pre_norm"):
        raise ValueError(f"unknown feature_tap: {feature_tap!r}")
    cfg = params.config
    tokens = _validate_tokens(cfg, tokens)
    batch, seq = tokens.shape
    p = params.params

    x = embedding(p["tok_emb"], tokens) + embedding(
        p["pos_emb"], np.broadcast_to(np.arange(seq), (batch, seq))
    )

    heads = cfg.num_heads
    dh = cfg.hidden_dim // heads
    scale = 1.0 / np.sqrt(dh)
    causal = np.tril(np.ones((seq, seq), dtype=bool))

    features: list[Tensor] = []
    attentions: list[Tensor] = []
    for layer in range(cfg.num_layers):
        b = f"block{layer}."
        h = layer_norm(x, p[b + "ln1.g"], p[b + "ln1.b"])
        if feature_tap == "pre_norm":
            features.append(h)
        q = (h @ p[b + "wq"] + p[b + "bq"]).reshape(batch, seq, heads, dh).transpose(0, 2, 1, 3)
        k = (h @ p[b + "wk"] + p[b + "bk"]).reshape(batch, seq, heads, dh).transpose(0, 2, 1, 3)
        v = (h @ p[b + "wv"] + p[b + "bv"]).reshape(batch, seq, heads, dh).transpose(0, 2, 1, 3)
        scores = (q @ k.transpose(0, 1, 3, 2)) * scale
        attn = softmax(scores, mask=causal)
        attentions.append(attn)
        ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(batch, seq, cfg.hidden_dim)
        x = x + (ctx @ p[b + "wo"] + p[b + "bo"])

        h2 = layer_norm(x, p[b + "ln2.g"], p[b + "ln2.b"])
        ff = gelu(h2 @ p[b + "w1"] + p[b + "b1"]) @ p[b + "w2"] + p[b + "b2"]
        x = x + ff
        if feature_tap == "post_block":
            features.append(x)

    final = layer_norm(x, p["ln_f.g"], p["ln_f.b"])
    logits = final @ p["tok_emb"].transpose(1, 0)
    return ForwardTrace(logits=logits, features=features, attentions=attentions)


def init_student_from_teacher(
    teacher: ParameterSet,
    student_config: ModelConfig,
    layer_map,
) -> tuple[ParameterSet, CopyReport]:
    """Layer-by-layer initialization of a student from a teacher.

    Student block s copies teacher block layer_map(s) wherever the parameter
    shapes match exactly; embeddings and the final norm copy when their shapes
    match. Everything else falls back to the seeded init. The report lists
    both groups.
    """
    student = init_parameters(student_config)
    pair_of = {s: t for s, t in layer_map.pairs}
    copied: list[str] = []
    fresh: list[str] = []
    for name, tensor in student.params.items():
        src_name = name
        if name.startswith("block"):
            head, rest = name.split(".", 1)
            s_idx = int(head[len("block"):])
            if s_idx in pair_of:
                src_name = f"block{pair_of[s_idx]}.{rest}"
            else:
                src_name = None
        if src_name is not None and src_name in teacher.params:
            src = teacher.params[src_name]
            if src.data.shape == tensor.data.shape:
                tensor.data[...] = src.data
                copied.append(name)
                continue
        fresh.append(name)
    return student, CopyReport(copied=copied, fresh=fresh)


def greedy_generate(
    params: ParameterSet,
    prompt: np.ndarray,
    max_new_tokens: int,
    eos_id: int | None = None,
) -> np.ndarray:
    """Greedy (argmax) continuation of a 1-d prompt; stops at eos or length cap."""
    cfg = params.config
    seq = np.asarray(prompt, dtype=np.int64).reshape(1, -1)
    out: list[int] = []
    with no_grad():
        for _ in range(max_new_tokens):
            if seq.shape[1] >= cfg.max_seq_len:
                break
            trace = forward(params, seq)
            nxt = int(np.argmax(trace.logits.data[0, -1]))
            out.append(nxt)
            if eos_id is not None and nxt == eos_id:
                break
            seq = np.concatenate([seq, [[nxt]]], axis=1)
    return np.array(out, dtype=np.int64)
