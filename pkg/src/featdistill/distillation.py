"""Teacher-student alignment losses and the machinery that pairs layers.

Six losses: temperature-softened KL on logits, per-position cosine and
squared-distance losses on hidden features, their multi-layer weighted sum,
squared distance on head-averaged attention maps, and the weighted total.
Layer maps and trainable projection heads make the feature losses
well-defined when teacher and student differ in depth or width.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autograd import (
    ShapeMismatchError,
    Tensor,
    backward,
    kl_divergence,
    cosine_similarity,
    no_grad,
    softmax,
    squared_l2_distance,
)
from .transformer import ForwardTrace, ModelConfig, ParameterSet, forward, init_parameters

__all__ = [
    "KL_STUDENT_TO_TEACHER",
    "KL_TEACHER_TO_STUDENT",
    "DistillationWeights",
    "LayerMap",
    "ProjectionHeads",
    "map_layers",
    "soft_label_loss",
    "feature_cosine_loss",
    "feature_distance_loss",
    "multi_layer_feature_loss",
    "attention_alignment_loss",
    "total_loss",
    "distillation_losses",
    "check_loss_gradients",
]

KL_STUDENT_TO_TEACHER = "student_to_teacher"
KL_TEACHER_TO_STUDENT = "teacher_to_student"
_DIRECTIONS = (KL_STUDENT_TO_TEACHER, KL_TEACHER_TO_STUDENT)


@dataclass
class DistillationWeights:
    """Loss weights, temperature, and per-layer lambdas for the total loss."""

    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    delta: float = 1.0
    tau: float = 1.0
    lambda_per_layer: list[float] | None = None
    kl_direction: str = KL_TEACHER_TO_STUDENT
    tau2_scaling: bool = True

    def __post_init__(self) -> None:
        for name in ("alpha", "beta", "gamma", "delta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.tau <= 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if self.kl_direction not in _DIRECTIONS:
            raise ValueError(f"kl_direction must be one of {_DIRECTIONS}")
        if self.lambda_per_layer is not None and any(l < 0 for l in self.lambda_per_layer):
            raise ValueError("lambda_per_layer entries must be >= 0")

    def lambdas_for(self, layer_map: "LayerMap") -> list[float]:
        """Configured lambdas, or uniform 1/|map| when unset."""
        n = len(layer_map.pairs)
        if self.lambda_per_layer is None:
            return [1.0 / n] * n
        if len(self.lambda_per_layer) != n:
            raise ValueError(
                f"lambda_per_layer has {len(self.lambda_per_layer)} entries "
                f"for {n} aligned layer pairs"
            )
        return list(self.lambda_per_layer)


@dataclass(frozen=True)
class LayerMap:
    """Monotone pairing (student_layer, teacher_layer), 0-based indices."""

    pairs: tuple[tuple[int, int], ...]

    def __post_init__(self) -> None:
        if not self.pairs:
            raise ValueError("layer map must contain at least one pair")
        s_prev, t_prev = -1, -1
        for s, t in self.pairs:
            if s <= s_prev or t <= t_prev:
                raise ValueError(f"layer map indices must be strictly increasing: {self.pairs}")
            s_prev, t_prev = s, t

    def validate_depths(self, student_layers: int, teacher_layers: int) -> None:
        for s, t in self.pairs:
            if not (0 <= s < student_layers):
                raise ValueError(f"student layer {s} out of range [0, {student_layers})")
            if not (0 <= t < teacher_layers):
                raise ValueError(f"teacher layer {t} out of range [0, {teacher_layers})")


def map_layers(teacher_layers: int, student_layers: int, strategy: str = "uniform",
               pairs: list[tuple[int, int]] | None = None) -> LayerMap:
    """Build a student-to-teacher layer pairing.

    ``uniform`` maps student layer s (1-based) to teacher layer
    ceil(s * T / S); ``last_k`` maps onto the last S teacher layers;
    ``explicit`` validates user-supplied 0-based pairs.
    """
    if strategy in ("uniform", "last_k") and student_layers > teacher_layers:
        raise ValueError(
            f"{strategy} mapping needs student depth <= teacher depth "
            f"({student_layers} > {teacher_layers})"
        )
    if strategy == "uniform":
        out = tuple(
            (s - 1, math.ceil(s * teacher_layers / student_layers) - 1)
            for s in range(1, student_layers + 1)
        )
    elif strategy == "last_k":
        offset = teacher_layers - student_layers
        out = tuple((s, offset + s) for s in range(student_layers))
    elif strategy == "explicit":
        if not pairs:
            raise ValueError("explicit strategy requires pairs")
        out = tuple((int(s), int(t)) for s, t in pairs)
    else:
        raise ValueError(f"unknown layer-map strategy: {strategy!r}")
    m = LayerMap(out)
    m.validate_depths(student_layers, teacher_layers)
    return m


class ProjectionHeads:
    """Trainable per-pair linear maps student_dim -> teacher_dim.

    Present exactly when the hidden widths differ; empty (identity) otherwise.
    """

    def __init__(self, weights: dict[int, tuple[Tensor, Tensor]]):
        self._heads = weights

    @classmethod
    def create(cls, layer_map: LayerMap, student_dim: int, teacher_dim: int,
               seed: int) -> "ProjectionHeads":
        if student_dim == teacher_dim:
            return cls({})
        rng = np.random.default_rng(seed)
        heads = {}
        for s, _t in layer_map.pairs:
            w = Tensor(rng.normal(0.0, 0.02, size=(student_dim, teacher_dim)), requires_grad=True)
            b = Tensor(np.zeros(teacher_dim), requires_grad=True)
            heads[s] = (w, b)
        return cls(heads)

    def __bool__(self) -> bool:
        return bool(self._heads)

    def get(self, student_layer: int):
        return self._heads.get(student_layer)

    def tensors(self) -> list[Tensor]:
        out = []
        for w, b in self._heads.values():
            out.extend((w, b))
        return out

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for s, (w, b) in sorted(self._heads.items()):
            out[f"proj.{s}.w"] = w.data
            out[f"proj.{s}.b"] = b.data
        return out

    def zero_grad(self) -> None:
        for t in self.tensors():
            t.zero_grad()


def _project(f_student: Tensor, projection) -> Tensor:
    if projection is None:
        return f_student
    w, b = projection
    return f_student @ w + b


def soft_label_loss(
    student_logits: Tensor,
    teacher_logits: Tensor,
    tau: float,
    direction: str = KL_TEACHER_TO_STUDENT,
    tau2_scaling: bool = True,
) -> Tensor:
    """KL between temperature-softened output distributions, batch-meaned.

    Teacher logits must already be detached. With ``tau2_scaling`` (default)
    the loss is multiplied by tau^2 so its gradient scale is
    temperature-invariant.
    """
    if student_logits.shape != teacher_logits.shape:
        raise ShapeMismatchError(
            f"logit shapes differ: {student_logits.shape} vs {teacher_logits.shape}"
        )
    if direction not in _DIRECTIONS:
        raise ValueError(f"kl direction must be one of {_DIRECTIONS}")
    s = softmax(student_logits, tau=tau)
    t = softmax(teacher_logits, tau=tau)
    loss = kl_divergence(s, t) if direction == KL_STUDENT_TO_TEACHER else kl_divergence(t, s)
    if tau2_scaling:
        loss = loss * (tau * tau)
    return loss


def feature_cosine_loss(f_student: Tensor, f_teacher: Tensor, projection=None) -> Tensor:
    """Mean over token positions of 1 - cos(features), in [0, 2]."""
    f = _project(f_student, projection)
    if f.shape != f_teacher.shape:
        raise ShapeMismatchError(
            f"feature shapes differ after projection: {f.shape} vs {f_teacher.shape}"
        )
    cos = cosine_similarity(f, f_teacher, axis=-1)
    return (1.0 - cos).mean()


def feature_distance_loss(
    f_student: Tensor, f_teacher: Tensor, projection=None, mean: bool = True
) -> Tensor:
    """Squared L2 between features, element-count normalized by default."""
    f = _project(f_student, projection)
    if f.shape != f_teacher.shape:
        raise ShapeMismatchError(
            f"feature shapes differ after projection: {f.shape} vs {f_teacher.shape}"
        )
    return squared_l2_distance(f, f_teacher, mean=mean)


def multi_layer_feature_loss(
    trace_student: ForwardTrace,
    trace_teacher: ForwardTrace,
    layer_map: LayerMap,
    lambdas: list[float],
    projections: ProjectionHeads | None = None,
    mean: bool = True,
) -> Tensor:
    """Sum over mapped pairs of lambda_l times the per-pair distance loss."""
    if len(lambdas) != len(layer_map.pairs):
        raise ValueError(
            f"{len(lambdas)} lambdas for {len(layer_map.pairs)} aligned layer pairs"
        )
    total = None
    for lam, (s, t) in zip(lambdas, layer_map.pairs):
        proj = projections.get(s) if projections else None
        term = feature_distance_loss(
            trace_student.features[s], trace_teacher.features[t], proj, mean=mean
        ) * lam
        total = term if total is None else total + term
    return total


def attention_alignment_loss(
    att_student: list[Tensor],
    att_teacher: list[Tensor],
    layer_map: LayerMap,
    mean: bool = True,
    per_head: bool = False,
) -> Tensor:
    """Squared distance between attention maps, averaged over mapped pairs.

    Head-count mismatches are resolved by averaging each stack over its head
    axis before comparison; ``per_head=True`` compares head-by-head and
    requires equal head counts. Masked (above-diagonal) entries are exact
    zeros on both sides and count toward the element-count normalization.
    """
    total = None
    for s, t in layer_map.pairs:
        a_s, a_t = att_student[s], att_teacher[t]
        if a_s.shape[-1] != a_t.shape[-1] or a_s.shape[-2] != a_t.shape[-2]:
            raise ShapeMismatchError(
                f"attention seq dims differ: {a_s.shape} vs {a_t.shape}"
            )
        if per_head:
            if a_s.shape[1] != a_t.shape[1]:
                raise ShapeMismatchError(
                    f"per-head alignment needs equal head counts: "
                    f"{a_s.shape[1]} vs {a_t.shape[1]}"
                )
            m_s, m_t = a_s, a_t
        else:
            m_s = a_s.mean(axis=1)
            m_t = a_t.mean(axis=1)
        term = squared_l2_distance(m_s, m_t, mean=mean)
        total = term if total is None else total + term
    return total * (1.0 / len(layer_map.pairs))


def total_loss(
    soft: Tensor, feat: Tensor, dist: Tensor, att: Tensor, w: DistillationWeights
) -> Tensor:
    """alpha*soft + beta*feat + gamma*dist + delta*att, exactly."""
    return soft * w.alpha + feat * w.beta + dist * w.gamma + att * w.delta


def distillation_losses(
    trace_student: ForwardTrace,
    trace_teacher: ForwardTrace,
    layer_map: LayerMap,
    weights: DistillationWeights,
    projections: ProjectionHeads | None = None,
    mean_norms: bool = True,
    gamma_single_layer: bool = False,
) -> dict[str, Tensor]:
    """All four components plus their weighted total, on one tape.

    The cosine loss uses the deepest aligned pair; the gamma slot carries the
    multi-layer weighted distance unless ``gamma_single_layer`` routes it to
    the deepest pair's single-layer distance.
    """
    s_deep, t_deep = layer_map.pairs[-1]
    proj_deep = projections.get(s_deep) if projections else None
    soft = soft_label_loss(
        trace_student.logits,
        trace_teacher.logits,
        tau=weights.tau,
        direction=weights.kl_direction,
        tau2_scaling=weights.tau2_scaling,
    )
    feat = feature_cosine_loss(
        trace_student.features[s_deep], trace_teacher.features[t_deep], proj_deep
    )
    if gamma_single_layer:
        dist = feature_distance_loss(
            trace_student.features[s_deep],
            trace_teacher.features[t_deep],
            proj_deep,
            mean=mean_norms,
        )
    else:
        dist = multi_layer_feature_loss(
            trace_student,
            trace_teacher,
            layer_map,
            weights.lambdas_for(layer_map),
            projections,
            mean=mean_norms,
        )
    att = attention_alignment_loss(
        trace_student.attentions, trace_teacher.attentions, layer_map, mean=mean_norms
    )
    return {
        "soft": soft,
        "feat": feat,
        "dist": dist,
        "att": att,
        "total": total_loss(soft, feat, dist, att, weights),
    }


def _detached_trace(trace: ForwardTrace) -> ForwardTrace:
    return ForwardTrace(
        logits=trace.logits.detach(),
        features=[f.detach() for f in trace.features],
        attentions=[a.detach() for a in trace.attentions],
    )


def check_loss_gradients(
    seed: int,
    *,
    teacher_config: ModelConfig | None = None,
    student_config: ModelConfig | None = None,
    weights: DistillationWeights | None = None,
    batch: int = 1,
    seq: int = 4,
    eps: float = 1e-5,
) -> dict[str, float]:
    """Central-difference check of every loss's gradient on a random tiny pair.

    Returns the max relative error per loss name over all student-parameter
    (and projection-head) coordinates. One finite-difference probe evaluates
    all five losses from a single student forward, so the full check stays
    cheap; analytic gradients come from one backward pass per loss.
    """
    tiny = dict(vocab_size=16, num_layers=2, hidden_dim=8, num_heads=2,
                ffn_dim=8, max_seq_len=max(seq, 4))
    t_cfg = teacher_config or ModelConfig(seed=seed * 2 + 1, **tiny)
    s_cfg = student_config or ModelConfig(seed=seed * 2 + 2, **tiny)
    rng = np.random.default_rng(seed)
    tokens = rng.integers(0, min(t_cfg.vocab_size, s_cfg.vocab_size), size=(batch, seq))

    teacher = init_parameters(t_cfg)
    student = init_parameters(s_cfg)
    # random perturbation so features/attentions are not near-degenerate
    for t in student.tensors():
        t.data += rng.normal(0.0, 0.05, size=t.data.shape)
    layer_map = map_layers(t_cfg.num_layers, s_cfg.num_layers, "uniform")
    w = weights or DistillationWeights()
    projections = ProjectionHeads.create(
        layer_map, s_cfg.hidden_dim, t_cfg.hidden_dim, seed=seed + 99
    )

    with no_grad():
        trace_t = _detached_trace(forward(teacher, tokens))

    leaves: list[Tensor] = student.tensors() + projections.tensors()
    names = ["soft", "feat", "dist", "att", "total"]

    def all_losses() -> dict[str, Tensor]:
        trace_s = forward(student, tokens)
        return distillation_losses(trace_s, trace_t, layer_map, w, projections)

    analytic: dict[str, list[np.ndarray]] = {}
    for name in names:
        for leaf in leaves:
            leaf.zero_grad()
        losses = all_losses()
        backward(losses[name])
        analytic[name] = [
            np.zeros_like(l.data) if l.grad is None else l.grad.copy() for l in leaves
        ]
    for leaf in leaves:
        leaf.zero_grad()

    worst = {name: 0.0 for name in names}
    with no_grad():
        for li, leaf in enumerate(leaves):
            flat = leaf.data.reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + eps
                plus = {k: v.item() for k, v in all_losses().items()}
                flat[i] = old - eps
                minus = {k: v.item() for k, v in all_losses().items()}
                flat[i] = old
                for name in names:
                    numeric = (plus[name] - minus[name]) / (2.0 * eps)
                    a = analytic[name][li].reshape(-1)[i]
                    rel = abs(a - numeric) / max(1.0, abs(numeric))
                    if rel > worst[name]:
                        worst[name] = rel
    return worst
