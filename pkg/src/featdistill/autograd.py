"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

The tape is implicit and thread-local: any op whose input requires gradients
appends a backward closure to the active tape, and ``backward()`` replays the
tape in reverse topological (= recording) order. One tape per training step;
``backward()`` consumes it. Leaf gradients accumulate across backward calls
until ``zero_grad()`` is called, matching the usual train-loop contract.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

NORM_FLOOR = 1e-12
KL_FLOOR = 1e-12

__all__ = [
    "Tensor",
    "ShapeMismatchError",
    "no_grad",
    "backward",
    "exp",
    "log",
    "relu",
    "gelu",
    "softmax",
    "kl_divergence",
    "cosine_similarity",
    "squared_l2_distance",
    "cross_entropy",
    "layer_norm",
    "embedding",
    "gradient_check",
    "global_grad_norm",
]


class ShapeMismatchError(ValueError):
    """Operand shapes cannot be combined; message names both shapes."""


class _TapeState(threading.local):
    def __init__(self) -> None:
        self.nodes: list[tuple["Tensor", Callable[[], None]]] = []
        self.enabled = True


_STATE = _TapeState()


class no_grad:
    """Context manager that disables tape recording (pure evaluation)."""

    def __enter__(self) -> None:
        self._prev = _STATE.enabled
        _STATE.enabled = False

    def __exit__(self, *exc) -> bool:
        _STATE.enabled = self._prev
        return False


def _tracking(*tensors: "Tensor") -> bool:
    return _STATE.enabled and any(t.requires_grad for t in tensors)


def _record(out: "Tensor", fn: Callable[[], None]) -> None:
    out.requires_grad = True
    out._leaf = False
    _STATE.nodes.append((out, fn))


def _accumulate(t: "Tensor", g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_shape(a: "Tensor", b: "Tensor") -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeMismatchError(
            f"cannot broadcast shapes {a.data.shape} and {b.data.shape}"
        ) from None


class Tensor:
    """A dense float64 array, optionally recorded on the autodiff tape.

    ``grad`` is populated by ``backward()`` on leaves with
    ``requires_grad=True``; intermediate gradients are released once the
    tape has been consumed.
    """

    __slots__ = ("data", "requires_grad", "grad", "_leaf")

    def __init__(self, data, requires_grad: bool = False) -> None:
        self.data = np.array(data, dtype=np.float64, copy=True)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._leaf = True

    # -- introspection -----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out._leaf = True
        return out

    # -- elementwise arithmetic --------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            _broadcast_shape(self, other)
            out = _from_array(self.data + other.data)
            if _tracking(self, other):
                a, b = self, other

                def bwd(out=out, a=a, b=b):
                    g = out.grad
                    if a.requires_grad:
                        _accumulate(a, _unbroadcast(g, a.data.shape))
                    if b.requires_grad:
                        _accumulate(b, _unbroadcast(g, b.data.shape))

                _record(out, bwd)
            return out
        c = float(other)
        out = _from_array(self.data + c)
        if _tracking(self):
            a = self

            def bwd(out=out, a=a):
                _accumulate(a, out.grad)

            _record(out, bwd)
        return out

    __radd__ = __add__

    def __neg__(self):
        out = _from_array(-self.data)
        if _tracking(self):
            a = self

            def bwd(out=out, a=a):
                _accumulate(a, -out.grad)

            _record(out, bwd)
        return out

    def __sub__(self, other):
        if isinstance(other, Tensor):
            _broadcast_shape(self, other)
            out = _from_array(self.data - other.data)
            if _tracking(self, other):
                a, b = self, other

                def bwd(out=out, a=a, b=b):
                    g = out.grad
                    if a.requires_grad:
                        _accumulate(a, _unbroadcast(g, a.data.shape))
                    if b.requires_grad:
                        _accumulate(b, _unbroadcast(-g, b.data.shape))

                _record(out, bwd)
            return out
        return self + (-float(other))

    def __rsub__(self, other):
        return (-self) + float(other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            _broadcast_shape(self, other)
            out = _from_array(self.data * other.data)
            if _tracking(self, other):
                a, b = self, other

                def bwd(out=out, a=a, b=b):
                    g = out.grad
                    if a.requires_grad:
                        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
                    if b.requires_grad:
                        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

                _record(out, bwd)
            return out
        c = float(other)
        out = _from_array(self.data * c)
        if _tracking(self):
            a = self

            def bwd(out=out, a=a, c=c):
                _accumulate(a, out.grad * c)

            _record(out, bwd)
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        # scalar divisor only; tensor/tensor division is not an op we need
        return self * (1.0 / float(other))

    # -- linear algebra ----------------------------------------------------

    def __matmul__(self, other: "Tensor"):
        if not isinstance(other, Tensor):
            raise TypeError("matmul expects a Tensor operand")
        a, b = self, other
        if a.data.ndim < 2 or b.data.ndim < 2:
            raise ShapeMismatchError(
                f"matmul needs >=2-d operands, got {a.data.shape} and {b.data.shape}"
            )
        if a.data.shape[-1] != b.data.shape[-2]:
            raise ShapeMismatchError(
                f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}"
            )
        out = _from_array(a.data @ b.data)
        if _tracking(a, b):

            def bwd(out=out, a=a, b=b):
                g = out.grad
                if a.requires_grad:
                    ga = g @ b.data.swapaxes(-1, -2)
                    _accumulate(a, _unbroadcast(ga, a.data.shape))
                if b.requires_grad:
                    gb = a.data.swapaxes(-1, -2) @ g
                    _accumulate(b, _unbroadcast(gb, b.data.shape))

            _record(out, bwd)
        return out

    # -- shape ops -----------------------------------------------------------

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        out = _from_array(self.data.reshape(shape))
        if _tracking(self):
            a = self

            def bwd(out=out, a=a, old=old):
                _accumulate(a, out.grad.reshape(old))

            _record(out, bwd)
        return out

    def transpose(self, *axes: int) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(range(self.data.ndim))[::-1]
        inv = tuple(np.argsort(axes))
        out = _from_array(np.transpose(self.data, axes))
        if _tracking(self):
            a = self

            def bwd(out=out, a=a, inv=inv):
                _accumulate(a, np.transpose(out.grad, inv))

            _record(out, bwd)
        return out

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out = _from_array(np.asarray(self.data.sum(axis=axis, keepdims=keepdims)))
        if _tracking(self):
            a = self

            def bwd(out=out, a=a, axis=axis, keepdims=keepdims):
                g = out.grad
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                _accumulate(a, np.broadcast_to(g, a.data.shape).copy())

            _record(out, bwd)
        return out

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.data.size
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            count = 1
            for ax in axes:
                count *= self.data.shape[ax]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)


def _from_array(arr: np.ndarray) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = arr
    out.requires_grad = False
    out.grad = None
    out._leaf = True
    return out


# -- pointwise nonlinearities ------------------------------------------------


def exp(x: Tensor) -> Tensor:
    out = _from_array(np.exp(x.data))
    if _tracking(x):

        def bwd(out=out, x=x):
            _accumulate(x, out.grad * out.data)

        _record(out, bwd)
    return out


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise ValueError("log of non-positive value")
    out = _from_array(np.log(x.data))
    if _tracking(x):

        def bwd(out=out, x=x):
            _accumulate(x, out.grad / x.data)

        _record(out, bwd)
    return out


def relu(x: Tensor) -> Tensor:
    out = _from_array(np.maximum(x.data, 0.0))
    if _tracking(x):

        def bwd(out=out, x=x):
            _accumulate(x, out.grad * (x.data > 0))

        _record(out, bwd)
    return out


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """tanh-approximation GELU (smooth, so finite differences agree)."""
    z = x.data
    inner = _GELU_C * (z + _GELU_A * z**3)
    t = np.tanh(inner)
    out = _from_array(0.5 * z * (1.0 + t))
    if _tracking(x):

        def bwd(out=out, x=x, t=t, z=z):
            sech2 = 1.0 - t * t
            dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * z * z)
            local = 0.5 * (1.0 + t) + 0.5 * z * sech2 * dinner
            _accumulate(x, out.grad * local)

        _record(out, bwd)
    return out


# -- fused ops ----------------------------------------------------------------


def softmax(logits: Tensor, tau: float = 1.0, mask: np.ndarray | None = None) -> Tensor:
    """Temperature softmax over the last axis, max-subtracted for stability.

    ``mask`` is a boolean array broadcastable to ``logits``; False entries get
    probability exactly 0 (and zero gradient). Each row must keep at least one
    True entry.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    z = logits.data / tau
    if mask is None:
        m = z.max(axis=-1, keepdims=True)
        e = np.exp(z - m)
    else:
        zm = np.where(mask, z, -np.inf)
        m = zm.max(axis=-1, keepdims=True)
        e = np.exp(zm - m)
    p = e / e.sum(axis=-1, keepdims=True)
    out = _from_array(p)
    if _tracking(logits):

        def bwd(out=out, logits=logits, tau=tau):
            g = out.grad
            p = out.data
            dot = (g * p).sum(axis=-1, keepdims=True)
            _accumulate(logits, p * (g - dot) / tau)

        _record(out, bwd)
    return out


def _check_distribution(t: Tensor, name: str) -> None:
    if np.any(t.data < 0):
        raise ValueError(f"{name} has negative entries; not a distribution")
    sums = t.data.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > 1e-8):
        raise ValueError(f"{name} rows do not sum to 1 within 1e-8")


def kl_divergence(p: Tensor, q: Tensor) -> Tensor:
    """KL(p || q) = sum_i p_i ln(p_i / q_i) over the last axis, batch-meaned.

    Terms with p_i = 0 contribute exactly 0; q is clamped to 1e-12 below
    which its gradient is cut (documented convention, not an error).
    """
    if p.data.shape != q.data.shape:
        raise ShapeMismatchError(f"kl shapes differ: {p.data.shape} vs {q.data.shape}")
    _check_distribution(p, "p")
    _check_distribution(q, "q")
    qc = np.maximum(q.data, KL_FLOOR)
    pos = p.data > 0
    logp = np.log(np.where(pos, p.data, 1.0))
    terms = np.where(pos, p.data * (logp - np.log(qc)), 0.0)
    per = terms.sum(axis=-1)
    n_lead = max(per.size, 1)
    out = _from_array(np.asarray(per.sum() / n_lead))
    if _tracking(p, q):

        def bwd(out=out, p=p, q=q, qc=qc, pos=pos, logp=logp, n_lead=n_lead):
            g = float(out.grad)
            if p.requires_grad:
                dp = np.where(pos, (logp - np.log(qc)) + 1.0, 0.0)
                _accumulate(p, g * dp / n_lead)
            if q.requires_grad:
                dq = np.where(q.data >= KL_FLOOR, -p.data / qc, 0.0)
                _accumulate(q, g * dq / n_lead)

        _record(out, bwd)
    return out


def cosine_similarity(u: Tensor, v: Tensor, axis: int | None = None) -> Tensor:
    """Cosine similarity dot(u,v) / (|u| |v|), norms floored at 1e-12.

    ``axis=None`` flattens both operands to a single vector (scalar result);
    ``axis=-1`` yields one similarity per position over the last axis.
    """
    if u.data.shape != v.data.shape:
        raise ShapeMismatchError(
            f"cosine shapes differ: {u.data.shape} vs {v.data.shape}"
        )
    if u.data.size == 0:
        raise ValueError("cosine_similarity of empty tensors")
    if axis is None:
        ud = u.data.reshape(-1)
        vd = v.data.reshape(-1)
        ax = 0
    elif axis == -1:
        ud = u.data
        vd = v.data
        ax = -1
    else:
        raise ValueError("axis must be None or -1")
    nu = np.sqrt((ud * ud).sum(axis=ax))
    nv = np.sqrt((vd * vd).sum(axis=ax))
    cnu = np.maximum(nu, NORM_FLOOR)
    cnv = np.maximum(nv, NORM_FLOOR)
    dot = (ud * vd).sum(axis=ax)
    cos = dot / (cnu * cnv)
    out = _from_array(np.asarray(cos))
    if _tracking(u, v):

        def bwd(out=out, u=u, v=v, ud=ud, vd=vd, nu=nu, nv=nv, cnu=cnu, cnv=cnv):
            g = out.grad
            cos = out.data
            ge = np.expand_dims(g, -1) if g.ndim else g
            cose = np.expand_dims(cos, -1) if cos.ndim else cos
            nue = np.expand_dims(cnu, -1) if np.ndim(cnu) else cnu
            nve = np.expand_dims(cnv, -1) if np.ndim(cnv) else cnv
            u_live = np.expand_dims(nu > NORM_FLOOR, -1) if np.ndim(nu) else (nu > NORM_FLOOR)
            v_live = np.expand_dims(nv > NORM_FLOOR, -1) if np.ndim(nv) else (nv > NORM_FLOOR)
            if u.requires_grad:
                du = ge * (vd / (nue * nve) - np.where(u_live, cose * ud / (nue * nue), 0.0))
                _accumulate(u, du.reshape(u.data.shape))
            if v.requires_grad:
                dv = ge * (ud / (nue * nve) - np.where(v_live, cose * vd / (nve * nve), 0.0))
                _accumulate(v, dv.reshape(v.data.shape))

        _record(out, bwd)
    return out


def squared_l2_distance(u: Tensor, v: Tensor, mean: bool = True) -> Tensor:
    """sum((u - v)^2), divided by the element count when ``mean`` (default)."""
    if u.data.shape != v.data.shape:
        raise ShapeMismatchError(
            f"distance shapes differ: {u.data.shape} vs {v.data.shape}"
        )
    d = u - v
    sq = d * d
    return sq.mean() if mean else sq.sum()


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under softmax(logits).

    ``targets`` indexes the last axis; ``mask`` (same shape as targets)
    weights positions, zero entries dropping them from the mean.
    """
    z = logits.data
    targets = np.asarray(targets)
    if targets.shape != z.shape[:-1]:
        raise ShapeMismatchError(
            f"targets shape {targets.shape} does not match logits {z.shape}"
        )
    m = z.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(z, targets[..., None], axis=-1)[..., 0]
    ll = picked - lse[..., 0]
    w = np.ones_like(ll) if mask is None else np.asarray(mask, dtype=np.float64)
    denom = w.sum()
    if denom <= 0:
        raise ValueError("cross_entropy: no unmasked targets")
    out = _from_array(np.asarray(-(ll * w).sum() / denom))
    if _tracking(logits):

        def bwd(out=out, logits=logits, lse=lse, targets=targets, w=w, denom=denom):
            g = float(out.grad)
            p = np.exp(logits.data - lse)
            scale = (w / denom)[..., None]
            dz = p * scale
            np.put_along_axis(
                dz,
                targets[..., None],
                np.take_along_axis(dz, targets[..., None], axis=-1) - scale,
                axis=-1,
            )
            _accumulate(logits, g * dz)

        _record(out, bwd)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """LayerNorm over the last axis: gain * (x - mu)/sqrt(var + eps) + bias."""
    d = x.data.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = _from_array(gain.data * xhat + bias.data)
    if _tracking(x, gain, bias):

        def bwd(out=out, x=x, gain=gain, bias=bias, xhat=xhat, inv=inv, d=d):
            g = out.grad
            if gain.requires_grad:
                axes = tuple(range(g.ndim - 1))
                _accumulate(gain, (g * xhat).sum(axis=axes))
            if bias.requires_grad:
                axes = tuple(range(g.ndim - 1))
                _accumulate(bias, g.sum(axis=axes))
            if x.requires_grad:
                gx = g * gain.data
                s1 = gx.sum(axis=-1, keepdims=True)
                s2 = (gx * xhat).sum(axis=-1, keepdims=True)
                _accumulate(x, inv * (gx - s1 / d - xhat * s2 / d))

        _record(out, bwd)
    return out


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; backward scatter-adds into the table."""
    ids = np.asarray(ids)
    out = _from_array(table.data[ids])
    if _tracking(table):

        def bwd(out=out, table=table, ids=ids):
            g = out.grad
            dt = np.zeros_like(table.data)
            np.add.at(dt, ids.reshape(-1), g.reshape(-1, g.shape[-1]))
            _accumulate(table, dt)

        _record(out, bwd)
    return out


# -- backward pass -------------------------------------------------------------


def backward(root: Tensor) -> None:
    """Populate ``grad`` on every requires_grad leaf reachable from ``root``.

    ``root`` must be a scalar on the active tape. The tape is consumed:
    intermediate gradients are released and the node list cleared, so each
    forward graph supports exactly one backward pass. Leaf grads are
    accumulated (not reset) across calls.
    """
    if root.data.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {root.data.shape}")
    nodes = _STATE.nodes
    if not any(out is root for out, _ in nodes):
        if root._leaf:
            # constant w.r.t. everything: nothing to do beyond clearing state
            _STATE.nodes = []
            return
        raise ValueError("root is not on the active tape")
    root.grad = np.ones_like(root.data)
    intermediates = []
    for out, fn in reversed(nodes):
        if out.grad is None:
            continue
        fn()
        if not out._leaf:
            intermediates.append(out)
    for t in intermediates:
        t.grad = None
    _STATE.nodes = []


def reset_tape() -> None:
    """Drop any recorded nodes without running a backward pass."""
    _STATE.nodes = []


def tape_size() -> int:
    return len(_STATE.nodes)


def global_grad_norm(tensors: Sequence[Tensor]) -> float:
    total = 0.0
    for t in tensors:
        if t.grad is not None:
            total += float((t.grad * t.grad).sum())
    return float(np.sqrt(total))


def gradient_check(
    f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5
) -> float:
    """Max relative error between analytic grad of ``f`` at ``x`` and central
    finite differences.

    Relative error per coordinate is |analytic - numeric| / max(1, |numeric|);
    the max over coordinates is returned and the caller asserts a threshold.
    ``f`` must be deterministic; ``eps`` must lie in [1e-7, 1e-3].
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError(f"eps must be in [1e-7, 1e-3], got {eps}")
    reset_tape()
    x.zero_grad()
    y = f(x)
    backward(y)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.zero_grad()

    flat = x.data.reshape(-1)
    worst = 0.0
    with no_grad():
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            f_plus = f(x).item()
            flat[i] = old - eps
            f_minus = f(x).item()
            flat[i] = old
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = analytic.reshape(-1)[i]
            rel = abs(a - numeric) / max(1.0, abs(numeric))
            if rel > worst:
                worst = rel
    return worst
