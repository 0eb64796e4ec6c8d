"""Feature-alignment knowledge distillation for tiny transformer LMs.

Self-contained: a reverse-mode autodiff core, a decoder-only transformer that
exposes per-layer features and attention maps, the distillation losses that
align them, a deterministic synthetic-grammar corpus, training/ablation
harnesses, and text-generation metrics.
"""

__version__ = "0.1.0"

from .autograd import (
    Tensor,
    ShapeMismatchError,
    no_grad,
    backward,
    softmax,
    kl_divergence,
    cosine_similarity,
    squared_l2_distance,
    cross_entropy,
    gradient_check,
)

__all__ = [
    "__version__",
    "Tensor",
    "ShapeMismatchError",
    "no_grad",
    "backward",
    "softmax",
    "kl_divergence",
    "cosine_similarity",
    "squared_l2_distance",
    "cross_entropy",
    "gradient_check",
]
