"""Dual-phase ECG-CMR contrastive representation learning, desk scale."""

from cardalign.tensor import (
    GradTape,
    ShapeError,
    Tensor,
    apply_primitive,
    backward,
    finite_diff_check,
    set_default_dtype,
    tape,
)

__all__ = [
    "GradTape",
    "ShapeError",
    "Tensor",
    "apply_primitive",
    "backward",
    "finite_diff_check",
    "set_default_dtype",
    "tape",
]

__version__ = "0.1.0"
