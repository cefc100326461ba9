"""Dense float64 numerics: elementary ops, Jacobi eigensolver, reverse-mode tape."""

from . import autodiff
from .autodiff import GradTape, Var, backward
from .linalg import (
    LAYER_NORM_EPS,
    SymmetricEigen,
    as_tensor,
    eigh,
    layer_norm,
    log_softmax,
    logsumexp,
    matmul,
    stable_softmax,
)

__all__ = [
    "GradTape",
    "LAYER_NORM_EPS",
    "SymmetricEigen",
    "Var",
    "as_tensor",
    "autodiff",
    "backward",
    "eigh",
    "layer_norm",
    "log_softmax",
    "logsumexp",
    "matmul",
    "stable_softmax",
]
