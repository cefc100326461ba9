"""Dense float64 primitives: matmul, stable softmax, layer norm and a Jacobi eigensolver."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from ..errors import DimensionError, NumericError, ValidationError

LAYER_NORM_EPS = 1e-5
JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def matmul(a, b) -> np.ndarray:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b


def stable_softmax(z, axis: int = -1) -> np.ndarray:
    """Softmax along ``axis`` computed after subtracting the max."""
    z = as_tensor(z)
    if z.size == 0 or z.shape[axis] == 0:
        raise DimensionError("stable_softmax: empty input")
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z, axis: int = -1) -> np.ndarray:
    z = as_tensor(z)
    m = z.max(axis=axis, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=axis, keepdims=True))


def logsumexp(z, axis: int = -1) -> np.ndarray:
    z = as_tensor(z)
    if z.size == 0 or z.shape[axis] == 0:
        raise DimensionError("logsumexp: empty input")
    m = z.max(axis=axis, keepdims=True)
    return np.squeeze(m, axis=axis) + np.log(np.exp(z - m).sum(axis=axis))


def layer_norm(x, gain, bias, eps: float = LAYER_NORM_EPS) -> np.ndarray:
    """Normalize the last axis to zero mean / unit variance, then apply gain and bias."""
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 2:
        raise DimensionError(f"layer_norm needs a last axis of size >= 2, got {x.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps) * as_tensor(gain) + as_tensor(bias)


@dataclass(frozen=True)
class SymmetricEigen:
    eigenvalues: np.ndarray  # descending
    eigenvectors: np.ndarray  # columns, orthonormal
    sweeps: int = 0

    def reconstruct(self) -> np.ndarray:
        q = self.eigenvectors
        return (q * self.eigenvalues) @ q.T


@njit(cache=True)
def _jacobi_sweeps(a, v, tol, max_sweeps):
    n = a.shape[0]
    for sweep in range(max_sweeps + 1):
        off = 0.0
        on = 0.0
        for i in range(n):
            on += a[i, i] * a[i, i]
            for j in range(i + 1, n):
                off += 2.0 * a[i, j] * a[i, j]
        off = np.sqrt(off)
        on = np.sqrt(on)
        if off <= tol * on:
            return sweep, off, on
        if sweep == max_sweeps:
            return -1, off, on
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = 1.0 / (abs(theta) + np.sqrt(theta * theta + 1.0))
                    if theta < 0.0:
                        t = -t
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                for k in range(n):
                    akp = a[k, p]
                    akq = a[k, q]
                    a[k, p] = c * akp - s * akq
                    a[k, q] = s * akp + c * akq
                for k in range(n):
                    apk = a[p, k]
                    aqk = a[q, k]
                    a[p, k] = c * apk - s * aqk
                    a[q, k] = s * apk + c * aqk
                a[p, q] = 0.0
                a[q, p] = 0.0
                for k in range(n):
                    vkp = v[k, p]
                    vkq = v[k, q]
                    v[k, p] = c * vkp - s * vkq
                    v[k, q] = s * vkp + c * vkq
    return -1, 0.0, 0.0


def eigh(s, *, tol: float = JACOBI_TOL, max_sweeps: int = JACOBI_MAX_SWEEPS,
         initial_vectors=None) -> SymmetricEigen:
    """Cyclic Jacobi eigendecomposition of a symmetric matrix.

    Converges when the off-diagonal Frobenius norm drops below ``tol`` times the
    diagonal norm. ``initial_vectors`` (an orthogonal matrix) warm-starts the
    rotation from a previous decomposition of a nearby matrix.
    """
    s = as_tensor(s)
    if s.ndim != 2 or s.shape[0] != s.shape[1] or s.shape[0] == 0:
        raise DimensionError(f"eigh needs a non-empty square matrix, got {s.shape}")
    if not np.all(np.isfinite(s)):
        raise ValidationError("eigh: matrix has non-finite entries")
    scale = np.abs(s).max()
    asym = np.abs(s - s.T).max()
    if asym > 1e-10 * scale:
        raise ValidationError(f"eigh: matrix not symmetric (max asymmetry {asym:.3e}, scale {scale:.3e})")
    sym = 0.5 * (s + s.T)
    n = sym.shape[0]
    if initial_vectors is None:
        v = np.eye(n)
        a = np.array(sym, order="C")
    else:
        v = np.array(initial_vectors, dtype=np.float64, order="C")
        a = np.ascontiguousarray(v.T @ sym @ v)
        a = 0.5 * (a + a.T)
    sweeps, off, on = _jacobi_sweeps(a, v, tol, max_sweeps)
    if sweeps < 0:
        raise NumericError(
            f"eigh: Jacobi did not converge in {max_sweeps} sweeps "
            f"(off-diagonal residual {off:.3e}, diagonal norm {on:.3e})"
        )
    w = np.diag(a).copy()
    # stable sort keeps ties in index order
    order = np.argsort(-w, kind="stable")
    return SymmetricEigen(w[order], np.ascontiguousarray(v[:, order]), sweeps)
