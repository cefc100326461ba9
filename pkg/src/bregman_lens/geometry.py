"""Softmax as an exponential family over the rows of a tied embedding matrix.

For representation ``lam`` and embedding rows ``gamma_y`` the family is
``p(y | lam) = exp(lam . gamma_y - A(lam))``. The gradient of the log-normalizer
``A`` is the mean embedding (dual coordinates) and its Hessian is the embedding
covariance under ``p``, which serves as the metric tensor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError, ValidationError
from .numerics import eigh, logsumexp, stable_softmax

RANK_TOL = 1e-12
PSD_TOL = 1e-8
DEFAULT_TOP_K = 20000


@dataclass(frozen=True)
class SoftmaxFamily:
    embedding: np.ndarray  # (V, d)

    def __post_init__(self):
        g = np.asarray(self.embedding, dtype=np.float64)
        if g.ndim != 2 or g.shape[0] < 2 or g.shape[1] < 1:
            raise ValidationError(f"embedding must be V x d with V >= 2, d >= 1; got {g.shape}")
        if not np.all(np.isfinite(g)):
            raise ValidationError("embedding has non-finite entries")
        object.__setattr__(self, "embedding", g)

    @property
    def vocab_size(self) -> int:
        return self.embedding.shape[0]

    @property
    def dim(self) -> int:
        return self.embedding.shape[1]


@dataclass(frozen=True)
class Representation:
    lam: np.ndarray
    layer: int | str = 0
    model_id: str = ""


@dataclass
class HessianEstimate:
    matrix: np.ndarray
    n_contexts: int = 1
    top_k: int = 0
    layer: int | str = 0
    model_id: str = ""


@dataclass
class SpectrumSummary:
    eigenvalues: np.ndarray
    effective_rank: float
    condition_number: float  # nan when undefined
    trace: float
    retained_rank: int
    trace_collapse: bool = False
    rank_deficient: bool = False
    extra: dict = field(default_factory=dict)

    @property
    def condition_defined(self) -> bool:
        return not math.isnan(self.condition_number)


def _lam(family: SoftmaxFamily, lam) -> np.ndarray:
    if isinstance(lam, Representation):
        lam = lam.lam
    lam = np.asarray(lam, dtype=np.float64)
    if lam.shape[-1:] != (family.dim,):
        raise DimensionError(f"representation shape {lam.shape} does not match embedding dim {family.dim}")
    return lam


def logits(family: SoftmaxFamily, lam) -> np.ndarray:
    return _lam(family, lam) @ family.embedding.T


def probs(family: SoftmaxFamily, lam) -> np.ndarray:
    return stable_softmax(logits(family, lam))


def log_normalizer(family: SoftmaxFamily, lam) -> float:
    """``log sum_y exp(lam . gamma_y)`` via max-shifted log-sum-exp."""
    return float(logsumexp(logits(family, lam)))


def dual_coords(family: SoftmaxFamily, lam) -> np.ndarray:
    """Expected embedding ``sum_y p(y|lam) gamma_y``."""
    return probs(family, lam) @ family.embedding


def _top_k_probs(p: np.ndarray, top_k: int) -> tuple[np.ndarray, np.ndarray]:
    V = p.shape[0]
    if top_k < 2 or top_k > V:
        raise ContractError(f"top_k must be in [2, {V}], got {top_k}")
    if top_k == V:
        idx = np.arange(V)
    else:
        # stable sort: ties resolved toward the lowest token id
        idx = np.sort(np.argsort(-p, kind="stable")[:top_k])
    q = p[idx]
    return idx, q / q.sum()


def covariance_from_probs(gamma: np.ndarray, p: np.ndarray) -> np.ndarray:
    """``sum_y p_y g_y g_y^T - eta eta^T`` computed from centered rows."""
    eta = p @ gamma
    c = gamma - eta
    h = (c * p[:, None]).T @ c
    return 0.5 * (h + h.T)


def hessian(family: SoftmaxFamily, lam, top_k: int | None = None) -> HessianEstimate:
    """Covariance of the embedding rows under the (top-k truncated) softmax."""
    rep = lam if isinstance(lam, Representation) else None
    V = family.vocab_size
    k = min(V, DEFAULT_TOP_K) if top_k is None else top_k
    p = probs(family, lam)
    idx, q = _top_k_probs(p, k)
    h = covariance_from_probs(family.embedding[idx], q)
    return HessianEstimate(
        matrix=h,
        n_contexts=1,
        top_k=k,
        layer=rep.layer if rep else 0,
        model_id=rep.model_id if rep else "",
    )


def _pairwise_sum(mats: list[np.ndarray]) -> np.ndarray:
    while len(mats) > 1:
        nxt = [mats[i] + mats[i + 1] for i in range(0, len(mats) - 1, 2)]
        if len(mats) % 2:
            nxt.append(mats[-1])
        mats = nxt
    return mats[0]


def aggregate_hessian(estimates: list[HessianEstimate]) -> HessianEstimate:
    """Entrywise mean of per-context Hessians (pairwise summation)."""
    if not estimates:
        raise ContractError("aggregate_hessian: empty list")
    first = estimates[0]
    for e in estimates[1:]:
        if e.layer != first.layer or e.model_id != first.model_id:
            raise ValidationError(
                f"aggregate_hessian: mixed provenance ({first.model_id!r}, {first.layer!r}) "
                f"vs ({e.model_id!r}, {e.layer!r})"
            )
        if e.matrix.shape != first.matrix.shape:
            raise DimensionError(f"aggregate_hessian: shapes {first.matrix.shape} vs {e.matrix.shape}")
    total = _pairwise_sum([np.asarray(e.matrix, dtype=np.float64) for e in estimates])
    weight = len(estimates)
    return HessianEstimate(
        matrix=total / weight,
        n_contexts=sum(e.n_contexts for e in estimates),
        top_k=first.top_k,
        layer=first.layer,
        model_id=first.model_id,
    )


def _clamped(eigs) -> np.ndarray:
    return np.clip(np.asarray(eigs, dtype=np.float64), 0.0, None)


def effective_rank(eigs) -> float:
    """Exponentiated entropy of the normalized (clamped) spectrum.

    Returns 0.0 for an all-zero spectrum; callers treat that as trace collapse.
    """
    s = _clamped(eigs)
    tot = s.sum()
    if tot <= 0.0:
        return 0.0
    q = s / tot
    q = q[q > 0]  # tiny entries can underflow to zero after normalizing
    return float(np.exp(-(q * np.log(q)).sum()))


def retained_rank(eigs, tol: float = RANK_TOL) -> int:
    s = _clamped(eigs)
    smax = s.max() if s.size else 0.0
    if smax <= 0.0:
        return 0
    return int((s >= tol * smax).sum())


def condition_number(eigs, tol: float = RANK_TOL) -> float:
    """Largest eigenvalue over the smallest one at or above ``tol * max``; nan if max <= 0."""
    s = np.asarray(eigs, dtype=np.float64)
    smax = s.max() if s.size else 0.0
    if smax <= 0.0:
        return math.nan
    kept = s[s >= tol * smax]
    return float(smax / kept.min())


def summarize(h: HessianEstimate | np.ndarray) -> SpectrumSummary:
    mat = h.matrix if isinstance(h, HessianEstimate) else np.asarray(h, dtype=np.float64)
    eig = eigh(mat)
    raw = eig.eigenvalues
    tr = float(np.trace(mat))
    if raw.size and raw[-1] < -PSD_TOL * max(tr, 0.0) and tr > 0:
        raise ValidationError(f"Hessian not PSD: smallest eigenvalue {raw[-1]:.3e}, trace {tr:.3e}")
    lam = _clamped(raw)
    er = effective_rank(lam)
    kappa = condition_number(lam)
    rr = retained_rank(lam)
    return SpectrumSummary(
        eigenvalues=lam,
        effective_rank=er,
        condition_number=kappa,
        trace=tr,
        retained_rank=rr,
        trace_collapse=er == 0.0,
        rank_deficient=rr < lam.size,
        extra={"min_raw_eigenvalue": float(raw[-1]) if raw.size else 0.0},
    )


def mean_of_summaries(summaries: list[SpectrumSummary]) -> dict[str, float]:
    """Alternative reading: average the per-context metrics instead of the matrices."""
    if not summaries:
        raise ContractError("mean_of_summaries: empty list")
    kappas = [s.condition_number for s in summaries if s.condition_defined]
    return {
        "effective_rank": float(np.mean([s.effective_rank for s in summaries])),
        "condition_number": float(np.mean(kappas)) if kappas else math.nan,
        "trace": float(np.mean([s.trace for s in summaries])),
    }
