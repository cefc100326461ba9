"""Concept directions and Euclidean vs. dual steering of lens representations.

Steering acts on the lens-normalized representation ``lam`` of one layer; the
output distribution is ``softmax(lam @ W_E^T)``. A Euclidean step adds the
concept vector; a dual step follows the damped inverse metric image of it.
Both take Euclidean-length ``eps`` steps so stopping thresholds are comparable.

Method ``dual`` solves ``(H + delta I) u = v`` against the fixed concept vector
at every step. Method ``natural`` solves against ``E[gamma | T] - eta``
instead, which is the natural gradient of ``log p(T)``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import geometry as geo
from .data import LOWER, prose, sentence, tokenize
from .errors import ContractError, DegenerateConceptError, DimensionError, ValidationError
from .model import ModelState, forward, representation_at
from .numerics import eigh, log_softmax

METHODS = ("euclidean", "dual", "natural")
STOP_THRESHOLD = 0.8
DAMPING_REL = 1e-4
DEFAULT_STEP_SIZES = (0.05, 0.1, 0.2, 0.4, 0.8, 1.6)
UNRELIABLE_BELOW = 0.3
SOUND_ABOVE = 0.4


@dataclass(frozen=True)
class ConceptSpec:
    pole_a: tuple[int, ...]
    pole_b: tuple[int, ...]
    prompts: tuple[tuple[np.ndarray, str], ...] = ()  # (tokens, "a" | "b")
    mode: str = "activation_diff"
    name: str = "concept"

    def validate(self) -> ConceptSpec:
        if not self.pole_a or not self.pole_b:
            raise ValidationError("both concept poles must be non-empty")
        if self.mode not in ("activation_diff", "embedding_diff"):
            raise ValidationError(f"unknown concept mode {self.mode!r}")
        if self.mode == "activation_diff":
            labels = {lab for _, lab in self.prompts}
            if labels != {"a", "b"}:
                raise ValidationError(f"prompt labels must cover both poles, got {sorted(labels)}")
        return self


@dataclass(frozen=True)
class ConceptDirection:
    v: np.ndarray
    target: tuple[int, ...]
    layer: int | str = 0
    name: str = "concept"


def _unit(x: np.ndarray, what: str) -> np.ndarray:
    n = float(np.linalg.norm(x))
    if not math.isfinite(n) or n <= 1e-12:
        raise DegenerateConceptError(f"{what} has zero norm")
    return x / n


def build_concept(family: geo.SoftmaxFamily, state: ModelState | None, spec: ConceptSpec,
                  layer: int | str) -> ConceptDirection:
    """Unit concept direction at ``layer`` and its target set (pole-a tokens)."""
    spec.validate()
    V = family.vocab_size
    target = tuple(sorted(set(int(t) for t in spec.pole_a)))
    if min(target) < 0 or max(target) >= V:
        raise ValidationError("target tokens outside the vocabulary")
    if spec.mode == "embedding_diff":
        gamma = family.embedding
        pairs = list(zip(spec.pole_a, spec.pole_b))
        diff = np.mean([gamma[a] - gamma[b] for a, b in pairs], axis=0)
        return ConceptDirection(_unit(diff, "embedding difference"), target, layer, spec.name)
    if state is None:
        raise ContractError("activation_diff concepts need a model")
    sums = {"a": [], "b": []}
    C = state.config.context_length
    for tokens, label in spec.prompts:
        rec = forward(state, np.asarray(tokens)[-C:])  # only the last position is read
        sums[label].append(representation_at(rec, layer, -1).lam)
    diff = np.mean(sums["a"], axis=0) - np.mean(sums["b"], axis=0)
    return ConceptDirection(_unit(diff, "activation difference"), target, layer, spec.name)


def euclidean_step(lam, v, eps: float) -> np.ndarray:
    lam, v = np.asarray(lam, dtype=np.float64), np.asarray(v, dtype=np.float64)
    if lam.shape != v.shape:
        raise DimensionError(f"euclidean_step: {lam.shape} vs {v.shape}")
    return lam + eps * v


def damping(h: np.ndarray) -> float:
    """Proportional damping ``1e-4 * trace(H) / d``, floored away from zero."""
    return max(DAMPING_REL * float(np.trace(h)) / h.shape[0], 1e-300)


def solve_damped(h: np.ndarray, v: np.ndarray, delta: float | None = None, initial_vectors=None):
    """``(H + delta I)^-1 v`` through the eigendecomposition of ``H``; returns (u, eig)."""
    if delta is None:
        delta = damping(h)
    if delta <= 0:
        raise ContractError("damping must be positive")
    eig = eigh(h, initial_vectors=initial_vectors)
    q = eig.eigenvectors
    s = np.clip(eig.eigenvalues, 0.0, None)
    return q @ ((q.T @ v) / (s + delta)), eig


def dual_direction(h: np.ndarray, v, delta: float | None = None, initial_vectors=None):
    u, eig = solve_damped(np.asarray(h, dtype=np.float64), np.asarray(v, dtype=np.float64), delta, initial_vectors)
    return u / np.linalg.norm(u), eig


def dual_step(family: geo.SoftmaxFamily, lam, v, eps: float, delta: float | None = None,
              top_k: int | None = None) -> np.ndarray:
    lam, v = np.asarray(lam, dtype=np.float64), np.asarray(v, dtype=np.float64)
    if lam.shape != v.shape:
        raise DimensionError(f"dual_step: {lam.shape} vs {v.shape}")
    if eps == 0:
        return lam.copy()
    h = geo.hessian(family, lam, top_k or family.vocab_size).matrix
    u, _ = dual_direction(h, v, delta)
    return lam + eps * u


def target_probability(family: geo.SoftmaxFamily, lam, target: Sequence[int]) -> float:
    return float(geo.probs(family, lam)[list(target)].sum())


def _complement(V: int, target: Sequence[int]) -> np.ndarray:
    mask = np.ones(V, dtype=bool)
    mask[list(target)] = False
    return mask


def off_target_kl(family: geo.SoftmaxFamily, lam_base, lam_steered, target: Sequence[int]) -> float:
    """KL(steered || base) between the distributions restricted to non-target tokens.

    Returns nan when the base distribution has (numerically) no off-target mass.
    """
    V = family.vocab_size
    keep = _complement(V, target)
    if not keep.any():
        raise ContractError("target set must be a proper subset of the vocabulary")
    zb = geo.logits(family, lam_base)
    zs = geo.logits(family, lam_steered)
    base_off = float(np.exp(log_softmax(zb)[keep]).sum())
    if base_off < 1e-12:
        return math.nan
    lb = log_softmax(zb[keep])
    ls = log_softmax(zs[keep])
    ps = np.exp(ls)
    return max(float((ps * (ls - lb)).sum()), 0.0)


@dataclass
class SteeringTrace:
    method: str
    eps: float
    p_target: list[float] = field(default_factory=list)
    kl: list[float] = field(default_factory=list)
    lams: list[np.ndarray] = field(default_factory=list)
    stop_step: int | None = None
    layer: int | str = 0
    context_id: int = 0

    @property
    def failed(self) -> bool:
        return self.stop_step is None

    @property
    def stop_kl(self) -> float:
        return math.nan if self.stop_step is None else self.kl[self.stop_step]


def logp_gradient(family: geo.SoftmaxFamily, lam, target: Sequence[int]) -> np.ndarray:
    """Gradient of ``log p(T | lam)``: target-conditional mean embedding minus the mean."""
    p = geo.probs(family, lam)
    gamma = family.embedding
    idx = list(target)
    pt = p[idx]
    return (pt @ gamma[idx]) / pt.sum() - p @ gamma


def run_steering(family: geo.SoftmaxFamily, lam0, concept: ConceptDirection, method: str, eps: float,
                 max_steps: int, threshold: float = STOP_THRESHOLD, top_k: int | None = None,
                 context_id: int = 0, keep_lams: bool = False) -> SteeringTrace:
    """Iterate steps from ``lam0`` until ``p(T) >= threshold`` or ``max_steps``."""
    if method not in METHODS:
        raise ValidationError(f"unknown steering method {method!r}; valid: {', '.join(METHODS)}")
    lam0 = np.asarray(lam0, dtype=np.float64)
    k = top_k or family.vocab_size
    tr = SteeringTrace(method, eps, layer=concept.layer, context_id=context_id)
    lam = lam0.copy()
    vecs = None
    for step in range(max_steps + 1):
        pt = target_probability(family, lam, concept.target)
        tr.p_target.append(pt)
        tr.kl.append(0.0 if step == 0 else off_target_kl(family, lam0, lam, concept.target))
        if keep_lams:
            tr.lams.append(lam.copy())
        if pt >= threshold:
            tr.stop_step = step
            break
        if step == max_steps or eps == 0:
            break  # a zero step can never reach the threshold
        if method == "euclidean":
            lam = lam + eps * concept.v
            continue
        h = geo.hessian(family, lam, k).matrix
        g = concept.v if method == "dual" else logp_gradient(family, lam, concept.target)
        u, eig = dual_direction(h, g, initial_vectors=vecs)
        vecs = eig.eigenvectors
        lam = lam + eps * u
    return tr


class KLAdvantage(NamedTuple):
    value: float  # nan when every pair failed
    n_used: int
    n_failed: int


def kl_advantage(pairs: Sequence[tuple[SteeringTrace, SteeringTrace]]) -> KLAdvantage:
    """Mean of ``KL_euclid - KL_dual`` at each trace's stop step over pairs where both stopped."""
    diffs = []
    failed = 0
    for e, d in pairs:
        ke, kd = e.stop_kl, d.stop_kl
        if e.failed or d.failed or math.isnan(ke) or math.isnan(kd):
            failed += 1
            continue
        diffs.append(ke - kd)
    return KLAdvantage(float(np.mean(diffs)) if diffs else math.nan, len(diffs), failed)


class Cosine(NamedTuple):
    value: float
    degenerate: bool


def cosine_from_hessian(h: np.ndarray, v, inverse: bool = False) -> Cosine:
    """Cosine between ``v`` and its dual image ``H v`` (or damped ``H^-1 v``)."""
    h = np.asarray(h, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nv = float(np.linalg.norm(v))
    if nv <= 0:
        raise ContractError("cosine diagnostic needs a non-zero direction")
    w = solve_damped(h, v)[0] if inverse else h @ v
    nw = float(np.linalg.norm(w))
    floor = 1e-14 * nv * max(float(np.trace(h)), 0.0) / h.shape[0]
    if nw == 0.0 or nw < floor:
        return Cosine(0.0, True)
    return Cosine(float(np.clip(v @ w / (nv * nw), -1.0, 1.0)), False)


def cosine_diagnostic(family: geo.SoftmaxFamily, lam, v, inverse: bool = False,
                      top_k: int | None = None) -> Cosine:
    h = geo.hessian(family, lam, top_k or family.vocab_size).matrix
    return cosine_from_hessian(h, v, inverse)


def verdict(cos: float) -> str:
    """``unreliable`` for cos < 0.3, ``caution`` for 0.3 <= cos <= 0.4, ``sound`` above 0.4."""
    if cos < UNRELIABLE_BELOW:
        return "unreliable"
    if cos <= SOUND_ABOVE:
        return "caution"
    return "sound"


TRACE_COLUMNS = ("method", "layer", "context_id", "epsilon", "step", "p_target", "off_target_kl", "stopped")


def traces_csv(traces: Sequence[SteeringTrace]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for t in traces:
        for step, (pt, kl) in enumerate(zip(t.p_target, t.kl)):
            w.writerow([t.method, t.layer, t.context_id, repr(t.eps), step, repr(pt), repr(kl),
                        int(t.stop_step == step)])
    return buf.getvalue()


UPPER = LOWER.upper()
VOWELS = "aeiou"


def capitalization_concept(n_prompts: int = 40, seed: int = 0) -> ConceptSpec:
    """Uppercase vs. lowercase letter poles; prompts end where the next byte is a capital or not."""
    rng = np.random.default_rng([seed, 0xCA9])
    prompts = []
    for i in range(n_prompts):
        text = prose(rng, int(rng.integers(1, 3))).rstrip("\n")
        if i % 2 == 0:
            prompts.append((tokenize(text + " "), "a"))
        else:
            s = sentence(rng)
            cut = s.index(" ") + 1
            prompts.append((tokenize(text + " " + s[:cut]), "b"))
    return ConceptSpec(tuple(ord(c) for c in UPPER), tuple(ord(c) for c in LOWER), tuple(prompts),
                       name="capitalization")


def vowel_concept(n_prompts: int = 40, seed: int = 0) -> ConceptSpec:
    """Vowel vs. consonant poles; prompts are cut right before a vowel or a consonant."""
    rng = np.random.default_rng([seed, 0xB0E])
    prompts = {"a": [], "b": []}
    while min(len(x) for x in prompts.values()) < n_prompts // 2:
        text = prose(rng, 2)
        pos = int(rng.integers(10, len(text) - 1))
        c = text[pos]
        if c not in LOWER:
            continue
        lab = "a" if c in VOWELS else "b"
        if len(prompts[lab]) < n_prompts // 2:
            prompts[lab].append((tokenize(text[:pos]), lab))
    consonants = [c for c in LOWER if c not in VOWELS]
    ordered = tuple(p for pair in zip(prompts["a"], prompts["b"]) for p in pair)
    return ConceptSpec(tuple(ord(c) for c in VOWELS), tuple(ord(c) for c in consonants), ordered, name="vowel")


CONCEPTS = {"capitalization": capitalization_concept, "vowel": vowel_concept}


def planted_concept_family(vocab_size: int = 64, dim: int = 8, anisotropy: float = 10.0, shift: float = 3.0,
                           n_target: int = 4, seed: int = 0):
    """Anisotropic Gaussian embeddings with a concept planted along one latent axis.

    ``gamma_y = A z_y`` with ``z_y ~ N(0, I)`` and axis scales spanning a factor of
    ``anisotropy`` (so the covariance spans its square). The first ``n_target``
    tokens get ``z`` shifted by ``shift`` along a random unit axis. Returns the
    family and an embedding-difference concept whose target is those tokens.
    """
    rng = np.random.default_rng([seed, 0xA515])
    scales = 2.0 * np.logspace(0.0, -np.log10(anisotropy), dim)
    z = rng.normal(size=(vocab_size, dim))
    axis = rng.normal(size=dim)
    z[:n_target] += shift * axis / np.linalg.norm(axis)
    gamma = z * scales
    target = tuple(range(n_target))
    v = gamma[:n_target].mean(axis=0) - gamma[n_target:].mean(axis=0)
    return geo.SoftmaxFamily(gamma), ConceptDirection(_unit(v, "planted concept"), target, 0, "planted")
