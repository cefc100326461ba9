"""Corpus handling, batching and the Adam training loop."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import atomic_write_bytes
from .data import synthetic_corpus, tokenize
from .errors import ContractError, TrainingError, ValidationError
from .model import ModelState, composite_loss, loss_value
from .numerics import autodiff as ad

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Corpus:
    """Byte stream split into disjoint train and validation spans.

    The validation span is further halved into a Phase-1 pool (Hessian
    measurement) and a Phase-2 pool (steering contexts).
    """

    tokens: np.ndarray
    train: tuple[tuple[int, int], ...]
    validation: tuple[int, int]
    sources: tuple[str, ...] = ()

    @property
    def measure_pool(self) -> tuple[int, int]:
        a, b = self.validation
        return a, (a + b) // 2

    @property
    def steer_pool(self) -> tuple[int, int]:
        a, b = self.validation
        return (a + b) // 2, b


def make_corpus(data: bytes, seed: int = 0, val_fraction: float = 0.1, sources: tuple[str, ...] = ()) -> Corpus:
    """Carve a contiguous validation span at a seeded offset; the rest is training data."""
    tokens = tokenize(data)
    n = tokens.size
    n_val = int(round(n * val_fraction))
    if n_val < 2 or n - n_val < 2:
        raise ValidationError(f"corpus of {n} bytes too small for a {val_fraction:.0%} validation split")
    start = int(np.random.default_rng([seed, 0x5EED]).integers(0, n - n_val + 1))
    train = tuple(s for s in ((0, start), (start + n_val, n)) if s[1] - s[0] > 0)
    return Corpus(tokens, train, (start, start + n_val), sources)


def load_corpus(paths, seed: int = 0, val_fraction: float = 0.1) -> Corpus:
    paths = [Path(p) for p in ([paths] if isinstance(paths, (str, os.PathLike)) else paths)]
    data = b"".join(p.read_bytes() for p in paths)
    return make_corpus(data, seed, val_fraction, tuple(str(p) for p in paths))


def default_corpus(seed: int = 0, n_bytes: int = 1_000_000) -> Corpus:
    return make_corpus(synthetic_corpus(n_bytes, seed), seed, sources=(f"synthetic:{n_bytes}:{seed}",))


@dataclass(frozen=True)
class TrainPlan:
    steps: int = 2000
    batch_size: int = 16
    learning_rate: float = 3e-4
    warmup_steps: int = 100
    seed: int = 0
    checkpoint_every: int = 250
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    clip_norm: float = 1.0
    min_lr_ratio: float = 0.1
    val_batches: int = 4

    def validate(self) -> TrainPlan:
        if self.steps < 0 or self.batch_size < 1 or self.learning_rate <= 0 or self.warmup_steps < 0:
            raise ValidationError(f"invalid TrainPlan: {self}")
        if self.checkpoint_every < 1:
            raise ValidationError("checkpoint_every must be >= 1")
        return self


def _windows(rng: np.random.Generator, spans, n: int, width: int) -> np.ndarray:
    usable = [(a, b) for a, b in spans if b - a >= width]
    if not usable:
        raise ValidationError(f"corpus split too short for windows of {width} tokens")
    lengths = np.array([b - a - width + 1 for a, b in usable], dtype=np.float64)
    which = rng.choice(len(usable), size=n, p=lengths / lengths.sum())
    starts = np.array([usable[w][0] + rng.integers(0, lengths[w]) for w in which], dtype=np.int64)
    return starts


def next_batch(corpus: Corpus, plan: TrainPlan, step: int, context_length: int):
    """Deterministic ``(tokens, targets)`` for ``step``; targets are tokens shifted by one."""
    if not 0 <= step < max(plan.steps, 1):
        raise ContractError(f"step {step} outside plan of {plan.steps} steps")
    width = context_length + 1
    if sum(b - a for a, b in corpus.train) < width:
        raise ValidationError(f"corpus shorter than context_length + 1 = {width}")
    rng = np.random.default_rng([plan.seed, step])
    starts = _windows(rng, corpus.train, plan.batch_size, width)
    win = corpus.tokens[starts[:, None] + np.arange(width)]
    return win[:, :-1], win[:, 1:]


def sample_contexts(corpus: Corpus, pool: tuple[int, int], n: int, length: int, seed: int) -> np.ndarray:
    """Seeded uniform windows of ``length`` tokens from a held-out pool."""
    rng = np.random.default_rng([seed, pool[0], pool[1], 0xC0DE])
    starts = _windows(rng, [pool], n, length)
    return corpus.tokens[starts[:, None] + np.arange(length)]


def validation_batches(corpus: Corpus, plan: TrainPlan, context_length: int):
    rng = np.random.default_rng([plan.seed, 0xFA1])
    width = context_length + 1
    starts = _windows(rng, [corpus.validation], plan.val_batches * plan.batch_size, width)
    win = corpus.tokens[starts[:, None] + np.arange(width)]
    return [(win[i:i + plan.batch_size, :-1], win[i:i + plan.batch_size, 1:])
            for i in range(0, len(win), plan.batch_size)]


def lr_at(plan: TrainPlan, step: int) -> float:
    """Linear warmup, then cosine decay to ``min_lr_ratio`` of the peak."""
    peak = plan.learning_rate
    if plan.warmup_steps and step < plan.warmup_steps:
        return peak * (step + 1) / plan.warmup_steps
    span = max(plan.steps - plan.warmup_steps, 1)
    progress = min((step - plan.warmup_steps) / span, 1.0)
    floor = plan.min_lr_ratio * peak
    return floor + 0.5 * (peak - floor) * (1.0 + math.cos(math.pi * progress))


class Adam:
    def __init__(self, params: dict[str, np.ndarray], beta1=0.9, beta2=0.95, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm > max_norm:
        s = max_norm / norm
        for g in grads.values():
            g *= s
    return norm


@dataclass
class TrainResult:
    state: ModelState
    train_loss: list[float] = field(default_factory=list)
    val_loss: dict[int, float] = field(default_factory=dict)
    batch_digest: str = ""

    def loss_rows(self):
        for i, tl in enumerate(self.train_loss):
            yield i, tl, self.val_loss.get(i)

    def loss_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "train_loss", "val_loss"])
        for step, tl, vl in self.loss_rows():
            w.writerow([step, repr(tl), "" if vl is None else repr(vl)])
        return buf.getvalue()

    def write_loss_csv(self, path) -> None:
        atomic_write_bytes(path, self.loss_csv().encode("ascii"))


def evaluate(state: ModelState, batches) -> float:
    return float(np.mean([loss_value_final(state, x, y) for x, y in batches]))


def loss_value_final(state: ModelState, tokens, targets) -> float:
    """Next-token cross-entropy of the model output alone (no auxiliary terms)."""
    plain = ModelState(dataclasses.replace(state.config, aux_loss=False), state.params)
    return loss_value(plain, tokens, targets)


def train(state: ModelState, corpus: Corpus, plan: TrainPlan, progress=None) -> TrainResult:
    """Train a copy of ``state``; the input state is left untouched."""
    plan.validate()
    cfg = state.config
    state = state.copy()
    result = TrainResult(state)
    if plan.steps == 0:
        return result
    opt = Adam(state.params, plan.beta1, plan.beta2, plan.eps)
    val = validation_batches(corpus, plan, cfg.context_length)
    digest = hashlib.sha256()
    names = list(state.params)
    frozen = set(cfg.frozen_parameters())
    for step in range(plan.steps):
        x, y = next_batch(corpus, plan, step, cfg.context_length)
        digest.update(x.astype("<i8").tobytes())
        tape = ad.GradTape()
        loss, _ = composite_loss(state, x, y, tape)
        lv = float(loss.value)
        if not math.isfinite(lv):
            pnorm = math.sqrt(sum(float((p * p).sum()) for p in state.params.values()))
            raise TrainingError(f"non-finite loss at step {step} (parameter norm {pnorm:.4g})")
        ad.backward(tape, loss)
        grads = {n: p.grad for n, p in zip(names, tape.params) if n not in frozen}
        tape.release()
        clip_gradients(grads, plan.clip_norm)
        opt.step(state.params, grads, lr_at(plan, step))
        result.train_loss.append(lv)
        if (step + 1) % plan.checkpoint_every == 0 or step == plan.steps - 1:
            result.val_loss[step] = evaluate(state, val)
            log.info("step %d train %.4f val %.4f", step, lv, result.val_loss[step])
        if progress is not None:
            progress(step, lv)
    result.batch_digest = digest.hexdigest()
    return result
