"""Minimal reverse-mode differentiation over numpy arrays.

A :class:`GradTape` records every primitive applied to a :class:`Var` that
requires gradients, together with a closure mapping the output adjoint to the
input adjoints. :func:`backward` replays the records in reverse.

Ops are coarse (fused layer norm, fused causal attention, fused softmax
cross-entropy) so the toy transformers train at a usable speed.
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import ContractError, DimensionError
from .linalg import LAYER_NORM_EPS


class Var:
    __slots__ = ("value", "tape", "requires_grad", "grad", "name")

    def __init__(self, value, tape: GradTape | None = None, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.tape = tape
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, name={self.name!r})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)


class GradTape:
    """Ordered record of primitive applications. Single-threaded."""

    def __init__(self):
        self.records: list[tuple[Var, tuple, object]] = []
        self.params: list[Var] = []

    def param(self, value, name: str | None = None) -> Var:
        v = Var(value, self, True, name)
        self.params.append(v)
        return v

    def __len__(self):
        return len(self.records)

    def release(self) -> None:
        """Drop recorded intermediates. Vars point back at their tape, so without this
        every activation of a step lives until the cyclic collector gets round to it."""
        self.records.clear()


def const(value) -> Var:
    return Var(value)


def _wrap(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _emit(value, inputs: tuple, vjp) -> Var:
    tape = None
    for x in inputs:
        if x.requires_grad:
            tape = x.tape
            break
    if tape is None:
        return Var(value)
    out = Var(value, tape, True)
    tape.records.append((out, inputs, vjp))
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.shape, b.shape
    return _emit(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.shape, b.shape
    return _emit(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    av, bv = a.value, b.value
    return _emit(av * bv, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def scale(a: Var, c: float) -> Var:
    return _emit(a.value * c, (a,), lambda g: (g * c,))


def total(a: Var) -> Var:
    """Sum of all entries as a scalar."""
    shape = a.shape
    return _emit(np.asarray(a.value.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Var) -> Var:
    n = a.value.size
    shape = a.shape
    return _emit(np.asarray(a.value.mean()), (a,), lambda g: (np.full(shape, float(g) / n),))


def reshape(a: Var, shape) -> Var:
    old = a.shape
    return _emit(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Var, axes) -> Var:
    inv = np.argsort(axes)
    return _emit(a.value.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def matmul(a, b) -> Var:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = _wrap(a), _wrap(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {av.shape} by {bv.shape}")

    def vjp(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _emit(av @ bv, (a, b), vjp)


def linear(x: Var, w: Var, b: Var | None = None) -> Var:
    """``x @ w + b`` where ``x`` has any number of leading axes."""
    xv, wv = x.value, w.value
    if xv.shape[-1] != wv.shape[0]:
        raise DimensionError(f"linear: input {xv.shape} does not match weight {wv.shape}")
    flat = xv.reshape(-1, xv.shape[-1])
    out = flat @ wv
    if b is not None:
        out = out + b.value
    out = out.reshape(xv.shape[:-1] + (wv.shape[1],))

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wv.T).reshape(xv.shape)
        gw = flat.T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, w) if b is None else (x, w, b)
    return _emit(out, inputs, vjp)


def take_rows(table: Var, idx: np.ndarray) -> Var:
    """Gather ``table[idx]`` (embedding lookup)."""
    tv = table.value
    idx = np.asarray(idx)

    def vjp(g):
        gt = np.zeros_like(tv)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, tv.shape[1]))
        return (gt,)

    return _emit(tv[idx], (table,), vjp)


def layer_norm(x: Var, gain: Var, bias: Var, eps: float = LAYER_NORM_EPS) -> Var:
    xv = x.value
    d = xv.shape[-1]
    if d < 2:
        raise DimensionError(f"layer_norm needs a last axis of size >= 2, got {xv.shape}")
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gv = gain.value

    def vjp(g):
        gxhat = g * gv
        gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                     - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _emit(xhat * gv + bias.value, (x, gain, bias), vjp)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Var) -> Var:
    """Tanh-approximated GELU."""
    xv = x.value
    x2 = xv * xv
    t = np.tanh(_GELU_C * xv * (1.0 + 0.044715 * x2))

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * dinner),)

    return _emit(0.5 * xv * (1.0 + t), (x,), vjp)


def sigmoid(x: Var) -> Var:
    xv = x.value
    s = np.empty_like(xv)
    pos = xv >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-xv[pos]))
    e = np.exp(xv[~pos])
    s[~pos] = e / (1.0 + e)
    return _emit(s, (x,), lambda g: (g * s * (1.0 - s),))


_MASKS: dict[int, np.ndarray] = {}


def _causal_mask(T: int) -> np.ndarray:
    m = _MASKS.get(T)
    if m is None:
        m = np.triu(np.full((T, T), -np.inf), k=1)
        _MASKS[T] = m
    return m


def causal_attention(q: Var, k: Var, v: Var) -> Var:
    """Scaled dot-product attention with a causal mask.

    Inputs are ``(..., T, d_head)``; position ``i`` attends to positions ``<= i``.
    """
    qv, kv, vv = q.value, k.value, v.value
    T, dh = qv.shape[-2], qv.shape[-1]
    c = 1.0 / math.sqrt(dh)
    p = qv @ np.swapaxes(kv, -1, -2)
    p *= c
    p += _causal_mask(T)
    p -= p.max(axis=-1, keepdims=True)
    np.exp(p, out=p)
    p /= p.sum(axis=-1, keepdims=True)
    out = p @ vv

    def vjp(g):
        gv = np.swapaxes(p, -1, -2) @ g
        gs = g @ np.swapaxes(vv, -1, -2)
        gs -= (gs * p).sum(axis=-1, keepdims=True)
        gs *= p
        gs *= c
        return gs @ kv, np.swapaxes(gs, -1, -2) @ qv, gv

    return _emit(out, (q, k, v), vjp)


def cross_entropy(logits: Var, targets: np.ndarray) -> Var:
    """Mean softmax cross-entropy over all leading positions."""
    lv = logits.value
    targets = np.asarray(targets)
    if lv.shape[:-1] != targets.shape:
        raise DimensionError(f"cross_entropy: logits {lv.shape} vs targets {targets.shape}")
    n = targets.size
    if n == 0:
        raise ContractError("cross_entropy: empty batch")
    flat = lv.reshape(-1, lv.shape[-1])
    m = flat.max(axis=1, keepdims=True)
    e = np.exp(flat - m)
    z = e.sum(axis=1, keepdims=True)
    logp_t = (flat - m - np.log(z))[np.arange(n), targets.reshape(-1)]
    loss = -logp_t.mean()

    def vjp(g):
        p = e / z
        p[np.arange(n), targets.reshape(-1)] -= 1.0
        return ((float(g) / n) * p.reshape(lv.shape),)

    return _emit(np.asarray(loss), (logits,), vjp)


def backward(tape: GradTape, loss: Var) -> dict[int, np.ndarray]:
    """Propagate adjoints from a scalar ``loss`` to every tape parameter.

    Sets ``.grad`` on each parameter (zeros when unreachable) and returns a
    mapping from parameter index on the tape to its gradient.
    """
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad and loss.tape is tape:
        grads[id(loss)] = np.ones_like(loss.value)
    for out, inputs, vjp in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for x, gx in zip(inputs, vjp(g)):
            if gx is None or not x.requires_grad:
                continue
            key = id(x)
            if key in grads:
                grads[key] = grads[key] + gx
            else:
                grads[key] = gx
    result = {}
    for i, p in enumerate(tape.params):
        g = grads.get(id(p))
        p.grad = np.zeros_like(p.value) if g is None else np.asarray(g, dtype=np.float64).reshape(p.value.shape)
        result[i] = p.grad
    return result
