"""Toy transformers for the stream-separation x per-layer-supervision grid.

Both stream modes share one parameter layout so every factorial variant built
from a base config has exactly the same parameter count.

Block ``l`` maps its input ``h`` to ``h + Attn(LN1(h)) + FFN(LN2(h))`` (parallel
residual, pre-norm). In ``single`` mode ``h`` is the residual stream itself.
In ``cascade`` mode the block input is ``x_t + x_e + pos`` while only ``x_e``
accumulates updates; the token stream ``x_t = W_E[t]`` is never written.

Layer ``l`` is read out after block ``l``: ``z_l = LN_l(x_l) W_E^T`` with a
per-layer lens norm. The model output ("final") is ``LN_f(x_{L-1}) W_E^T``; the
main loss trains ``LN_f``, so the lens of layer ``L-1`` only moves under the
auxiliary loss schedule (which stops at ``L-2``) and stays at its identity init.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ValidationError
from .geometry import Representation
from .numerics import autodiff as ad
from .numerics import log_softmax

STREAM_MODES = ("single", "cascade")
AUX_SCHEDULES = ("proportional", "linear")
GATE_BIAS_INIT = 4.0
INIT_STD = 0.02

VARIANTS = {
    "cascade_aux": ("cascade", True),
    "cascade_control": ("cascade", False),
    "single_aux": ("single", True),
    "single_control": ("single", False),
}


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 64
    vocab_size: int = 256
    context_length: int = 128
    stream_mode: str = "single"
    aux_loss: bool = False
    aux_lambda: float = 0.1
    aux_schedule: str = "proportional"
    freeze_token_stream: bool = True
    embedding_std: float = INIT_STD
    seed: int = 0

    def validate(self) -> ModelConfig:
        problems = []
        if self.n_layers < 2:
            problems.append(f"n_layers must be >= 2 (got {self.n_layers})")
        if self.n_heads < 1:
            problems.append(f"n_heads must be >= 1 (got {self.n_heads})")
        if self.d_model < 2 or self.d_model % max(self.n_heads, 1):
            problems.append(f"d_model must be >= 2 and divisible by n_heads (got {self.d_model}, {self.n_heads})")
        if self.vocab_size < 2:
            problems.append(f"vocab_size must be >= 2 (got {self.vocab_size})")
        if self.context_length < 1:
            problems.append(f"context_length must be >= 1 (got {self.context_length})")
        if self.stream_mode not in STREAM_MODES:
            problems.append(f"stream_mode must be one of {STREAM_MODES} (got {self.stream_mode!r})")
        if self.aux_schedule not in AUX_SCHEDULES:
            problems.append(f"aux_schedule must be one of {AUX_SCHEDULES} (got {self.aux_schedule!r})")
        if not self.embedding_std > 0:
            problems.append(f"embedding_std must be > 0 (got {self.embedding_std})")
        if self.aux_lambda < 0:
            problems.append(f"aux_lambda must be >= 0 (got {self.aux_lambda})")
        if problems:
            raise ValidationError("invalid ModelConfig: " + "; ".join(problems))
        return self

    def variant(self, name: str) -> ModelConfig:
        if name not in VARIANTS:
            raise ValidationError(f"unknown variant {name!r}; valid: {', '.join(VARIANTS)}")
        mode, aux = VARIANTS[name]
        return dataclasses.replace(self, stream_mode=mode, aux_loss=aux)

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def frozen_parameters(self) -> tuple[str, ...]:
        """Parameters the optimizer must not update (the cascade token stream)."""
        if self.stream_mode == "cascade" and self.freeze_token_stream:
            return ("wte",)
        return ()


def aux_weights(config: ModelConfig) -> np.ndarray:
    """Weights on the auxiliary losses of layers ``0 .. L-2`` (multiplier included)."""
    L = config.n_layers
    if config.aux_schedule == "proportional":
        return config.aux_lambda * (np.arange(L - 1) + 1.0) / L
    # rising linearly from 0.1 at the first layer toward 0.8 at the last, no extra multiplier
    return np.linspace(0.1, 0.8, L)[: L - 1]


def parameter_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Fixed parameter order; also the checkpoint block order."""
    d, V, C, F = config.d_model, config.vocab_size, config.context_length, 4 * config.d_model
    shapes = [("wte", (V, d)), ("wpe", (C, d))]
    for i in range(config.n_layers):
        p = f"h{i}."
        shapes += [
            (p + "ln1.g", (d,)), (p + "ln1.b", (d,)),
            (p + "attn.w_qkv", (d, 3 * d)), (p + "attn.b_qkv", (3 * d,)),
            (p + "attn.w_gate", (d, d)), (p + "attn.b_gate", (d,)),
            (p + "attn.w_o", (d, d)), (p + "attn.b_o", (d,)),
            (p + "ln2.g", (d,)), (p + "ln2.b", (d,)),
            (p + "mlp.w_fc", (d, F)), (p + "mlp.b_fc", (F,)),
            (p + "mlp.w_proj", (F, d)), (p + "mlp.b_proj", (d,)),
            (p + "lens.g", (d,)), (p + "lens.b", (d,)),
        ]
    shapes += [("ln_f.g", (d,)), ("ln_f.b", (d,))]
    return shapes


@dataclass
class ModelState:
    config: ModelConfig
    params: dict[str, np.ndarray]

    @property
    def embedding(self) -> np.ndarray:
        return self.params["wte"]

    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def copy(self) -> ModelState:
        return ModelState(self.config, {k: v.copy() for k, v in self.params.items()})


def init(config: ModelConfig) -> ModelState:
    config.validate()
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, shape in parameter_shapes(config):
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            params[name] = np.ones(shape)
        elif name.endswith("b_gate"):
            params[name] = np.full(shape, GATE_BIAS_INIT)
        elif leaf.startswith("b"):
            params[name] = np.zeros(shape)
        else:
            std = config.embedding_std if name == "wte" else INIT_STD
            params[name] = rng.normal(0.0, std, size=shape)
    return ModelState(config, params)


@dataclass
class ForwardRecord:
    x: np.ndarray  # (L, T, d) combined representation after each block
    lam: np.ndarray  # (L, T, d) lens-normalized representation
    logits: np.ndarray  # (L, T, V)
    final_lam: np.ndarray  # (T, d)
    final_logits: np.ndarray  # (T, V)
    x_t: np.ndarray | None = None  # cascade token stream (T, d)
    x_e: np.ndarray | None = None  # cascade contextual stream after each block (L, T, d)
    extra: dict = field(default_factory=dict)


def _check_tokens(config: ModelConfig, tokens) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim not in (1, 2):
        raise ValidationError(f"tokens must be 1-D or 2-D, got shape {tokens.shape}")
    if tokens.size == 0:
        raise ContractError("empty token sequence or batch")
    if tokens.shape[-1] > config.context_length:
        raise ValidationError(f"sequence length {tokens.shape[-1]} exceeds context_length {config.context_length}")
    if tokens.min() < 0 or tokens.max() >= config.vocab_size:
        raise ValidationError(f"token ids must lie in [0, {config.vocab_size})")
    if not np.issubdtype(tokens.dtype, np.integer):
        raise ValidationError("token ids must be integers")
    return tokens


class _Graph:
    """Forward computation parameterized over the tape (or no tape)."""

    def __init__(self, state: ModelState, tape: ad.GradTape | None = None):
        self.config = state.config
        if tape is None:
            self.p = {k: ad.Var(v) for k, v in state.params.items()}
        else:
            self.p = {k: tape.param(v, name=k) for k, v in state.params.items()}

    def attention(self, i: int, a: ad.Var) -> ad.Var:
        cfg, p = self.config, self.p
        pre = f"h{i}.attn."
        B, T, d = a.shape
        H, dh = cfg.n_heads, cfg.head_dim
        qkv = ad.linear(a, p[pre + "w_qkv"], p[pre + "b_qkv"])
        qkv = ad.transpose(ad.reshape(qkv, (B, T, 3, H, dh)), (2, 0, 3, 1, 4))  # 3,B,H,T,dh
        q, k, v = (_index0(qkv, j) for j in range(3))
        heads = ad.causal_attention(q, k, v)
        merged = ad.reshape(ad.transpose(heads, (0, 2, 1, 3)), (B, T, d))
        gate = ad.sigmoid(ad.linear(a, p[pre + "w_gate"], p[pre + "b_gate"]))
        return ad.linear(ad.mul(merged, gate), p[pre + "w_o"], p[pre + "b_o"])

    def mlp(self, i: int, f: ad.Var) -> ad.Var:
        p = self.p
        pre = f"h{i}.mlp."
        hid = ad.gelu(ad.linear(f, p[pre + "w_fc"], p[pre + "b_fc"]))
        return ad.linear(hid, p[pre + "w_proj"], p[pre + "b_proj"])

    def block_update(self, i: int, h: ad.Var) -> ad.Var:
        p = self.p
        a = ad.layer_norm(h, p[f"h{i}.ln1.g"], p[f"h{i}.ln1.b"])
        f = ad.layer_norm(h, p[f"h{i}.ln2.g"], p[f"h{i}.ln2.b"])
        return ad.add(self.attention(i, a), self.mlp(i, f))

    def streams(self, tokens: np.ndarray, start_layer: int = 0, resid: dict | None = None):
        """Yield ``(layer, x_l, x_e_l)`` after each block.

        ``resid`` optionally overrides the stream entering ``start_layer``:
        ``{"x": Var}`` for single mode, ``{"x_e": Var}`` for cascade mode.
        """
        cfg, p = self.config, self.p
        T = tokens.shape[-1]
        tok = ad.take_rows(p["wte"], tokens)
        pos = ad.take_rows(p["wpe"], np.arange(T))
        if cfg.stream_mode == "single":
            h = ad.add(tok, pos) if resid is None else resid["x"]
            for i in range(start_layer, cfg.n_layers):
                h = ad.add(h, self.block_update(i, h))
                yield i, h, None
        else:
            if resid is None:
                x_e = ad.const(np.zeros(tok.shape))
            else:
                x_e = resid["x_e"]
            for i in range(start_layer, cfg.n_layers):
                inp = ad.add(ad.add(tok, x_e), pos)
                x_e = ad.add(x_e, self.block_update(i, inp))
                yield i, ad.add(tok, x_e), x_e

    def lens(self, i: int | str, x: ad.Var) -> ad.Var:
        p = self.p
        if i == "final":
            return ad.layer_norm(x, p["ln_f.g"], p["ln_f.b"])
        return ad.layer_norm(x, p[f"h{i}.lens.g"], p[f"h{i}.lens.b"])

    def head(self, lam: ad.Var) -> ad.Var:
        return ad.matmul(lam, ad.transpose(self.p["wte"], (1, 0)))


def _index0(x: ad.Var, j: int) -> ad.Var:
    xv = x.value
    shape = xv.shape

    def vjp(g):
        out = np.zeros(shape)
        out[j] = g
        return (out,)

    return ad._emit(xv[j], (x,), vjp)


def forward(state: ModelState, tokens) -> ForwardRecord:
    """Full forward pass recording every layer's representation and lens logits.

    Accepts a single sequence ``(T,)`` or a batch ``(B, T)``; the record drops the
    batch axis for single sequences.
    """
    cfg = state.config
    tokens = _check_tokens(cfg, tokens)
    single = tokens.ndim == 1
    batch = tokens[None, :] if single else tokens
    g = _Graph(state)
    xs, lams, zs, xes = [], [], [], []
    last = None
    for i, x, x_e in g.streams(batch):
        lam = g.lens(i, x)
        xs.append(x.value)
        lams.append(lam.value)
        zs.append(readout(lam.value, state.embedding))
        if x_e is not None:
            xes.append(x_e.value)
        last = x
    final_lam = g.lens("final", last).value
    final_logits = readout(final_lam, state.embedding)

    x = np.stack(xs)
    lam = np.stack(lams)
    z = np.stack(zs)
    rec = ForwardRecord(
        x=x[:, 0] if single else x,
        lam=lam[:, 0] if single else lam,
        logits=z[:, 0] if single else z,
        final_lam=final_lam[0] if single else final_lam,
        final_logits=final_logits[0] if single else final_logits,
    )
    if cfg.stream_mode == "cascade":
        x_t = state.params["wte"][batch]
        x_e = np.stack(xes)
        rec.x_t = x_t[0] if single else x_t
        rec.x_e = x_e[:, 0] if single else x_e
    return rec


def steer_residual(state: ModelState, tokens, layer: int, deltas) -> np.ndarray:
    """Output log-probabilities at the last position after adding each row of
    ``deltas`` to the residual stream leaving block ``layer`` at that position.

    In cascade mode the perturbation enters the contextual stream ``x_e`` (the
    token stream stays frozen). Returns shape ``(n_deltas, V)``.
    """
    cfg = state.config
    tokens = _check_tokens(cfg, tokens)
    if tokens.ndim != 1:
        raise ContractError("steer_residual expects a single sequence")
    if not 0 <= layer < cfg.n_layers:
        raise ContractError(f"layer {layer} out of range [0, {cfg.n_layers})")
    deltas = np.atleast_2d(np.asarray(deltas, dtype=np.float64))
    n = deltas.shape[0]
    batch = np.broadcast_to(tokens, (n, tokens.size))
    g = _Graph(state)
    key = "x" if cfg.stream_mode == "single" else "x_e"
    resid = None
    for i, x, x_e in g.streams(batch):
        if i == layer:
            base = (x if key == "x" else x_e).value.copy()
            base[:, -1, :] += deltas
            resid = {key: ad.Var(base)}
            break
    last = resid["x"] if key == "x" else ad.add(ad.take_rows(g.p["wte"], batch), resid["x_e"])
    for _, x, _ in g.streams(batch, start_layer=layer + 1, resid=resid):
        last = x
    lam = g.lens("final", last).value[:, -1, :]
    return log_softmax(readout(lam, state.embedding), axis=-1)


def readout(lam: np.ndarray, embedding: np.ndarray) -> np.ndarray:
    """``lam @ W_E^T`` one vector at a time.

    A batched gemm may round differently from the single-vector product the
    geometry code uses, so records are built row by row to stay bit-identical.
    """
    flat = lam.reshape(-1, lam.shape[-1])
    wt = embedding.T
    out = np.empty((flat.shape[0], embedding.shape[0]))
    for r in range(flat.shape[0]):
        out[r] = flat[r] @ wt
    return out.reshape(lam.shape[:-1] + (embedding.shape[0],))


def gated_attention(state: ModelState, layer: int, x, gated: bool = True) -> np.ndarray:
    """Causal multi-head attention of block ``layer`` applied to ``x`` of shape ``(B, T, d)``.

    With ``gated=False`` the sigmoid output gate is replaced by ones.
    """
    g = _Graph(state)
    a = ad.Var(np.asarray(x, dtype=np.float64))
    if gated:
        return g.attention(layer, a).value
    saved = g.p[f"h{layer}.attn.b_gate"]
    g.p[f"h{layer}.attn.w_gate"] = ad.Var(np.zeros_like(g.p[f"h{layer}.attn.w_gate"].value))
    g.p[f"h{layer}.attn.b_gate"] = ad.Var(np.full_like(saved.value, np.inf))
    return g.attention(layer, a).value


def lens_logits(state: ModelState, x, layer: int | str) -> np.ndarray:
    """Logit-lens readout ``LN_layer(x) W_E^T`` of an arbitrary representation."""
    p = state.params
    g, b = ("ln_f.g", "ln_f.b") if layer == "final" else (f"h{layer}.lens.g", f"h{layer}.lens.b")
    # same LN routine as forward so the readout reproduces recorded logits exactly
    lam = ad.layer_norm(ad.Var(np.asarray(x, dtype=np.float64)), ad.Var(p[g]), ad.Var(p[b]))
    return readout(lam.value, p["wte"])


def representation_at(record: ForwardRecord, layer: int | str, position: int = -1, model_id: str = "") -> Representation:
    """The lens-normalized vector whose product with ``W_E^T`` is the layer's logits."""
    if layer == "final":
        lam = record.final_lam
    else:
        L = record.lam.shape[0]
        if not isinstance(layer, (int, np.integer)) or not 0 <= layer < L:
            raise ContractError(f"layer {layer!r} out of range [0, {L})")
        lam = record.lam[layer]
    if lam.ndim != 2:
        raise ContractError("representation_at expects a single-sequence record")
    T = lam.shape[0]
    if not -T <= position < T:
        raise ContractError(f"position {position} out of range for length {T}")
    return Representation(lam=lam[position].copy(), layer=layer, model_id=model_id)


def composite_loss(state: ModelState, tokens, targets, tape: ad.GradTape | None = None):
    """Final cross-entropy plus weighted per-layer lens cross-entropies.

    Returns ``(loss_var, graph)``; ``graph.p`` holds the tape parameters.
    """
    cfg = state.config
    tokens = _check_tokens(cfg, tokens)
    targets = np.asarray(targets)
    if tokens.ndim != 2:
        raise ContractError("composite_loss expects a (batch, time) token array")
    if tokens.shape[0] == 0:
        raise ContractError("composite_loss: empty batch")
    if targets.shape != tokens.shape:
        raise ContractError(f"targets shape {targets.shape} != tokens shape {tokens.shape}")
    g = _Graph(state, tape)
    weights = aux_weights(cfg) if cfg.aux_loss else None
    aux_terms = []
    last = None
    for i, x, _ in g.streams(tokens):
        last = x
        if weights is not None and i < cfg.n_layers - 1 and weights[i] != 0.0:
            ce = ad.cross_entropy(g.head(g.lens(i, x)), targets)
            aux_terms.append(ad.scale(ce, float(weights[i])))
    loss = ad.cross_entropy(g.head(g.lens("final", last)), targets)
    for t in aux_terms:
        loss = ad.add(loss, t)
    return loss, g


def loss_value(state: ModelState, tokens, targets) -> float:
    loss, _ = composite_loss(state, tokens, targets)
    return float(loss.value)
