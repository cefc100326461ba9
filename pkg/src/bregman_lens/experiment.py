"""The 2x2 factorial: training, Hessian measurement, steering, task sweeps, report.

Every stage writes line-delimited JSON records under ``raw/``; tables and
figures are rendered only from those records, so each reported number can be
traced back to a stored line.

Output layout::

    checkpoints/<variant>.blns, checkpoints/<variant>_loss.csv
    raw/{train,phase1,phase2,tasks}.jsonl, raw/steering_traces.csv
    tables/*.csv, tables/*.txt
    figures/*.svg
    manifest.json
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import os
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from . import checkpoint as ckpt
from . import geometry as geo
from . import steering as st
from .checkpoint import atomic_write_bytes
from .data import TASKS, sample_text, task_examples
from .errors import ConfigurationError, ContractError, ValidationError
from .model import VARIANTS, ModelConfig, ModelState, forward, init, steer_residual
from .training import Corpus, TrainPlan, default_corpus, load_corpus, make_corpus, sample_contexts, train

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
FINAL = "final"
NOISE_ABS = 1e-6  # floor on |kl_advantage| when the eps=0 controls are exactly zero
STAGES = ("train", "phase1", "phase2", "tasks")


@dataclass(frozen=True)
class Phase1Spec:
    n_batches: int = 30
    batch_size: int = 16
    top_k: int | None = None
    per_context_summaries: bool = False

    @property
    def n_contexts(self) -> int:
        return self.n_batches * self.batch_size


@dataclass(frozen=True)
class Phase2Spec:
    concept: str = "capitalization"
    n_contexts: int = 10
    step_sizes: tuple[float, ...] = st.DEFAULT_STEP_SIZES
    reference_step: float = 0.2
    max_steps: int = 400
    methods: tuple[str, ...] = ("euclidean", "dual")
    n_prompts: int = 40


@dataclass(frozen=True)
class TaskSpec:
    tasks: tuple[str, ...] = TASKS
    n_examples: int = 24
    step_sizes: tuple[float, ...] = st.DEFAULT_STEP_SIZES


@dataclass(frozen=True)
class FactorialSpec:
    base: ModelConfig = field(default_factory=ModelConfig)
    plan: TrainPlan = field(default_factory=TrainPlan)
    phase1: Phase1Spec = field(default_factory=Phase1Spec)
    phase2: Phase2Spec = field(default_factory=Phase2Spec)
    tasks: TaskSpec = field(default_factory=TaskSpec)
    variants: tuple[str, ...] = tuple(VARIANTS)
    corpus_path: str | None = None
    corpus_bytes: int = 1_000_000
    seed: int = 0
    threads: int = 1

    def validate(self) -> FactorialSpec:
        self.base.validate()
        self.plan.validate()
        bad = [v for v in self.variants if v not in VARIANTS]
        if bad or not self.variants:
            raise ValidationError(f"unknown variant(s) {bad}; valid: {', '.join(VARIANTS)}")
        p1, p2, tk = self.phase1, self.phase2, self.tasks
        if p1.n_batches < 1 or p1.batch_size < 1:
            raise ValidationError("phase1 needs at least one batch of one context")
        if p1.top_k is not None and not 2 <= p1.top_k <= self.base.vocab_size:
            raise ValidationError(f"phase1 top_k must lie in [2, {self.base.vocab_size}]")
        if p2.concept not in st.CONCEPTS:
            raise ValidationError(f"unknown concept {p2.concept!r}; valid: {', '.join(st.CONCEPTS)}")
        if p2.n_contexts < 1 or p2.max_steps < 1 or not p2.step_sizes:
            raise ValidationError("phase2 needs contexts, steps and step sizes")
        if p2.reference_step not in p2.step_sizes:
            raise ValidationError(f"reference_step {p2.reference_step} is not one of the step sizes {p2.step_sizes}")
        if "euclidean" not in p2.methods or len(p2.methods) < 2 or any(m not in st.METHODS for m in p2.methods):
            raise ValidationError(f"phase2 methods must include euclidean and one of {st.METHODS[1:]}")
        if any(e <= 0 for e in p2.step_sizes + tk.step_sizes):
            raise ValidationError("step sizes must be positive (the eps=0 control is added automatically)")
        unknown = [t for t in tk.tasks if t not in TASKS]
        if unknown:
            raise ValidationError(f"unknown task(s) {unknown}; valid: {', '.join(TASKS)}")
        if self.threads < 1:
            raise ValidationError("threads must be >= 1")
        return self

    @property
    def dual_method(self) -> str:
        return next(m for m in self.phase2.methods if m != "euclidean")

    def layers(self) -> list[int | str]:
        return list(range(self.base.n_layers)) + [FINAL]


def toy_preset(seed: int = 0) -> FactorialSpec:
    """The documented toy scale: L=4, d=64, context 128, 2000 steps."""
    base = ModelConfig(embedding_std=0.125, seed=seed)
    return FactorialSpec(base=base, plan=TrainPlan(seed=seed), seed=seed)


def desk_preset(seed: int = 0) -> FactorialSpec:
    """What fits the time budget on a single CPU core: context 64, 600 steps."""
    base = ModelConfig(context_length=64, embedding_std=0.125, seed=seed)
    plan = TrainPlan(steps=600, learning_rate=1e-3, warmup_steps=60, checkpoint_every=200, seed=seed)
    return FactorialSpec(base=base, plan=plan, seed=seed)


def smoke_preset(seed: int = 0) -> FactorialSpec:
    """Tiny end-to-end run for tests and demos (seconds, not minutes)."""
    base = ModelConfig(n_layers=2, n_heads=2, d_model=16, context_length=24, embedding_std=0.25, seed=seed)
    plan = TrainPlan(steps=20, batch_size=4, learning_rate=3e-3, warmup_steps=2, checkpoint_every=10, val_batches=1,
                     seed=seed)
    return FactorialSpec(
        base=base, plan=plan,
        phase1=Phase1Spec(n_batches=2, batch_size=4),
        phase2=Phase2Spec(n_contexts=2, step_sizes=(0.5, 2.0), reference_step=0.5, max_steps=40, n_prompts=8),
        tasks=TaskSpec(n_examples=3, step_sizes=(0.5, 2.0)),
        corpus_bytes=60_000, seed=seed,
    )


PRESETS = {"toy": toy_preset, "desk": desk_preset, "smoke": smoke_preset}


# ---- output layout and records ----------------------------------------------


class Layout:
    def __init__(self, root):
        self.root = Path(root)

    def checkpoint(self, variant: str) -> Path:
        return self.root / "checkpoints" / f"{variant}.blns"

    def loss_csv(self, variant: str) -> Path:
        return self.root / "checkpoints" / f"{variant}_loss.csv"

    def raw(self, stage: str) -> Path:
        return self.root / "raw" / f"{stage}.jsonl"

    @property
    def traces(self) -> Path:
        return self.root / "raw" / "steering_traces.csv"

    @property
    def tables(self) -> Path:
        return self.root / "tables"

    @property
    def figures(self) -> Path:
        return self.root / "figures"

    @property
    def manifest(self) -> Path:
        return self.root / "manifest.json"


def _clean(x):
    """JSON-safe value: numpy scalars unwrapped, nan/inf mapped to null."""
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return [_clean(v) for v in x.tolist()]
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    return x


def _num(x) -> float:
    return math.nan if x is None else float(x)


def dump_records(records: list[dict]) -> bytes:
    lines = [json.dumps(_clean({"schema": SCHEMA_VERSION, **r}), sort_keys=True, allow_nan=False) for r in records]
    return ("\n".join(lines) + "\n").encode("utf-8")


def load_records(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"missing upstream artifact: {path}")
    out = []
    for n, line in enumerate(path.read_text("utf-8").splitlines(), 1):
        if not line.strip():
            continue
        rec = json.loads(line)
        if rec.get("schema") != SCHEMA_VERSION:
            raise ValidationError(f"{path}:{n}: record schema {rec.get('schema')} != {SCHEMA_VERSION}")
        out.append(rec)
    return out


def spec_record(spec: FactorialSpec) -> dict:
    return _clean(dataclasses.asdict(spec))


def _layer_key(layer) -> str:
    return str(layer)


def _layer_sort(layer) -> tuple:
    return (1, 0) if layer == FINAL else (0, int(layer))


# ---- stage drivers ------------------------------------------------------------


def build_corpus(spec: FactorialSpec) -> Corpus:
    if spec.corpus_path == "sample":
        return make_corpus(sample_text(), seed=spec.seed, sources=("sample",))
    if spec.corpus_path:
        return load_corpus(spec.corpus_path, seed=spec.seed)
    return default_corpus(spec.seed, spec.corpus_bytes)


def _map(spec: FactorialSpec, fn, items):
    """Run ``fn`` over ``items`` in order, optionally across processes."""
    if spec.threads > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=min(spec.threads, len(items))) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


def _train_one(args):
    spec, corpus, variant = args
    res = train(init(spec.base.variant(variant)), corpus, spec.plan)
    return variant, res


def run_training(spec: FactorialSpec, out, corpus: Corpus | None = None) -> dict[str, ModelState]:
    spec.validate()
    lay = Layout(out)
    corpus = corpus if corpus is not None else build_corpus(spec)
    results = _map(spec, _train_one, [(spec, corpus, v) for v in spec.variants])
    records, states = [], {}
    for variant, res in results:
        ckpt.save(res.state, lay.checkpoint(variant))
        res.write_loss_csv(lay.loss_csv(variant))
        states[variant] = res.state
        smooth = float(np.mean(res.train_loss[-20:])) if res.train_loss else math.nan
        records.append({
            "kind": "train", "variant": variant, "steps": len(res.train_loss),
            "initial_loss": res.train_loss[0] if res.train_loss else None, "final_smoothed_loss": smooth,
            "val_loss": {str(k): v for k, v in res.val_loss.items()}, "batch_digest": res.batch_digest,
            "n_params": res.state.n_params(),
        })
        log.info("trained %s: final smoothed loss %.4f", variant, smooth)
    digests = {r["batch_digest"] for r in records}
    if len(digests) > 1:
        raise ValidationError("factorial variants consumed different batch streams")
    atomic_write_bytes(lay.raw("train"), dump_records([{"kind": "spec", "spec": spec_record(spec)}] + records))
    return states


def load_states(spec: FactorialSpec, out) -> dict[str, ModelState]:
    lay = Layout(out)
    states = {}
    for v in spec.variants:
        path = lay.checkpoint(v)
        if not path.exists():
            raise ConfigurationError(f"missing checkpoint for {v}: expected {path} (run the train stage first)")
        states[v] = ckpt.load(path, expected_config=spec.base.variant(v))
    return states


def _last_lams(state: ModelState, contexts: np.ndarray, batch: int = 16):
    """Last-position lens representation per layer, plus the final head: ``{layer: (n, d)}``."""
    L = state.config.n_layers
    out = {layer: [] for layer in list(range(L)) + [FINAL]}
    for i in range(0, len(contexts), batch):
        rec = forward(state, contexts[i:i + batch])
        for layer in range(L):
            out[layer].append(rec.lam[layer, :, -1, :])
        out[FINAL].append(rec.final_lam[:, -1, :])
    return {k: np.concatenate(v) for k, v in out.items()}


def _phase1_variant(args):
    spec, state, contexts, variant = args
    fam = geo.SoftmaxFamily(state.embedding)
    top_k = spec.phase1.top_k or fam.vocab_size
    lams = _last_lams(state, contexts)
    records = []
    for layer, rows in lams.items():
        ests = []
        for cid, lam in enumerate(rows):
            est = geo.hessian(fam, lam, top_k)
            ests.append(dataclasses.replace(est, layer=layer, model_id=variant))
            p = geo.probs(fam, lam)
            ent = float(-(p[p > 0] * np.log(p[p > 0])).sum())
            records.append({"kind": "context", "variant": variant, "layer": _layer_key(layer), "context_id": cid,
                            "trace": float(np.trace(est.matrix)), "entropy": ent})
        summary = geo.summarize(geo.aggregate_hessian(ests))
        cell = {
            "kind": "spectrum", "variant": variant, "layer": _layer_key(layer), "n_contexts": len(ests),
            "top_k": top_k, "eigenvalues": summary.eigenvalues, "effective_rank": summary.effective_rank,
            "condition_number": summary.condition_number, "trace": summary.trace,
            "retained_rank": summary.retained_rank, "trace_collapse": summary.trace_collapse,
        }
        if spec.phase1.per_context_summaries:
            cell["mean_of_summaries"] = geo.mean_of_summaries([geo.summarize(e) for e in ests])
        records.append(cell)
    return records


def run_phase1(spec: FactorialSpec, states: dict[str, ModelState], out, corpus: Corpus | None = None) -> list[dict]:
    """Aggregate Hessian spectra per (variant, layer) over held-out contexts."""
    spec.validate()
    corpus = corpus if corpus is not None else build_corpus(spec)
    contexts = sample_contexts(corpus, corpus.measure_pool, spec.phase1.n_contexts, spec.base.context_length,
                               spec.seed)
    jobs = [(spec, states[v], contexts, v) for v in spec.variants]
    records = [r for chunk in _map(spec, _phase1_variant, jobs) for r in chunk]
    atomic_write_bytes(Layout(out).raw("phase1"), dump_records(records))
    return records


def _run_summary(tr: st.SteeringTrace) -> dict:
    return {"stop_step": tr.stop_step, "stop_kl": tr.stop_kl, "final_p": tr.p_target[-1],
            "start_p": tr.p_target[0], "steps": len(tr.p_target) - 1}


def _phase2_variant(args):
    spec, state, contexts, variant = args
    p2 = spec.phase2
    fam = geo.SoftmaxFamily(state.embedding)
    concept_spec = st.CONCEPTS[p2.concept](n_prompts=p2.n_prompts, seed=spec.seed)
    lams = _last_lams(state, contexts)
    records, traces = [], []
    for layer, rows in lams.items():
        try:
            concept = st.build_concept(fam, state, concept_spec, layer)
        except ValidationError as exc:
            records.append({"kind": "cell_failed", "variant": variant, "layer": _layer_key(layer), "reason": str(exc)})
            continue
        records.append({"kind": "concept", "variant": variant, "layer": _layer_key(layer), "name": concept.name,
                        "target": list(concept.target), "v": concept.v})
        for cid, lam0 in enumerate(rows):
            cos = st.cosine_diagnostic(fam, lam0, concept.v)
            records.append({"kind": "cosine", "variant": variant, "layer": _layer_key(layer), "context_id": cid,
                            "cosine": cos.value, "degenerate": cos.degenerate})
            for eps in (0.0,) + tuple(p2.step_sizes):
                runs = {}
                for method in p2.methods:
                    tr = st.run_steering(fam, lam0, concept, method, eps, p2.max_steps, context_id=cid)
                    tr.layer = _layer_key(layer)
                    runs[method] = _run_summary(tr)
                    if eps == p2.reference_step:
                        traces.append((variant, tr))
                records.append({"kind": "steer", "variant": variant, "layer": _layer_key(layer), "context_id": cid,
                                "epsilon": eps, "runs": runs})
    return records, traces


def _traces_csv(traces) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("variant",) + st.TRACE_COLUMNS)
    for variant, tr in traces:
        for row in csv.reader(io.StringIO(st.traces_csv([tr]))):
            if row[0] != "method":
                w.writerow([variant] + row)
    return buf.getvalue().encode("ascii")


def run_phase2(spec: FactorialSpec, states: dict[str, ModelState], out, corpus: Corpus | None = None) -> list[dict]:
    """Paired Euclidean/dual steering and the cosine diagnostic per (variant, layer)."""
    spec.validate()
    corpus = corpus if corpus is not None else build_corpus(spec)
    contexts = sample_contexts(corpus, corpus.steer_pool, spec.phase2.n_contexts, spec.base.context_length,
                               spec.seed)
    jobs = [(spec, states[v], contexts, v) for v in spec.variants]
    records, traces = [], []
    for recs, trs in _map(spec, _phase2_variant, jobs):
        records += recs
        traces += trs
    lay = Layout(out)
    atomic_write_bytes(lay.raw("phase2"), dump_records(records))
    atomic_write_bytes(lay.traces, _traces_csv(traces))
    return records


def task_direction(task: str, embedding: np.ndarray, example) -> np.ndarray:
    """Unit embedding difference from the example's contrast tokens toward its answer."""
    d = embedding[example.answer] - embedding[list(example.contrast)].mean(axis=0)
    n = float(np.linalg.norm(d))
    if n == 0:
        raise ValidationError(f"{task}: answer and contrast embeddings coincide")
    return d / n


def _tasks_variant(args):
    spec, state, variant = args
    cfg = state.config
    C = cfg.context_length
    eps_all = (0.0,) + tuple(spec.tasks.step_sizes)
    records = []
    for task in spec.tasks.tasks:
        examples = task_examples(task, spec.tasks.n_examples, seed=spec.seed)
        for ex_id, ex in enumerate(examples):
            toks = ex.prompt[-C:]
            v = task_direction(task, state.embedding, ex)
            rec = forward(state, toks)
            for layer in range(cfg.n_layers):
                # steps are relative to the size of the residual vector being steered
                scale = float(np.linalg.norm(rec.x[layer, -1]))
                logp = steer_residual(state, toks, layer, np.outer(eps_all, v) * scale)
                p = np.exp(logp[:, ex.answer])
                for eps, pe in zip(eps_all, p):
                    records.append({"kind": "task", "variant": variant, "task": task, "layer": layer,
                                    "example_id": ex_id, "epsilon": eps, "p_base": p[0], "p_steered": pe})
    return records


def run_task_sweep(spec: FactorialSpec, states: dict[str, ModelState], out) -> list[dict]:
    """Residual-stream steering toward the correct continuation at each (layer, eps)."""
    spec.validate()
    jobs = [(spec, states[v], v) for v in spec.variants]
    records = [r for chunk in _map(spec, _tasks_variant, jobs) for r in chunk]
    atomic_write_bytes(Layout(out).raw("tasks"), dump_records(records))
    return records


# ---- aggregation --------------------------------------------------------------


@dataclass
class FactorialResult:
    variants: tuple[str, ...]
    layers: tuple[str, ...]
    spectra: dict = field(default_factory=dict)  # (variant, layer) -> spectrum record
    steering: dict = field(default_factory=dict)  # (variant, layer, eps) -> KLAdvantage
    cosine: dict = field(default_factory=dict)  # (variant, layer) -> (mean cosine, n_degenerate, n)
    tasks: dict = field(default_factory=dict)  # (variant, task, layer, eps) -> (mean effect, n)
    failed_cells: dict = field(default_factory=dict)  # (variant, layer) -> reason
    step_sizes: tuple[float, ...] = ()
    task_step_sizes: tuple[float, ...] = ()
    reference_step: float = 0.0
    dual_method: str = "dual"
    train: dict = field(default_factory=dict)

    def is_empty(self) -> bool:
        return not (self.spectra or self.steering or self.tasks)

    def advantage(self, variant, layer, eps=None) -> float:
        a = self.steering.get((variant, _layer_key(layer), self.reference_step if eps is None else eps))
        return math.nan if a is None else a.value

    def noise_floor(self) -> float:
        zero = [abs(a.value) for (_, _, e), a in self.steering.items() if e == 0.0 and not math.isnan(a.value)]
        return max(zero + [NOISE_ABS])

    def sign_consistency(self) -> list[dict]:
        """Per (variant, layer): do the advantage signs agree across every step size?"""
        floor = self.noise_floor()
        rows = []
        for v in self.variants:
            for layer in self.layers:
                vals = [self.advantage(v, layer, e) for e in self.step_sizes]
                ref = self.advantage(v, layer)
                defined = all(not math.isnan(x) for x in vals)
                signs = {int(np.sign(x)) for x in vals if not math.isnan(x)}
                consistent = defined and len(signs) == 1 and 0 not in signs
                rows.append({"variant": v, "layer": layer, "reference_advantage": ref,
                             "above_floor": (not math.isnan(ref)) and abs(ref) > floor,
                             "consistent": consistent, "signs": "".join("+" if x > 0 else "-" if x < 0 else "?"
                                                                      for x in vals)})
        return rows

    def scatter(self) -> list[dict]:
        rows = []
        for v in self.variants:
            for layer in self.layers:
                c = self.cosine.get((v, layer))
                rows.append({"variant": v, "layer": layer, "cosine": c[0] if c else math.nan,
                             "kl_advantage": self.advantage(v, layer)})
        return rows

    def spearman(self) -> float:
        pts = [(r["cosine"], r["kl_advantage"]) for r in self.scatter()
               if not (math.isnan(r["cosine"]) or math.isnan(r["kl_advantage"]))]
        if len(pts) < 3:
            return math.nan
        x, y = zip(*pts)
        if len(set(x)) < 2 or len(set(y)) < 2:
            return math.nan
        return float(spearmanr(x, y).statistic)

    def task_profile(self, variant, task) -> dict:
        """Per layer: mean effect at each step size (eps=0 excluded)."""
        L = [int(x) for x in self.layers if x != FINAL]
        return {layer: [self.tasks[(variant, task, layer, e)][0] for e in self.task_step_sizes] for layer in L}

    def task_best(self, variant, task) -> dict:
        best = None
        for layer, effects in self.task_profile(variant, task).items():
            for e, eff in zip(self.task_step_sizes, effects):
                if best is None or eff > best["effect"]:
                    best = {"layer": layer, "epsilon": e, "effect": eff,
                            "sign_consistent": all(x > 0 for x in effects) or all(x < 0 for x in effects)}
        return best


def collect(spec: FactorialSpec, out) -> FactorialResult:
    """Rebuild the aggregate result from the raw records on disk."""
    lay = Layout(out)
    res = FactorialResult(tuple(spec.variants), tuple(_layer_key(x) for x in spec.layers()),
                          step_sizes=tuple(spec.phase2.step_sizes), task_step_sizes=tuple(spec.tasks.step_sizes),
                          reference_step=spec.phase2.reference_step, dual_method=spec.dual_method)
    if lay.raw("train").exists():
        res.train = {r["variant"]: r for r in load_records(lay.raw("train")) if r["kind"] == "train"}
    if lay.raw("phase1").exists():
        for r in load_records(lay.raw("phase1")):
            if r["kind"] == "spectrum":
                res.spectra[(r["variant"], r["layer"])] = r
    if lay.raw("phase2").exists():
        pairs = defaultdict(list)
        cos = defaultdict(list)
        dual = spec.dual_method
        for r in load_records(lay.raw("phase2")):
            key = (r["variant"], r["layer"])
            if r["kind"] == "cell_failed":
                res.failed_cells[key] = r["reason"]
            elif r["kind"] == "cosine":
                cos[key].append((_num(r["cosine"]), r["degenerate"]))
            elif r["kind"] == "steer":
                e, d = r["runs"]["euclidean"], r["runs"][dual]
                pairs[key + (float(r["epsilon"]),)].append((_as_trace(e), _as_trace(d)))
        for key, ps in pairs.items():
            res.steering[key] = st.kl_advantage(ps)
        for key, vals in cos.items():
            res.cosine[key] = (float(np.mean([c for c, _ in vals])), sum(d for _, d in vals), len(vals))
    if lay.raw("tasks").exists():
        eff = defaultdict(list)
        for r in load_records(lay.raw("tasks")):
            eff[(r["variant"], r["task"], int(r["layer"]), float(r["epsilon"]))].append(r["p_steered"] - r["p_base"])
        res.tasks = {k: (float(np.mean(v)), len(v)) for k, v in eff.items()}
    return res


def _as_trace(run: dict) -> st.SteeringTrace:
    """Minimal trace carrying just what kl_advantage reads."""
    stop = run["stop_step"]
    tr = st.SteeringTrace("", 0.0, stop_step=stop)
    if stop is not None:
        tr.kl = [0.0] * stop + [_num(run["stop_kl"])]
    return tr


# ---- rendering ----------------------------------------------------------------


def _fmt(x, digits: int = 4) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "n/a"
    if isinstance(x, float):
        return f"{x:.{digits}g}"
    return str(x)


def _csv_bytes(header, rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow(["" if (isinstance(x, float) and math.isnan(x)) else (repr(x) if isinstance(x, float) else x)
                    for x in row])
    return buf.getvalue().encode("utf-8")


def _text_table(title, header, rows) -> str:
    cells = [list(map(str, header))] + [[_fmt(x) for x in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = [title, ""]
    for n, r in enumerate(cells):
        lines.append("  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths))))
        if n == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _layer_table(res: FactorialResult, metric) -> tuple[list, list]:
    header = ["layer"] + list(res.variants)
    rows = []
    for layer in res.layers:
        rows.append([layer] + [metric(v, layer) for v in res.variants])
    return header, rows


def _spec_metric(res, name):
    def get(v, layer):
        r = res.spectra.get((v, layer))
        return math.nan if r is None else _num(r[name])
    return get


def _figure_svg(kind: str, res: FactorialResult) -> bytes:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "bregman-lens", "svg.fonttype": "none", "font.size": 9}):
        fig, ax = plt.subplots(figsize=(6.0, 4.0))
        if kind in ("effective_rank", "trace"):
            xs = list(range(len(res.layers)))
            for v in res.variants:
                ys = [_spec_metric(res, kind)(v, layer) for layer in res.layers]
                ax.plot(xs, ys, marker="o", label=v)
            ax.set_xticks(xs, list(res.layers))
            ax.set_xlabel("layer")
            ax.set_ylabel("effective rank of H" if kind == "effective_rank" else "trace of H")
            if kind == "trace":
                ax.set_yscale("log")
            ax.legend()
        else:
            for v in res.variants:
                pts = [r for r in res.scatter() if r["variant"] == v]
                ax.scatter([r["cosine"] for r in pts], [r["kl_advantage"] for r in pts], label=v)
            ax.axvline(st.UNRELIABLE_BELOW, linestyle="--", color="grey")
            ax.axhline(0.0, linewidth=0.5, color="black")
            ax.set_xlabel("cosine(v, Hv)")
            ax.set_ylabel(f"KL advantage at eps={res.reference_step:g}")
            ax.legend()
        fig.tight_layout()
        buf = io.BytesIO()
        fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
        plt.close(fig)
    return buf.getvalue()


def render_report(res: FactorialResult, out) -> list[Path]:
    """Write CSV and text tables plus SVG figures; returns the written paths."""
    if res.is_empty():
        raise ContractError("nothing to render: the result holds no records")
    lay = Layout(out)
    files: dict[Path, bytes] = {}

    def table(stem, title, header, rows):
        files[lay.tables / f"{stem}.csv"] = _csv_bytes(header, rows)
        files[lay.tables / f"{stem}.txt"] = _text_table(title, header, rows).encode("utf-8")

    if res.train:
        header = ["variant", "steps", "initial_loss", "final_smoothed_loss", "final_val_loss", "n_params"]
        rows = []
        for v in res.variants:
            r = res.train.get(v)
            if r:
                vals = list(r["val_loss"].values())
                rows.append([v, r["steps"], _num(r["initial_loss"]), _num(r["final_smoothed_loss"]),
                             _num(vals[-1]) if vals else math.nan, r["n_params"]])
        table("training", "Training summary", header, rows)
    if res.spectra:
        table("table1_effective_rank", "Effective rank of the aggregated Hessian by layer",
              *_layer_table(res, _spec_metric(res, "effective_rank")))
        table("table2_condition_number", "Condition number over the retained spectrum by layer",
              *_layer_table(res, _spec_metric(res, "condition_number")))
        table("trace", "Trace of the aggregated Hessian by layer", *_layer_table(res, _spec_metric(res, "trace")))
        files[lay.figures / "effective_rank.svg"] = _figure_svg("effective_rank", res)
        files[lay.figures / "trace.svg"] = _figure_svg("trace", res)
    if res.steering:
        table("table3_kl_advantage", f"KL advantage (euclidean - {res.dual_method}) at eps={res.reference_step:g}",
              *_layer_table(res, lambda v, layer: res.advantage(v, layer)))
        rows = []
        for (v, layer, e), a in sorted(res.steering.items(), key=lambda kv: (kv[0][0], _layer_sort(kv[0][1]), kv[0][2])):
            rows.append([v, layer, e, a.value, a.n_used, a.n_failed])
        table("kl_advantage_sweep", "KL advantage per step size (eps=0 rows are controls)",
              ["variant", "layer", "epsilon", "kl_advantage", "n_used", "n_failed"], rows)
        table("table4_cosine", "Mean cosine(v, Hv) by layer",
              *_layer_table(res, lambda v, layer: res.cosine.get((v, layer), (math.nan,))[0]))
        scatter = res.scatter()
        table("scatter", f"Cosine vs KL advantage (Spearman rho = {_fmt(res.spearman())})",
              ["variant", "layer", "cosine", "kl_advantage", "verdict"],
              [[r["variant"], r["layer"], r["cosine"], r["kl_advantage"],
                "n/a" if math.isnan(r["cosine"]) else st.verdict(r["cosine"])] for r in scatter])
        sc = res.sign_consistency()
        table("sign_consistency", f"Advantage sign across step sizes (noise floor {_fmt(res.noise_floor())})",
              ["variant", "layer", "reference_advantage", "above_floor", "consistent", "signs"],
              [[r["variant"], r["layer"], r["reference_advantage"], int(r["above_floor"]), int(r["consistent"]),
                r["signs"]] for r in sc])
        files[lay.figures / "cosine_vs_advantage.svg"] = _figure_svg("scatter", res)
    if res.failed_cells:
        table("failed_cells", "Cells without a concept direction", ["variant", "layer", "reason"],
              [[v, layer, why] for (v, layer), why in sorted(res.failed_cells.items())])
    if res.tasks:
        rows = []
        for (v, task, layer, e), (eff, n) in sorted(res.tasks.items()):
            rows.append([v, task, layer, e, eff, n])
        table("task_effects", "Mean change in p(correct) from residual steering",
              ["variant", "task", "layer", "epsilon", "effect", "n"], rows)
        best_rows = []
        tasks = sorted({k[1] for k in res.tasks})
        for v in res.variants:
            for task in tasks:
                b = res.task_best(v, task)
                best_rows.append([v, task, b["layer"], b["epsilon"], b["effect"], int(b["sign_consistent"])])
        table("task_best", "Best (layer, eps) cell per task",
              ["variant", "task", "best_layer", "best_epsilon", "effect", "sign_consistent"], best_rows)
    written = []
    for path, payload in sorted(files.items()):
        atomic_write_bytes(path, payload)
        written.append(path)
    return written


def write_manifest(spec: FactorialSpec, out) -> Path:
    """List every artifact under ``out`` with its size and SHA-256."""
    lay = Layout(out)
    entries = []
    for path in sorted(p for p in lay.root.rglob("*") if p.is_file() and p != lay.manifest and ".tmp" not in p.name):
        data = path.read_bytes()
        entries.append({"path": path.relative_to(lay.root).as_posix(), "bytes": len(data),
                        "sha256": hashlib.sha256(data).hexdigest()})
    body = {"schema": SCHEMA_VERSION, "spec": spec_record(spec), "files": entries}
    atomic_write_bytes(lay.manifest, (json.dumps(body, indent=2, sort_keys=True) + "\n").encode("utf-8"))
    return lay.manifest


def verify_manifest(out) -> list[str]:
    """Paths whose checksum no longer matches (or that vanished)."""
    lay = Layout(out)
    if not lay.manifest.exists():
        raise ConfigurationError(f"missing manifest: {lay.manifest}")
    bad = []
    for e in json.loads(lay.manifest.read_text("utf-8"))["files"]:
        p = lay.root / e["path"]
        if not p.exists() or hashlib.sha256(p.read_bytes()).hexdigest() != e["sha256"]:
            bad.append(e["path"])
    return bad


def run_all(spec: FactorialSpec, out) -> FactorialResult:
    spec.validate()
    corpus = build_corpus(spec)
    states = run_training(spec, out, corpus)
    run_phase1(spec, states, out, corpus)
    run_phase2(spec, states, out, corpus)
    run_task_sweep(spec, states, out)
    res = collect(spec, out)
    render_report(res, out)
    write_manifest(spec, out)
    return res


def default_out_dir() -> Path:
    return Path(os.environ.get("BREGMAN_LENS_OUT", "bregman_lens_out"))
