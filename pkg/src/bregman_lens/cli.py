"""Command-line driver: ``bregman-lens <command> [options]``.

Configuration is layered: preset defaults, then an INI file (``--config``),
then command-line flags. INI sections map onto the experiment dataclasses::

    [run]      preset, seed, threads, variants, corpus_path, corpus_bytes
    [model]    ModelConfig fields
    [train]    TrainPlan fields
    [phase1]   n_batches, batch_size, top_k, per_context_summaries
    [phase2]   concept, n_contexts, step_sizes, reference_step, max_steps, methods, n_prompts
    [tasks]    tasks, n_examples, step_sizes

Tuple-valued keys take comma-separated lists. Unknown sections and keys are
rejected by name before any stage runs.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import logging
import sys
import typing
from pathlib import Path

import numpy as np

from . import __version__
from . import checkpoint as ckpt
from . import experiment as ex
from . import geometry as geo
from . import steering as st
from .errors import BregmanLensError, ConfigurationError, ValidationError
from .model import VARIANTS
from .training import sample_contexts

log = logging.getLogger("bregman_lens")

ENV_OUT = "BREGMAN_LENS_OUT"
SECTIONS = {"model": "base", "train": "plan", "phase1": "phase1", "phase2": "phase2", "tasks": "tasks"}
RUN_KEYS = ("preset", "seed", "threads", "variants", "corpus_path", "corpus_bytes")


class UsageError(BregmanLensError):
    pass


# ---- configuration ---------------------------------------------------------------


def _coerce(value: str, hint, key: str):
    """Parse an INI string according to a dataclass field annotation."""
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    try:
        if origin is tuple:
            inner = args[0]
            return tuple(_coerce(x.strip(), inner, key) for x in value.split(",") if x.strip())
        if type(None) in args:  # Optional[...]
            if value.strip().lower() in ("", "none"):
                return None
            return _coerce(value, next(a for a in args if a is not type(None)), key)
        if hint is bool:
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if hint in (int, float, str):
            return hint(value.strip())
    except ValueError:
        raise ConfigurationError(f"config key {key!r}: cannot parse {value!r} as {hint}") from None
    raise ConfigurationError(f"config key {key!r}: unsupported type {hint}")


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def _replace_section(obj, section: str, items: dict):
    hints = _hints(type(obj))
    names = {f.name for f in dataclasses.fields(obj)}
    unknown = sorted(set(items) - names)
    if unknown:
        raise ConfigurationError(f"unknown key(s) in [{section}]: {', '.join(unknown)}; valid: {', '.join(sorted(names))}")
    return dataclasses.replace(obj, **{k: _coerce(v, hints[k], f"{section}.{k}") for k, v in items.items()})


def read_config(path) -> dict[str, dict[str, str]]:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str  # keys are case-sensitive field names
    try:
        cp.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigurationError(f"{path}: {exc}") from None
    unknown = [s for s in cp.sections() if s not in SECTIONS and s != "run"]
    if unknown:
        raise ConfigurationError(f"unknown section(s) {unknown} in {path}; valid: run, {', '.join(SECTIONS)}")
    return {s: dict(cp.items(s)) for s in cp.sections()}


def _with_seed(spec: ex.FactorialSpec, seed: int) -> ex.FactorialSpec:
    return dataclasses.replace(spec, seed=seed, base=dataclasses.replace(spec.base, seed=seed),
                               plan=dataclasses.replace(spec.plan, seed=seed))


def build_spec(args: argparse.Namespace) -> ex.FactorialSpec:
    """Defaults < config file < flags, validated as a whole."""
    sections = read_config(args.config) if args.config else {}
    run = dict(sections.get("run", {}))
    bad = sorted(set(run) - set(RUN_KEYS))
    if bad:
        raise ConfigurationError(f"unknown key(s) in [run]: {', '.join(bad)}; valid: {', '.join(RUN_KEYS)}")
    preset = args.preset or run.pop("preset", "toy")
    run.pop("preset", None)
    if preset not in ex.PRESETS:
        raise ConfigurationError(f"unknown preset {preset!r}; valid: {', '.join(ex.PRESETS)}")
    spec = ex.PRESETS[preset]()
    for section, attr in SECTIONS.items():
        if section in sections:
            spec = dataclasses.replace(spec, **{attr: _replace_section(getattr(spec, attr), section, sections[section])})
    if run:
        spec = _replace_section(spec, "run", run)
    seed = args.seed if args.seed is not None else int(run.get("seed", spec.seed))
    spec = _with_seed(spec, seed)
    if args.threads is not None:
        spec = dataclasses.replace(spec, threads=args.threads)
    if getattr(args, "variant", None) not in (None, "all"):
        spec = dataclasses.replace(spec, variants=(args.variant,))
    if getattr(args, "corpus", None):
        spec = dataclasses.replace(spec, corpus_path=args.corpus)
    if getattr(args, "steps", None) is not None:
        spec = dataclasses.replace(spec, plan=dataclasses.replace(spec.plan, steps=args.steps))
    p1 = {k: getattr(args, k) for k in ("n_batches", "batch_size", "top_k") if getattr(args, k, None) is not None}
    if p1:
        spec = dataclasses.replace(spec, phase1=dataclasses.replace(spec.phase1, **p1))
    p2 = {k: getattr(args, k) for k in ("n_contexts", "max_steps", "concept") if getattr(args, k, None) is not None}
    if getattr(args, "method", None):
        p2["methods"] = ("euclidean", args.method)
    if p2:
        spec = dataclasses.replace(spec, phase2=dataclasses.replace(spec.phase2, **p2))
    if getattr(args, "n_examples", None) is not None:
        spec = dataclasses.replace(spec, tasks=dataclasses.replace(spec.tasks, n_examples=args.n_examples))
    return spec.validate()


def out_dir(args) -> Path:
    return Path(args.out) if args.out else ex.default_out_dir()


# ---- commands --------------------------------------------------------------------


def _require(paths) -> list[Path]:
    missing = [str(p) for p in paths if not Path(p).is_file()]
    if missing:
        raise ValidationError(f"expected output(s) not written: {', '.join(missing)}")
    return [Path(p) for p in paths]


def cmd_train(spec, out, args) -> list[Path]:
    lay = ex.Layout(out)
    ex.run_training(spec, out)
    return _require([lay.checkpoint(v) for v in spec.variants] + [lay.loss_csv(v) for v in spec.variants]
                    + [lay.raw("train")])


def cmd_hessian(spec, out, args) -> list[Path]:
    states = ex.load_states(spec, out)
    ex.run_phase1(spec, states, out)
    return _require([ex.Layout(out).raw("phase1")])


def cmd_steer(spec, out, args) -> list[Path]:
    states = ex.load_states(spec, out)
    ex.run_phase2(spec, states, out)
    lay = ex.Layout(out)
    return _require([lay.raw("phase2"), lay.traces])


def cmd_tasks(spec, out, args) -> list[Path]:
    states = ex.load_states(spec, out)
    ex.run_task_sweep(spec, states, out)
    return _require([ex.Layout(out).raw("tasks")])


def cmd_report(spec, out, args) -> list[Path]:
    lay = ex.Layout(out)
    if not any(lay.raw(s).exists() for s in ex.STAGES[1:]):
        raise ConfigurationError(f"no measurement records under {lay.root / 'raw'} (run hessian, steer or tasks first)")
    res = ex.collect(spec, out)
    written = ex.render_report(res, out)
    manifest = ex.write_manifest(spec, out)
    stale = ex.verify_manifest(out)
    if stale:
        raise ValidationError(f"manifest check failed for: {', '.join(stale)}")
    if res.steering:
        print(f"spearman(cosine, kl_advantage) = {res.spearman():.4f}")
    return _require(written + [manifest])


def cmd_run_all(spec, out, args) -> list[Path]:
    paths = []
    for fn in (cmd_train, cmd_hessian, cmd_steer, cmd_tasks, cmd_report):
        paths += fn(spec, out, args)
    return paths


def synthetic_family(kind: str):
    """Tiny closed-form cases for sanity checks: ``isotropic`` gives cos=1, ``crushed`` cos=0."""
    d = 4
    if kind == "isotropic":
        # cross-polytope at lam=0: uniform p, zero mean, H = I/d
        gamma = np.vstack([np.eye(d), -np.eye(d)])
    elif kind == "crushed":
        # no token varies along axis 0, so H annihilates it
        gamma = np.vstack([np.eye(d)[1:], -np.eye(d)[1:]])
    else:
        raise ConfigurationError(f"unknown synthetic family {kind!r}; valid: isotropic, crushed")
    return geo.SoftmaxFamily(gamma), np.zeros(d), np.eye(d)[0]


def cmd_diagnose(spec, out, args) -> list[Path]:
    if args.synthetic:
        fam, lam, v = synthetic_family(args.synthetic)
        cos = st.cosine_diagnostic(fam, lam, v, inverse=args.inverse)
        value, degenerate, n = cos.value, cos.degenerate, 1
    else:
        path = Path(args.checkpoint) if args.checkpoint else ex.Layout(out).checkpoint(spec.variants[0])
        if not path.is_file():
            raise ConfigurationError(f"missing checkpoint: {path}")
        state = ckpt.load(path)
        layer = args.layer if args.layer == ex.FINAL else int(args.layer)
        if layer != ex.FINAL and not 0 <= layer < state.config.n_layers:
            raise UsageError(f"layer {layer} out of range [0, {state.config.n_layers}) or 'final'")
        fam = geo.SoftmaxFamily(state.embedding)
        concept = st.build_concept(fam, state, st.CONCEPTS[args.concept](seed=spec.seed), layer)
        corpus = ex.build_corpus(spec)
        contexts = sample_contexts(corpus, corpus.steer_pool, args.contexts, state.config.context_length, spec.seed)
        lams = ex._last_lams(state, contexts)[layer]
        vals = [st.cosine_diagnostic(fam, lam, concept.v, inverse=args.inverse) for lam in lams]
        value = float(np.mean([c.value for c in vals]))
        degenerate, n = sum(c.degenerate for c in vals), len(vals)
    flag = f" (degenerate in {int(degenerate)} of {n})" if degenerate else ""
    print(f"cosine = {value:.6f}{flag}")
    print(f"verdict: {st.verdict(value)}")
    return []


COMMANDS = {
    "train": (cmd_train, "train the requested variant(s) and save checkpoints"),
    "hessian": (cmd_hessian, "measure Hessian spectra per variant and layer"),
    "steer": (cmd_steer, "paired Euclidean and dual steering plus the cosine diagnostic"),
    "tasks": (cmd_tasks, "residual steering sweeps on synthetic tasks"),
    "diagnose": (cmd_diagnose, "one cosine diagnostic and its verdict"),
    "report": (cmd_report, "render tables, figures and the manifest from raw records"),
    "run-all": (cmd_run_all, "train, hessian, steer, tasks and report in sequence"),
}


def _variant(name: str) -> str:
    if name != "all" and name not in VARIANTS:
        raise argparse.ArgumentTypeError(f"invalid variant {name!r}; valid: all, {', '.join(VARIANTS)}")
    return name


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Append the default only where the help text does not already state it."""

    def _get_help_string(self, action):
        if "default" in (action.help or ""):
            return action.help
        return super()._get_help_string(action)


def build_parser() -> argparse.ArgumentParser:
    fmt = _HelpFormatter
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("common")
    g.add_argument("--seed", type=int, default=None, help="master seed (default: preset or config value, 0)")
    g.add_argument("--out", default=None, help=f"output directory (default: ${ENV_OUT} or ./bregman_lens_out)")
    g.add_argument("--config", default=None, help="INI configuration file")
    g.add_argument("--preset", choices=sorted(ex.PRESETS), default=None, help="base settings (default: toy)")
    g.add_argument("--threads", type=int, default=None, help="worker processes across variants (default: 1)")
    g.add_argument("--variant", type=_variant, default="all", help="variant name or 'all'")
    g.add_argument("-v", "--verbose", action="store_true", default=False, help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="bregman-lens", description=__doc__.split("\n\n")[0], formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    subs = {}
    for name, (_, help_) in COMMANDS.items():
        subs[name] = sub.add_parser(name, parents=[common], help=help_, description=help_, formatter_class=fmt)

    for name in ("train", "run-all"):
        p = subs[name]
        p.add_argument("--steps", type=int, default=None, help="optimizer steps (default: preset)")
        p.add_argument("--corpus", default=None, help="training text file (default: synthetic corpus)")
    for name in ("hessian", "steer", "tasks", "diagnose"):
        subs[name].add_argument("--corpus", default=None, help="corpus file used at training time")
    for name in ("hessian", "run-all"):
        p = subs[name]
        p.add_argument("--n-batches", type=int, default=None, help="context batches (default: 30)")
        p.add_argument("--batch-size", type=int, default=None, help="contexts per batch (default: 16)")
        p.add_argument("--top-k", type=int, default=None, help="renormalize over the k most likely tokens")
    for name in ("steer", "run-all"):
        p = subs[name]
        p.add_argument("--method", choices=st.METHODS[1:], default=None, help="dual variant (default: dual)")
        p.add_argument("--n-contexts", type=int, default=None, help="steering contexts per layer (default: 10)")
        p.add_argument("--max-steps", type=int, default=None, help="steering step budget (default: 400)")
        p.add_argument("--concept", choices=sorted(st.CONCEPTS), default=None, help="concept (default: capitalization)")
    for name in ("tasks", "run-all"):
        subs[name].add_argument("--n-examples", type=int, default=None, help="examples per task (default: 24)")

    d = subs["diagnose"]
    d.add_argument("--checkpoint", default=None, help="checkpoint file (default: <out>/checkpoints/<variant>.blns)")
    d.add_argument("--layer", default="final", help="layer index or 'final'")
    d.add_argument("--concept", choices=sorted(st.CONCEPTS), default="capitalization", help="concept")
    d.add_argument("--contexts", type=int, default=10, help="held-out contexts averaged")
    d.add_argument("--inverse", action="store_true", default=False, help="use the damped H^-1 v instead of H v")
    d.add_argument("--synthetic", choices=("isotropic", "crushed"), default=None,
                   help="closed-form check instead of a checkpoint")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    fn, _ = COMMANDS[args.command]
    stage = "config"
    try:
        if args.command == "diagnose" and args.variant == "all":
            args.variant = "single_control"
        spec = build_spec(args)
        out = out_dir(args)
        stage = args.command
        paths = fn(spec, out, args)
    except UsageError as exc:
        parser.error(f"{args.command}: {exc}")
    except BregmanLensError as exc:
        print(f"error [{stage}]: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error [{stage}]: {exc}", file=sys.stderr)
        return 1
    for p in paths:
        print(p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
