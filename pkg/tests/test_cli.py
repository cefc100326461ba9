import re

import pytest

from bregman_lens import checkpoint as ckpt
from bregman_lens import cli
from bregman_lens import steering as st
from bregman_lens.model import VARIANTS

SMOKE = ["--preset", "smoke"]


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.mark.parametrize("command", list(cli.COMMANDS))
def test_help_lists_common_flags_with_defaults(command, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main([command, "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    for flag in ("--seed", "--out", "--config", "--threads"):
        assert flag in text
    body = text[text.index("options:"):]
    for option in re.findall(r"^  (--[a-z-]+)", body, flags=re.M):
        if option not in ("--help", "--verbose"):
            block = body.split("  " + option, 1)[1].split("\n  -", 1)[0]
            assert "default" in block, option


def test_train_single_variant_on_sample_corpus(tmp_path, capsys):
    code, out, _ = run(capsys, "train", "--variant", "single_control", "--steps", "10", "--corpus", "sample",
                       "--out", str(tmp_path), *SMOKE)
    assert code == 0
    assert (tmp_path / "checkpoints" / "single_control.blns").is_file()
    lines = (tmp_path / "checkpoints" / "single_control_loss.csv").read_text().splitlines()
    assert len(lines) == 1 + 10
    assert str(tmp_path / "checkpoints" / "single_control.blns") in out


def test_train_all_equal_parameter_counts(tmp_path, capsys):
    code, _, _ = run(capsys, "train", "--steps", "2", "--out", str(tmp_path), *SMOKE)
    assert code == 0
    counts = {ckpt.load(tmp_path / "checkpoints" / f"{v}.blns").n_params() for v in VARIANTS}
    assert len(counts) == 1


def test_invalid_variant_lists_valid_names(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--variant", "triple_aux"])
    assert exc.value.code == 2
    err = capsys.readouterr().err
    for v in VARIANTS:
        assert v in err


def test_hessian_before_train_names_missing_checkpoint(tmp_path, capsys):
    code, _, err = run(capsys, "hessian", "--out", str(tmp_path), *SMOKE)
    assert code != 0
    assert "[hessian]" in err and str(tmp_path / "checkpoints") in err and ".blns" in err


def test_report_without_records_fails(tmp_path, capsys):
    code, _, err = run(capsys, "report", "--out", str(tmp_path), *SMOKE)
    assert code != 0 and "[report]" in err


def test_env_var_sets_default_output(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv(cli.ENV_OUT, str(tmp_path / "envout"))
    code, _, _ = run(capsys, "train", "--variant", "single_aux", "--steps", "1", *SMOKE)
    assert code == 0
    assert (tmp_path / "envout" / "checkpoints" / "single_aux.blns").is_file()


def test_run_all_then_report_is_idempotent(tmp_path, capsys):
    code, out, _ = run(capsys, "run-all", "--out", str(tmp_path), *SMOKE)
    assert code == 0
    assert "table1_effective_rank.csv" in out and "manifest.json" in out
    before = (tmp_path / "tables" / "table3_kl_advantage.csv").read_bytes()
    code, out, _ = run(capsys, "report", "--out", str(tmp_path), *SMOKE)
    assert code == 0
    assert (tmp_path / "tables" / "table3_kl_advantage.csv").read_bytes() == before
    assert not list(tmp_path.rglob("*.tmp*"))
    # diagnose against the trained checkpoint
    code, out, _ = run(capsys, "diagnose", "--out", str(tmp_path), "--layer", "1", *SMOKE)
    assert code == 0
    value = float(re.search(r"cosine = (\S+)", out).group(1))
    assert f"verdict: {st.verdict(value)}" in out
    with pytest.raises(SystemExit) as exc:
        cli.main(["diagnose", "--out", str(tmp_path), "--layer", "7", *SMOKE])
    assert exc.value.code == 2 and "out of range" in capsys.readouterr().err


def test_config_file_layering(tmp_path, capsys):
    cfg = tmp_path / "run.ini"
    cfg.write_text("[run]\npreset = smoke\nseed = 3\n\n[train]\nsteps = 4\n\n[model]\nn_layers = 3\n")
    args = cli.build_parser().parse_args(["train", "--config", str(cfg), "--steps", "2"])
    spec = cli.build_spec(args)
    assert spec.plan.steps == 2  # flag beats file
    assert spec.base.n_layers == 3 and spec.seed == 3 and spec.base.seed == 3 and spec.plan.seed == 3
    args = cli.build_parser().parse_args(["train", "--config", str(cfg), "--seed", "9"])
    assert cli.build_spec(args).plan.seed == 9


@pytest.mark.parametrize("text, match", [
    ("[model]\nn_layerz = 3\n", "n_layerz"),
    ("[training]\nsteps = 3\n", "training"),
    ("[run]\ncolour = red\n", "colour"),
    ("[train]\nsteps = many\n", "train.steps"),
    ("[model]\nn_layers = 1\n", "n_layers"),
])
def test_config_errors_name_the_key(tmp_path, capsys, text, match):
    cfg = tmp_path / "bad.ini"
    cfg.write_text(text)
    code, _, err = run(capsys, "train", "--config", str(cfg), "--out", str(tmp_path))
    assert code != 0 and match in err and "[config]" in err
    assert not (tmp_path / "checkpoints").exists()


def test_config_tuple_and_optional_values(tmp_path):
    cfg = tmp_path / "t.ini"
    cfg.write_text("[run]\npreset = smoke\nvariants = single_control, cascade_control\n"
                   "[phase1]\ntop_k = none\n[phase2]\nstep_sizes = 0.5, 1.0\nreference_step = 1.0\n")
    spec = cli.build_spec(cli.build_parser().parse_args(["hessian", "--config", str(cfg)]))
    assert spec.variants == ("single_control", "cascade_control")
    assert spec.phase1.top_k is None and spec.phase2.step_sizes == (0.5, 1.0)


def test_diagnose_synthetic_cases(capsys):
    code, out, _ = run(capsys, "diagnose", "--synthetic", "isotropic")
    assert code == 0 and "cosine = 1.000000" in out and "verdict: sound" in out
    code, out, _ = run(capsys, "diagnose", "--synthetic", "crushed")
    assert code == 0 and "cosine = 0.000000" in out and "degenerate" in out and "verdict: unreliable" in out


def test_verdict_boundaries():
    assert st.verdict(0.3 - 1e-12) == "unreliable"
    assert st.verdict(0.3) == "caution"
    assert st.verdict(0.4) == "caution"
    assert st.verdict(0.4 + 1e-12) == "sound"
