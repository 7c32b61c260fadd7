"""Command-line verbs, exit codes and artifact formats."""

import json

import numpy as np
import pytest

from prflow.cli import (
    EXIT_CHECKPOINT,
    EXIT_CONFIG,
    EXIT_IO,
    EXIT_NUMERIC,
    EXIT_OK,
    EXIT_VERIFY,
    SWEEP,
    main,
    read_run_metadata,
)
from prflow.data import read_samples_csv
from prflow.evaluation import PRCurve, auc
from prflow.models import load_checkpoint

# small enough to train in a second or two, fitted enough for exact curves
TINY = """
objective = mle
epochs = 2
warm_start = 2
disc_pretrain = 20
n_data = 2000
batch = 256
flow_layers = 2
flow_width = 16
disc_width = 16
disc_depth = 1
f = kl
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY)
    return path


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = root / "tiny.ini"
    cfg.write_text(TINY.replace("epochs = 2", "epochs = 40"))
    assert main(["train", "--config", str(cfg), "--out", str(root / "out")]) == EXIT_OK
    return root / "out"


def test_train_writes_artifacts(trained_run):
    for name in ("checkpoint.bin", "report.csv", "metadata.json", "config.ini"):
        assert (trained_run / name).exists()
    assert (trained_run / "report.csv").read_text().startswith("epoch,L_d,L_p,eps_hat,seconds")
    meta, cfg = read_run_metadata(trained_run / "metadata.json")
    assert not meta["aborted"] and meta["last_epoch"] == 39
    assert cfg.epochs == 40 and cfg.f == "kl"
    assert load_checkpoint(trained_run / "checkpoint.bin")


def test_malformed_config_exits_2_without_artifacts(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("epochs = lots\n")
    out = tmp_path / "out"
    assert main(["train", "--config", str(bad), "--out", str(out)]) == EXIT_CONFIG
    assert not out.exists()
    assert "config error" in capsys.readouterr().err


@pytest.mark.parametrize("text", ["no equals sign here\n", "colour = blue\n", "objective = gan\n", "lam = -1\n"])
def test_bad_config_contents(tmp_path, text):
    bad = tmp_path / "bad.ini"
    bad.write_text(text)
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert not (tmp_path / "o").exists()


def test_missing_config_exits_2(tmp_path):
    assert main(["train", "--config", str(tmp_path / "nope.ini"), "--out", str(tmp_path / "o")]) == EXIT_CONFIG


@pytest.mark.parametrize("argv", [["frobnicate"], ["train", "--bogus"], ["verify", "--cases", "x"], []])
def test_usage_errors_exit_2(argv, capsys):
    assert main(argv) == EXIT_CONFIG
    assert "usage" in capsys.readouterr().err


def test_existing_output_needs_force(tmp_path, tiny_config):
    out = tmp_path / "o"
    assert main(["train", "--config", str(tiny_config), "--out", str(out)]) == EXIT_OK
    assert main(["train", "--config", str(tiny_config), "--out", str(out)]) == EXIT_IO
    assert main(["train", "--config", str(tiny_config), "--out", str(out), "--force"]) == EXIT_OK


def test_unwritable_output_exits_3(tmp_path, tiny_config):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["train", "--config", str(tiny_config), "--out", str(blocker / "sub")]) == EXIT_IO


def test_metadata_identical_except_wall_clock(tmp_path, tiny_config):
    metas, reports = [], []
    for name in ("a", "b"):
        assert main(["train", "--config", str(tiny_config), "--out", str(tmp_path / name), "--seed", "3"]) == EXIT_OK
        meta = json.loads((tmp_path / name / "metadata.json").read_text())
        assert meta.pop("wall_clock_seconds") >= 0
        metas.append(meta)
        rows = [r.split(",")[:4] for r in (tmp_path / name / "report.csv").read_text().splitlines()]
        reports.append(rows)
    assert metas[0] == metas[1]
    assert metas[0]["seed"] == 3
    assert reports[0] == reports[1]
    a = (tmp_path / "a" / "checkpoint.bin").read_bytes()
    assert a == (tmp_path / "b" / "checkpoint.bin").read_bytes()


def test_metadata_round_trips(trained_run):
    meta, cfg = read_run_metadata(trained_run / "metadata.json")
    assert cfg.to_text() == (trained_run / "config.ini").read_text()
    from prflow.cli import config_hash

    assert meta["config_hash"] == config_hash(cfg)


def test_numeric_abort_flags_metadata(tmp_path):
    cfg = tmp_path / "boom.ini"
    cfg.write_text(TINY.replace("epochs = 2", "epochs = 5") + "lr_mle = 1e8\n")
    out = tmp_path / "o"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == EXIT_NUMERIC
    meta = json.loads((out / "metadata.json").read_text())
    assert meta["aborted"] is True
    assert "epoch" in meta["abort_reason"]
    assert meta["last_epoch"] < 1
    # the rolled-back parameters are still written and finite
    values = load_checkpoint(out / "checkpoint.bin")
    assert all(np.all(np.isfinite(v)) for v in values.values())


def test_verify_passes_and_writes_report(tmp_path, capsys):
    out = tmp_path / "verify"
    assert main(["verify", "--cases", "1000", "--seed", "7", "--out", str(out)]) == EXIT_OK
    csv_lines = (out / "report.csv").read_text().splitlines()
    assert csv_lines[0] == "check,max_error,tolerance,pass"
    assert all(line.endswith(",true") for line in csv_lines[1:])
    assert (out / "report.txt").read_text() == capsys.readouterr().out


def test_verify_exit_code_tracks_failures(monkeypatch):
    from prflow import cli
    from prflow.evaluation import CheckResult, TheoremReport

    failing = TheoremReport([CheckResult("fake", 1.0, 0.1)])
    monkeypatch.setattr(cli, "verify_theorems", lambda n, seed: failing)
    assert main(["verify", "--cases", "1"]) == EXIT_VERIFY


def test_verify_zero_cases():
    assert main(["verify", "--cases", "0"]) == EXIT_OK


def test_eval_pr_exact_and_auc(trained_run, tmp_path, capsys):
    out = tmp_path / "curve.csv"
    assert main(["eval-pr", "--checkpoint", str(trained_run), "--out", str(out)]) == EXIT_OK
    printed = capsys.readouterr().out
    curve = PRCurve.from_csv(out.read_text())
    assert len(curve.lambdas) == 64
    assert np.all(np.diff(curve.alphas) >= 0)
    assert main(["auc", str(out)]) == EXIT_OK
    value = float(capsys.readouterr().out)
    assert value == pytest.approx(auc(curve), rel=1e-9)
    assert printed.strip() == f"auc {value:.6f}"
    assert 0 < value <= 1


def test_eval_pr_estimated_trains_disc_for_mle_run(trained_run, tmp_path):
    out = tmp_path / "est.csv"
    argv = ["eval-pr", "--checkpoint", str(trained_run / "checkpoint.bin"), "--method", "estimated",
            "--n-samples", "2000", "--out", str(out)]
    assert main(argv) == EXIT_OK
    curve = PRCurve.from_csv(out.read_text())
    np.testing.assert_array_equal(curve.betas, curve.alphas / curve.lambdas)


def test_eval_pr_bad_checkpoint(tmp_path):
    run = tmp_path / "run"
    run.mkdir()
    (run / "checkpoint.bin").write_bytes(b"NOTAFLOW")
    assert main(["eval-pr", "--checkpoint", str(run), "--out", str(tmp_path / "c.csv")]) == EXIT_CHECKPOINT
    assert main(["eval-pr", "--checkpoint", str(tmp_path / "none"), "--out", str(tmp_path / "d.csv")]) == EXIT_IO


def test_auc_verb_errors(tmp_path):
    assert main(["auc", str(tmp_path / "missing.csv")]) == EXIT_IO
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1,2\n")
    assert main(["auc", str(bad)]) == EXIT_CONFIG


def test_sample_verb(trained_run, tmp_path):
    out = tmp_path / "s.csv"
    assert main(["sample", "--checkpoint", str(trained_run), "-n", "50", "--seed", "2", "--out", str(out)]) == EXIT_OK
    assert out.read_text().splitlines()[0] == "x0,x1"
    x, labels = read_samples_csv(out)
    assert labels is None
    assert x.shape == (50, 2) and np.all(np.isfinite(x))
    again = tmp_path / "t.csv"
    main(["sample", "--checkpoint", str(trained_run), "-n", "50", "--seed", "2", "--out", str(again)])
    assert out.read_text() == again.read_text()
    assert main(["sample", "--checkpoint", str(trained_run), "-n", "0", "--out", str(tmp_path / "u.csv")]) == EXIT_CONFIG


def test_gap_experiment_verb(tmp_path, capsys):
    out = tmp_path / "gap.csv"
    assert main(["gap-experiment", "--instances", "2", "--seed", "1", "--out", str(out)]) == EXIT_OK
    lines = out.read_text().splitlines()
    assert lines[0] == "instance,f_kind,dual_gap,primal_error,bound"
    assert len(lines) == 1 + 2 * 2
    summary = json.loads(out.with_suffix(".summary.json").read_text())
    assert set(summary) == {"chi2", "kl"}
    assert "median dual gap" in capsys.readouterr().out


def test_sweep_then_eval_pr_pipeline(tmp_path):
    cfg = tmp_path / "tiny.ini"
    cfg.write_text(TINY.replace("warm_start = 2", "warm_start = 40"))
    out = tmp_path / "sweep"
    assert main(["sweep", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    assert sorted(p.name for p in out.iterdir()) == sorted(SWEEP)
    aucs = {}
    for name, overrides in SWEEP.items():
        _, run_cfg = read_run_metadata(out / name / "metadata.json")
        assert run_cfg.objective == overrides["objective"]
        csv_path = tmp_path / f"{name}.csv"
        assert main(["eval-pr", "--checkpoint", str(out / name), "--out", str(csv_path)]) == EXIT_OK
        curve = PRCurve.from_csv(csv_path.read_text())
        assert curve.to_csv().splitlines()[0] == "lambda,alpha,beta"
        aucs[name] = auc(curve)
    assert len(aucs) == 6
    assert all(0 < v <= 1 for v in aucs.values())
