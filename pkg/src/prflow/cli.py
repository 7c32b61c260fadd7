"""Command-line front end: ``prflow <verb> [options]``.

Verbs
-----
train           train one model from a config file
sweep           PR(0.1), PR(1), PR(10), KL, rKL and AUC models in sibling directories
eval-pr         PR curve of a checkpoint (exact quadrature or discriminator estimate)
auc             area under a PR curve CSV
verify          the exact-identity theorem suite on random discrete instances
gap-experiment  dual gap vs primal error over random mixture pairs
sample          draw samples from a checkpoint

Exit codes
----------
0  success
1  verification failed (``verify`` found a failing check)
2  usage or config error (unknown flag, malformed or missing config)
3  I/O error (unwritable output, output exists without ``--force``, missing input)
4  numeric abort (training hit NaN or a diverging loss; the flow's mass
   escapes the exact-curve quadrature box)
5  checkpoint format or version mismatch
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .data import make_rng, write_samples_csv
from .evaluation import (
    MassDeficitError,
    PRCurve,
    auc,
    bregman_gap_experiment,
    default_lambda_grid,
    grid_quadrature,
    pr_curve_estimated,
    pr_curve_exact,
    verify_theorems,
)
from .models import (
    CheckpointError,
    checkpoint_parameters,
    load_checkpoint,
    models_from_checkpoint,
    save_checkpoint,
)
from .trainer import (
    DEFAULT_TAU,
    ConfigError,
    TrainConfig,
    TrainingAborted,
    build_models,
    make_dataset,
    pretrain_discriminator,
    train,
)

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_CHECKPOINT = 5

log = logging.getLogger("prflow")

# defaults that are conventions of this implementation rather than derived
DESIGN_DEFAULTS = {
    "eight_gaussians": "8 components, radius 2, std 0.1, equal weights",
    "flow": "affine couplings, alternating masks, tanh conditioner, zero-init last layer",
    "scale_clamp": "s = c tanh(s_raw / c)",
    "discriminator": "tanh MLP; anchored score h(x) + log q_anchor(x) - log q(x)",
    "generator_update": "critic: per-sample weight -r g''(r) on the ratio gradient",
    "pr_kink_tau": DEFAULT_TAU,
    "lambda_grid": "64 theta-midpoints, lambda = tan(theta)",
    "quadrature": "uniform 512x512 grid, data box padded by 5 std",
    "rng": "numpy Philox keyed by SeedSequence([seed, *stream])",
    "checkpoint": "PRFLOW1 binary, little-endian u64 headers and f8 values",
}

SWEEP = {
    "pr_0.1": {"objective": "adversarial", "g": "pr", "lam": 0.1},
    "pr_1": {"objective": "adversarial", "g": "pr", "lam": 1.0},
    "pr_10": {"objective": "adversarial", "g": "pr", "lam": 10.0},
    "kl": {"objective": "mle", "g": "kl", "lam": None},
    "rkl": {"objective": "adversarial", "g": "rkl", "lam": None},
    "auc": {"objective": "auc", "g": "pr", "lam": None},
}


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError(f"{self.prog}: error: {message}", EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="prflow", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"prflow {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    def common(p, out_help):
        p.add_argument("--out", required=True, type=Path, help=out_help)
        p.add_argument("--force", action="store_true", help="overwrite existing output")

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--config", type=Path, help="run config (key = value lines)")
    p.add_argument("--seed", type=int)
    common(p, "run directory")

    p = sub.add_parser("sweep", help="train the PR / KL / rKL / AUC ensemble")
    p.add_argument("--config", type=Path, help="base config shared by every run")
    p.add_argument("--seed", type=int)
    common(p, "parent directory for the run directories")

    p = sub.add_parser("eval-pr", help="PR curve of a checkpoint")
    p.add_argument("--checkpoint", required=True, type=Path, help="run directory or checkpoint file")
    p.add_argument("--method", choices=("exact", "estimated"), default="exact")
    p.add_argument("--n-samples", type=int, default=20_000, help="fake samples for the estimate")
    p.add_argument(
        "--retrain-disc", action="store_true", help="retrain the discriminator against the final flow first"
    )
    p.add_argument("--seed", type=int, default=0)
    common(p, "curve CSV path")

    p = sub.add_parser("auc", help="area under a PR curve CSV")
    p.add_argument("curve", type=Path)

    p = sub.add_parser("verify", help="theorem suite on random discrete instances")
    p.add_argument("--cases", type=int, default=1000)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", type=Path, help="directory for report.txt and report.csv")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("gap-experiment", help="dual gap vs primal error over mixture pairs")
    p.add_argument("--instances", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lambda", dest="lam", type=float, default=1.0, help="PR(lambda) for the primal error")
    common(p, "GapReport CSV path")

    p = sub.add_parser("sample", help="draw samples from a checkpoint")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("-n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    common(p, "sample CSV path")
    return parser


def _load_config(path, seed=None, **overrides) -> TrainConfig:
    text = ""
    if path is not None:
        try:
            text = Path(path).read_text()
        except FileNotFoundError:
            raise CliError(f"config not found: {path}", EXIT_CONFIG) from None
        except OSError as exc:
            raise CliError(f"cannot read config {path}: {exc}", EXIT_CONFIG) from None
    try:
        cfg = TrainConfig.from_text(text)
        if seed is not None:
            overrides["seed"] = seed
        return dataclasses.replace(cfg, **overrides) if overrides else cfg
    except ConfigError as exc:
        raise CliError(f"config error: {exc}", EXIT_CONFIG) from None


def _claim_output(path: Path, force: bool, is_dir: bool) -> None:
    """Refuse to clobber existing output unless ``force``; make parent dirs."""
    if path.exists() and not force:
        if not is_dir or any(path.iterdir()):
            raise CliError(f"{path} exists (use --force to overwrite)", EXIT_IO)
    try:
        target = path if is_dir else path.parent
        target.mkdir(parents=True, exist_ok=True)
        probe = target / ".prflow-write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise CliError(f"cannot write to {path}: {exc}", EXIT_IO) from None


def _write(path: Path, text: str) -> None:
    try:
        path.write_text(text)
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc}", EXIT_IO) from None


def config_hash(cfg: TrainConfig) -> str:
    return hashlib.sha256(cfg.to_text().encode()).hexdigest()


def emit_run_metadata(run_dir, cfg: TrainConfig, wall_clock: float, aborted=False, reason="", last_epoch=None) -> Path:
    """Write ``metadata.json`` next to a run's artifacts."""
    meta = {
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "version": __version__,
        "wall_clock_seconds": round(wall_clock, 3),
        "aborted": bool(aborted),
        "abort_reason": reason,
        "last_epoch": last_epoch,
        "config": dataclasses.asdict(cfg),
        "design_defaults": DESIGN_DEFAULTS,
    }
    path = Path(run_dir) / "metadata.json"
    _write(path, json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def read_run_metadata(path) -> tuple[dict, TrainConfig]:
    """Parse ``metadata.json``; returns the raw dict and the rebuilt config."""
    meta = json.loads(Path(path).read_text())
    return meta, TrainConfig(**meta["config"])


def _save(ckpt: Path, flow, disc) -> None:
    try:
        save_checkpoint(ckpt, checkpoint_parameters(flow, disc))
    except OSError as exc:
        raise CliError(f"cannot write {ckpt}: {exc}", EXIT_IO) from None


def _run_one(cfg: TrainConfig, run_dir: Path, data=None, prep_cache=None) -> int:
    dataset, target = make_dataset(cfg) if data is None else data
    _write(run_dir / "config.ini", cfg.to_text())
    t0 = time.perf_counter()
    ckpt = run_dir / "checkpoint.bin"
    try:
        flow, disc, report = train(cfg, dataset, target, prep_cache=prep_cache)
    except TrainingAborted as exc:
        if exc.models is not None:
            _save(ckpt, *exc.models)
            exc.report.checkpoint = str(ckpt)
        _write(run_dir / "report.csv", exc.report.to_csv())
        emit_run_metadata(
            run_dir, cfg, time.perf_counter() - t0, True, exc.report.abort_reason, exc.report.last_epoch
        )
        log.error("%s", exc)
        return EXIT_NUMERIC
    _save(ckpt, flow, disc)
    report.checkpoint = str(ckpt)
    _write(run_dir / "report.csv", report.to_csv())
    emit_run_metadata(run_dir, cfg, time.perf_counter() - t0, last_epoch=report.last_epoch)
    log.info("wrote %s", run_dir)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args.config, args.seed)
    _claim_output(args.out, args.force, is_dir=True)
    return _run_one(cfg, args.out)


def cmd_sweep(args) -> int:
    base = _load_config(args.config, args.seed)
    _claim_output(args.out, args.force, is_dir=True)
    worst = EXIT_OK
    # one dataset and warm start shared by every adversarial run of the sweep
    data, prep_cache = make_dataset(base), {}
    for name, overrides in SWEEP.items():
        if overrides["objective"] == "mle":
            # the same number of epochs as a warm-started adversarial run
            overrides = {**overrides, "epochs": base.warm_start + base.epochs}
        try:
            cfg = dataclasses.replace(base, **overrides)
        except ConfigError as exc:
            raise CliError(f"config error in {name}: {exc}", EXIT_CONFIG) from None
        run_dir = args.out / name
        run_dir.mkdir(exist_ok=True)
        log.info("sweep: %s", name)
        worst = max(worst, _run_one(cfg, run_dir, data, prep_cache))
    return worst


def _load_run(path: Path):
    """``(cfg, values)`` from a run directory or a checkpoint inside one."""
    ckpt = path / "checkpoint.bin" if path.is_dir() else path
    cfg_path = ckpt.parent / "config.ini"
    cfg = _load_config(cfg_path if cfg_path.exists() else None)
    try:
        values = load_checkpoint(ckpt)
    except FileNotFoundError:
        raise CliError(f"checkpoint not found: {ckpt}", EXIT_IO) from None
    except CheckpointError as exc:
        raise CliError(f"bad checkpoint {ckpt}: {exc}", EXIT_CHECKPOINT) from None
    return cfg, values


def quadrature_axes(target, n=512, pad=5.0):
    """Uniform grid over the target's bounding box padded by ``pad`` std."""
    lo = (target.means - pad * target.stds[:, None]).min(axis=0)
    hi = (target.means + pad * target.stds[:, None]).max(axis=0)
    return [np.linspace(a, b, n) for a, b in zip(lo, hi)]


def exact_curve(flow, target, lambdas=None, n=512, max_deficit=1e-3) -> PRCurve:
    lambdas = default_lambda_grid() if lambdas is None else lambdas
    return pr_curve_exact(
        target.pdf,
        lambda x: np.exp(flow.log_density(x)),
        lambdas,
        quadrature_axes(target, n),
        max_deficit=max_deficit,
    )


def estimated_curve(flow, disc, dataset, cfg, n_samples, seed, lambdas=None, retrain=False) -> PRCurve:
    """Estimate from the discriminator's ratio on fresh flow samples.

    With ``retrain`` the discriminator is first re-anchored on the final flow
    and trained against it for ``cfg.disc_pretrain`` steps.
    """
    if disc is None:
        raise ValueError("an estimated curve needs a discriminator")
    if retrain:
        if cfg.anchor:
            disc.flow, disc.anchor = flow, flow.copy()
        pretrain_discriminator(disc, flow, dataset, cfg, cfg.disc_pretrain, make_rng(seed, 400))
    fake = flow.sample(n_samples, make_rng(seed, 401))
    lambdas = default_lambda_grid() if lambdas is None else lambdas
    return pr_curve_estimated(disc, disc.f, fake, lambdas)


def cmd_eval_pr(args) -> int:
    _claim_output(args.out, args.force, is_dir=False)
    cfg, values = _load_run(args.checkpoint)
    try:
        flow, disc = models_from_checkpoint(values, cfg.f, cfg.scale_clamp)
    except CheckpointError as exc:
        raise CliError(f"bad checkpoint: {exc}", EXIT_CHECKPOINT) from None
    dataset, target = make_dataset(cfg)
    if args.method == "exact":
        try:
            curve = exact_curve(flow, target)
        except MassDeficitError as exc:
            raise CliError(f"exact curve unavailable: {exc}", EXIT_NUMERIC) from None
    else:
        retrain = args.retrain_disc
        if disc is None:
            # MLE runs carry no discriminator; train one from the config
            _, disc = build_models(dataclasses.replace(cfg, objective="adversarial"), flow.dim)
            retrain = True
        curve = estimated_curve(flow, disc, dataset, cfg, args.n_samples, args.seed, retrain=retrain)
    _write(args.out, curve.to_csv())
    print(f"auc {auc(curve):.6f}")
    return EXIT_OK


def cmd_auc(args) -> int:
    try:
        curve = PRCurve.from_csv(args.curve.read_text())
    except FileNotFoundError:
        raise CliError(f"curve not found: {args.curve}", EXIT_IO) from None
    except ValueError as exc:
        raise CliError(f"bad curve file: {exc}", EXIT_CONFIG) from None
    try:
        print(f"{auc(curve):.10g}")
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None
    return EXIT_OK


def cmd_verify(args) -> int:
    if args.out is not None:
        _claim_output(args.out, args.force, is_dir=True)
    report = verify_theorems(args.cases, args.seed)
    text = report.to_text()
    print(text, end="")
    if args.out is not None:
        _write(args.out / "report.txt", text)
        _write(args.out / "report.csv", report.to_csv())
    return EXIT_OK if report.passed else EXIT_VERIFY


def cmd_gap_experiment(args) -> int:
    _claim_output(args.out, args.force, is_dir=False)
    report = bregman_gap_experiment(n_instances=args.instances, seed=args.seed, lam=args.lam)
    _write(args.out, report.to_csv())
    summary = report.summary()
    _write(args.out.with_suffix(".summary.json"), json.dumps(summary, indent=2, default=float) + "\n")
    for kind, stats in summary.items():
        print(f"{kind}: median dual gap {stats['median_dual_gap']:.4g}, "
              f"median primal error {stats['median_primal_error']:.4g}")
    return EXIT_OK


def cmd_sample(args) -> int:
    _claim_output(args.out, args.force, is_dir=False)
    cfg, values = _load_run(args.checkpoint)
    try:
        flow, _ = models_from_checkpoint(values, cfg.f, cfg.scale_clamp)
    except CheckpointError as exc:
        raise CliError(f"bad checkpoint: {exc}", EXIT_CHECKPOINT) from None
    if args.n < 1:
        raise CliError("-n must be positive", EXIT_CONFIG)
    x = flow.sample(args.n, make_rng(args.seed, 500))
    try:
        write_samples_csv(args.out, x)
    except OSError as exc:
        raise CliError(f"cannot write {args.out}: {exc}", EXIT_IO) from None
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "sweep": cmd_sweep,
    "eval-pr": cmd_eval_pr,
    "auc": cmd_auc,
    "verify": cmd_verify,
    "gap-experiment": cmd_gap_experiment,
    "sample": cmd_sample,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except CliError as exc:
        print(exc, file=sys.stderr)
        return exc.code
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.verb](args)
    except CliError as exc:
        print(f"prflow: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
