"""Training loops: maximum likelihood, dual/primal adversarial, and AUC.

The adversarial scheme trains two networks with different losses.  The
discriminator ascends the dual objective of a strictly convex ``f``; its
ratio estimate ``r = grad f*(T(x))`` is then plugged into the primal form of
a second divergence ``g`` which the flow descends.
"""

from __future__ import annotations

import configparser
import copy
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import DatasetHandle, MixtureDensity, eight_gaussians, make_rng
from .divergences import GeneratorFunction, Kind, make_generator
from .evaluation import auc_weights, default_lambda_grid
from .models import Discriminator, FlowModel, NumericalError

__all__ = [
    "ConfigError",
    "TrainConfig",
    "TrainReport",
    "TrainingAborted",
    "build_models",
    "discriminator_step",
    "generator_loss",
    "generator_step",
    "make_dataset",
    "prep_key",
    "prepare_adversarial",
    "pretrain_discriminator",
    "ratio_sensitivity",
    "train",
    "train_adversarial",
    "train_auc",
    "train_mle",
]

log = logging.getLogger(__name__)

OBJECTIVES = ("mle", "adversarial", "auc")
UPDATES = ("critic", "primal")
DATASETS = ("eight_gaussians",)
DEFAULT_TAU = 0.5


class ConfigError(ValueError):
    pass


class TrainingAborted(RuntimeError):
    """Training hit a NaN or diverging loss; parameters hold the last good epoch.

    ``models`` is the rolled-back ``(flow, disc)`` pair when raised by ``train``.
    """

    def __init__(self, message, report):
        super().__init__(message)
        self.report = report
        self.models = None


@dataclass
class TrainConfig:
    """Everything that determines a training run.

    ``warm_start`` counts MLE epochs run before adversarial training and
    ``disc_pretrain`` counts discriminator steps taken before the first flow
    step.  With ``lr_decay`` the flow's step size falls linearly from
    ``lr_flow`` to ``lr_flow / epochs`` over the adversarial epochs.
    ``dataset``/``n_data`` name the training data.
    """

    objective: str = "adversarial"
    f: str = "kl"
    g: str = "pr"
    lam: float | None = 1.0
    epochs: int = 30
    batch: int = 512
    lr_flow: float = 5e-4
    lr_disc: float = 1e-4
    lr_mle: float = 1e-3
    lr_disc_pretrain: float = 1e-3
    k_d: int = 1
    seed: int = 0
    tau: float | None = None
    warm_start: int = 100
    disc_pretrain: int = 10_000
    anchor: bool = True
    update: str = "critic"
    lr_decay: bool = True
    n_lambda: int = 64
    flow_layers: int = 6
    flow_width: int = 64
    scale_clamp: float = 5.0
    disc_width: int = 128
    disc_depth: int = 3
    dataset: str = "eight_gaussians"
    n_data: int = 20_000

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.k_d < 1:
            raise ConfigError("k_d must be at least 1")
        if self.epochs < 0 or self.warm_start < 0 or self.disc_pretrain < 0:
            raise ConfigError("epoch counts must be non-negative")
        if self.batch < 1:
            raise ConfigError("batch must be positive")
        for name in ("lr_flow", "lr_disc", "lr_mle", "lr_disc_pretrain", "scale_clamp"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.flow_layers < 1 or self.flow_width < 1 or self.disc_width < 1 or self.disc_depth < 1:
            raise ConfigError("layer counts and widths must be positive")
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset must be one of {DATASETS}, got {self.dataset!r}")
        if self.n_data < 1:
            raise ConfigError("n_data must be positive")
        if self.n_lambda < 2:
            raise ConfigError("n_lambda must be at least 2")
        if self.update not in UPDATES:
            raise ConfigError(f"update must be one of {UPDATES}, got {self.update!r}")
        if self.tau is not None and self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.objective != "mle":
            try:
                f = make_generator(self.f)
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
            if not f.strictly_convex:
                raise ConfigError(f"discriminator divergence {self.f!r} must be strictly convex")
        if self.objective == "adversarial":
            try:
                self.generator_divergence()
            except (ValueError, TypeError) as exc:
                raise ConfigError(str(exc)) from exc

    def discriminator_divergence(self) -> GeneratorFunction:
        return make_generator(self.f)

    def generator_divergence(self) -> GeneratorFunction:
        if str(self.g).lower() == "pr":
            return make_generator("pr", self.lam)
        return make_generator(self.g)

    def to_text(self) -> str:
        lines = []
        for k, v in dataclasses.asdict(self).items():
            lines.append(f"{k} = {'none' if v is None else v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        """Parse flat ``key = value`` lines (``#`` starts a comment)."""
        parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
        try:
            parser.read_string("[run]\n" + text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in parser["run"].items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(key, raw, types[key])
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        with open(path) as fh:
            return cls.from_text(fh.read())


def _coerce(key, raw: str, typ: str):
    raw = raw.strip()
    optional = "None" in typ
    if optional and raw.lower() in ("none", ""):
        return None
    try:
        if typ.startswith("bool"):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ.startswith("int"):
            return int(raw)
        if typ.startswith("float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


@dataclass
class TrainReport:
    """Per-epoch losses and timing; ``eps_hat`` is NaN when no target density is known."""

    epochs: list[dict] = field(default_factory=list)
    skipped_steps: int = 0
    aborted: bool = False
    abort_reason: str = ""
    checkpoint: str | None = None

    def log_epoch(self, epoch, l_d, l_p, eps_hat, seconds):
        self.epochs.append(
            {"epoch": epoch, "L_d": l_d, "L_p": l_p, "eps_hat": eps_hat, "seconds": seconds}
        )

    @property
    def last_epoch(self) -> int:
        """Index of the last completed epoch, -1 when none finished."""
        return self.epochs[-1]["epoch"] if self.epochs else -1

    def column(self, name) -> np.ndarray:
        return np.array([e[name] for e in self.epochs], dtype=np.float64)

    def to_csv(self) -> str:
        lines = ["epoch,L_d,L_p,eps_hat,seconds"]
        for e in self.epochs:
            lines.append(
                f"{e['epoch']},{e['L_d']!r},{e['L_p']!r},{e['eps_hat']!r},{e['seconds']:.3f}"
            )
        return "\n".join(lines) + "\n"


def generator_loss(r, g: GeneratorFunction | None, auc_lambdas=None) -> float:
    """Primal estimate ``mean g(r)`` on a ratio batch.

    With ``auc_lambdas`` the loss is minus the grid AUC of the estimated
    precision ``mean min(lam * r, 1)``.
    """
    r = np.asarray(r, dtype=np.float64)
    if auc_lambdas is not None:
        lam = np.asarray(auc_lambdas, dtype=np.float64)
        alpha = np.minimum(r[:, None] * lam[None, :], 1.0).mean(axis=0)
        return float(-np.sum(alpha * alpha * auc_weights(lam)))
    return float(np.mean(g.f(r)))


def _pr_curvature(r, lam, tau):
    """``r * f''(r)`` for PR(lam) with the kink smoothed over ``log(lam r)``.

    The derivative ``lam * 1[lam r > 1]`` is replaced by
    ``lam * sigmoid(log(lam r) / tau)``.
    """
    s = np.log(np.maximum(lam * r, 1e-300)) / tau
    sig = 0.5 * (1.0 + np.tanh(0.5 * s))
    return lam * sig * (1.0 - sig) / tau


def ratio_sensitivity(r, g: GeneratorFunction | None, tau=DEFAULT_TAU, auc_lambdas=None):
    """Per-sample ``d loss / d r`` for the critic update, before averaging.

    Moving a generated sample changes ``D_g`` at rate ``g(r) - r g'(r)``
    along its path, whose derivative in ``r`` is ``-r g''(r)``.
    """
    r = np.asarray(r, dtype=np.float64)
    if auc_lambdas is not None:
        lam = np.asarray(auc_lambdas, dtype=np.float64)
        alpha = np.minimum(r[:, None] * lam[None, :], 1.0).mean(axis=0)
        # d(-alpha^2) = 2 alpha dD^PR
        curv = _pr_curvature(r[:, None], lam[None, :], tau)
        return -(curv * (2.0 * alpha * auc_weights(lam))[None, :]).sum(axis=1)
    if g.kind is Kind.PR:
        return -_pr_curvature(r, g.lam, tau)
    return -r * g.fsecond(r)


def discriminator_step(disc: Discriminator, flow: FlowModel, real_batch, optimizer, rng) -> float:
    """One ascent step on the dual objective with the flow frozen."""
    fake = flow.sample(len(real_batch), rng)
    tape = ad.Tape()
    objective = disc.dual_objective(real_batch, fake, tape)
    tape.backward(-objective)
    optimizer.step()
    return float(objective.value)


def generator_step(
    flow: FlowModel,
    disc: Discriminator,
    noise_batch,
    g: GeneratorFunction | None,
    optimizer,
    tau=None,
    update="critic",
    auc_lambdas=None,
):
    """One flow step against the frozen discriminator.

    Returns ``(loss, skipped)`` where ``loss`` is the primal estimate
    ``mean g(r)`` before the step.

    ``update="primal"`` descends ``mean g(r(x))`` through the samples ``x``;
    a PR batch with every ``lam * r < 1`` then has zero gradient and is
    skipped.  ``update="critic"`` instead weights each sample's ratio
    gradient by :func:`ratio_sensitivity`, which follows ``D_g`` itself.
    """
    if update not in UPDATES:
        raise ValueError(f"update must be one of {UPDATES}, got {update!r}")
    z = np.asarray(noise_batch, dtype=np.float64)
    n = len(z)
    tape = ad.Tape()
    x, _ = flow.inverse(z, tape)
    r = disc.ratio(x, tape, frozen=True)
    loss = generator_loss(r.value, g, auc_lambdas)
    if update == "critic":
        seed = ratio_sensitivity(r.value, g, DEFAULT_TAU if tau is None else tau, auc_lambdas) / n
    else:
        if auc_lambdas is None and g.kind is Kind.PR and np.all(r.value * g.lam < 1.0):
            optimizer.zero_grad()
            return loss, True
        seed = _primal_seed(r.value, g, tau, auc_lambdas) / n
    tape.backward(r, seed=seed)
    optimizer.step()
    return loss, False


def _primal_seed(r, g, tau, auc_lambdas):
    """Per-sample ``d g(r) / d r``, the kink optionally smoothed by a softplus of width ``tau``."""
    if auc_lambdas is not None:
        lam = np.asarray(auc_lambdas, dtype=np.float64)
        alpha = np.minimum(r[:, None] * lam[None, :], 1.0).mean(axis=0)
        active = r[:, None] * lam[None, :] < 1.0
        return -(active * lam * (2.0 * alpha * auc_weights(lam))).sum(axis=1)
    if g.kind is Kind.PR and tau is not None:
        s = (g.lam * r - 1.0) / tau
        return g.lam * 0.5 * (1.0 + np.tanh(0.5 * s))
    return g.fprime(r)


def _snapshot(params):
    return [p.value.copy() for p in params]


def _restore(params, snap):
    for p, v in zip(params, snap):
        p.value[...] = v


def dual_gap_proxy(flow, disc, target: MixtureDensity | None, l_d, rng, n=4096) -> float:
    """``D_f(P || Q)`` by Monte Carlo with exact densities, minus the dual objective."""
    if target is None:
        return math.nan
    x = flow.sample(n, rng)
    ratio = np.exp(target.log_pdf(x) - flow.log_density(x))
    return float(np.mean(disc.f.f(ratio)) - l_d)


def _abort(report, params, snap, epoch, reason):
    _restore(params, snap)
    report.aborted = True
    report.abort_reason = f"{reason} at epoch {epoch}"
    return TrainingAborted(f"training aborted: {report.abort_reason}", report)


def _check_loss(value, report, params, snap, epoch):
    if not math.isfinite(value) or abs(value) > 1e6:
        raise _abort(report, params, snap, epoch, f"loss {value!r}")


def train_mle(flow: FlowModel, dataset: DatasetHandle, cfg: TrainConfig, epochs=None, report=None):
    """Maximise the mean log-likelihood of ``dataset`` under ``flow``."""
    epochs = cfg.epochs if epochs is None else epochs
    report = report if report is not None else TrainReport()
    params = flow.parameters()
    opt = ad.Adam(params, lr=cfg.lr_mle)
    for epoch in range(epochs):
        t0 = time.perf_counter()
        snap = _snapshot(params)
        total, count = 0.0, 0
        for batch in dataset.batches(epoch):
            tape = ad.Tape()
            try:
                nll = -ad.mean(flow.log_density(batch, tape))
                _check_loss(float(nll.value), report, params, snap, epoch)
                tape.backward(nll)
                opt.step()
            except (NumericalError, ad.NonFiniteGradientError) as exc:
                raise _abort(report, params, snap, epoch, str(exc)) from exc
            total += float(nll.value)
            count += 1
        report.log_epoch(epoch, math.nan, total / count, math.nan, time.perf_counter() - t0)
        log.debug("mle epoch %d: nll %.4f", epoch, total / count)
    return report


def _endless_batches(dataset, first_epoch):
    epoch = first_epoch
    while True:
        yield from dataset.batches(epoch)
        epoch += 1


def pretrain_discriminator(disc, flow, dataset, cfg, steps, rng):
    """``steps`` dual-ascent steps on a fixed flow; returns the last objective."""
    opt = ad.Adam(disc.parameters(), lr=cfg.lr_disc_pretrain)
    # epoch keys past the main run's, so the streams never overlap
    batches = _endless_batches(dataset, cfg.warm_start + cfg.epochs)
    obj = math.nan
    for _ in range(steps):
        obj = discriminator_step(disc, flow, next(batches), opt, rng)
    return obj


def prepare_adversarial(flow: FlowModel, disc: Discriminator, dataset: DatasetHandle, cfg: TrainConfig):
    """MLE warm start, anchoring and discriminator pretraining, in place.

    The result depends only on the data, the seed and the warm-start /
    pretraining fields of ``cfg``, so runs differing only in ``g`` or ``lam``
    can start from copies of one prepared pair (see ``train``).
    """
    if cfg.warm_start:
        train_mle(flow, dataset, cfg, epochs=cfg.warm_start)
    if cfg.anchor:
        disc.flow, disc.anchor = flow, flow.copy()
    params = flow.parameters() + disc.parameters()
    snap = _snapshot(params)
    try:
        pretrain_discriminator(disc, flow, dataset, cfg, cfg.disc_pretrain, make_rng(cfg.seed, 303))
    except (NumericalError, ad.NonFiniteGradientError) as exc:
        raise _abort(TrainReport(), params, snap, -1, str(exc)) from exc
    return flow, disc


def train_adversarial(
    flow: FlowModel,
    disc: Discriminator,
    dataset: DatasetHandle,
    cfg: TrainConfig,
    target: MixtureDensity | None = None,
    auc_lambdas=None,
    callback=None,
    prepared=False,
):
    """Warm start and pretraining (unless ``prepared``), then the alternating loop.

    Each epoch is one pass over ``dataset`` with a discriminator step per
    batch and a flow step every ``k_d`` batches.  With ``cfg.anchor`` the
    discriminator is re-anchored on a frozen copy of the flow taken after the
    warm start.  ``callback(epoch, flow, disc)`` runs after each epoch.
    """
    report = TrainReport()
    if not prepared:
        prepare_adversarial(flow, disc, dataset, cfg)
    g = None if auc_lambdas is not None else cfg.generator_divergence()
    fake_rng = make_rng(cfg.seed, 300)
    noise_rng = make_rng(cfg.seed, 301)
    eval_rng = make_rng(cfg.seed, 302)
    params = flow.parameters() + disc.parameters()
    disc_opt = ad.Adam(disc.parameters(), lr=cfg.lr_disc)
    flow_opt = ad.Adam(flow.parameters(), lr=cfg.lr_flow)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        if cfg.lr_decay:
            # linear decay lets the discriminator settle on the final flow
            flow_opt.lr = cfg.lr_flow * (cfg.epochs - epoch) / cfg.epochs
        snap = _snapshot(params)
        l_d, n_d, l_p, n_p = 0.0, 0, 0.0, 0
        try:
            for i, batch in enumerate(dataset.batches(cfg.warm_start + epoch)):
                obj = discriminator_step(disc, flow, batch, disc_opt, fake_rng)
                _check_loss(obj, report, params, snap, epoch)
                l_d += obj
                n_d += 1
                if (i + 1) % cfg.k_d == 0:
                    z = noise_rng.standard_normal((cfg.batch, flow.dim))
                    loss, skipped = generator_step(
                        flow, disc, z, g, flow_opt, cfg.tau, cfg.update, auc_lambdas
                    )
                    _check_loss(loss, report, params, snap, epoch)
                    report.skipped_steps += int(skipped)
                    l_p += loss
                    n_p += 1
        except (NumericalError, ad.NonFiniteGradientError) as exc:
            raise _abort(report, params, snap, epoch, str(exc)) from exc
        l_d /= max(n_d, 1)
        l_p = l_p / n_p if n_p else math.nan
        eps = dual_gap_proxy(flow, disc, target, l_d, eval_rng)
        report.log_epoch(epoch, l_d, l_p, eps, time.perf_counter() - t0)
        log.debug("epoch %d: L_d %.4f L_p %.4f eps %.4f", epoch, l_d, l_p, eps)
        if callback is not None:
            callback(epoch, flow, disc)
    return report


def train_auc(flow, disc, dataset, cfg, target=None, callback=None, prepared=False):
    """Adversarial training where the flow maximises the grid AUC."""
    return train_adversarial(
        flow, disc, dataset, cfg, target, auc_lambdas=default_lambda_grid(cfg.n_lambda), callback=callback,
        prepared=prepared,
    )


def build_models(cfg: TrainConfig, dim: int):
    flow = FlowModel(
        dim,
        cfg.flow_layers,
        (cfg.flow_width, cfg.flow_width),
        scale_clamp=cfg.scale_clamp,
        rng=make_rng(cfg.seed, 100),
    )
    disc = None
    if cfg.objective != "mle":
        hidden = (cfg.disc_width,) * cfg.disc_depth
        disc = Discriminator(dim, cfg.f, hidden, rng=make_rng(cfg.seed, 200))
    return flow, disc


def make_dataset(cfg: TrainConfig):
    """Training data named by ``cfg``: ``(DatasetHandle, exact target density)``."""
    x, target = eight_gaussians(cfg.n_data, make_rng(cfg.seed, 1))
    return DatasetHandle(x, batch_size=cfg.batch, seed=cfg.seed), target


PREP_FIELDS = (
    "f", "seed", "warm_start", "disc_pretrain", "lr_mle", "lr_disc_pretrain", "anchor", "batch", "epochs",
    "flow_layers", "flow_width", "scale_clamp", "disc_width", "disc_depth",
)


def prep_key(cfg: TrainConfig) -> tuple:
    """Fields that determine ``prepare_adversarial``'s result."""
    return tuple(getattr(cfg, k) for k in PREP_FIELDS)


def train(cfg: TrainConfig, dataset: DatasetHandle, target=None, callback=None, prep_cache=None):
    """Build fresh models from ``cfg`` and run the configured objective.

    ``prep_cache`` (a dict) shares warm-started, pretrained model pairs
    between adversarial runs with equal ``prep_key`` on the same dataset.
    """
    flow, disc = build_models(cfg, dataset.dim)
    try:
        if cfg.objective == "mle":
            return flow, disc, train_mle(flow, dataset, cfg)
        if prep_cache is None:
            prepare_adversarial(flow, disc, dataset, cfg)
        else:
            key = (id(dataset), prep_key(cfg))
            if key not in prep_cache:
                prep_cache[key] = prepare_adversarial(flow, disc, dataset, cfg)
            # copy the pair together so the discriminator keeps pointing at this flow
            flow, disc = copy.deepcopy(prep_cache[key])
        if cfg.objective == "auc":
            report = train_auc(flow, disc, dataset, cfg, target, callback, prepared=True)
        else:
            report = train_adversarial(flow, disc, dataset, cfg, target, callback=callback, prepared=True)
    except TrainingAborted as exc:
        # parameters were rolled back to the last good epoch
        exc.models = (flow, disc)
        raise
    return flow, disc, report
