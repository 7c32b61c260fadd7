"""PR frontiers, AUC, the dual/primal estimation-gap study and theorem checks."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import divergences as dv
from .data import MixtureDensity, make_rng, random_mixture
from .divergences import LAMBDA_INF, Kind, PRPoint, make_generator

__all__ = [
    "CheckResult",
    "GapReport",
    "GapRow",
    "PRCurve",
    "TheoremReport",
    "auc",
    "bregman_gap_experiment",
    "default_lambda_grid",
    "grid_quadrature",
    "pr_curve_discrete",
    "pr_curve_estimated",
    "pr_curve_exact",
    "verify_theorems",
]


def default_lambda_grid(n=64) -> np.ndarray:
    """``tan`` of the angular midpoints ``(j + 1/2) pi / (2n)``."""
    return np.tan((np.arange(n) + 0.5) * (np.pi / (2 * n)))


@dataclass
class PRCurve:
    points: list[PRPoint]
    provenance: str
    n_samples: int | None = None

    @property
    def lambdas(self) -> np.ndarray:
        return np.array([p.lam for p in self.points], dtype=np.float64)

    @property
    def alphas(self) -> np.ndarray:
        return np.array([p.alpha for p in self.points])

    @property
    def betas(self) -> np.ndarray:
        return np.array([p.beta for p in self.points])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["lambda", "alpha", "beta"])
        for p in self.points:
            w.writerow([repr(float(p.lam)), repr(p.alpha), repr(p.beta)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, provenance="file") -> "PRCurve":
        rows = list(csv.reader(io.StringIO(text)))
        if rows[0] != ["lambda", "alpha", "beta"]:
            raise ValueError("PR curve CSV must start with 'lambda,alpha,beta'")
        pts = [PRPoint(float(a), float(b), float(c)) for a, b, c in rows[1:]]
        return cls(pts, provenance)

    @classmethod
    def from_alphas(cls, lambdas, alphas, provenance="user", n_samples=None) -> "PRCurve":
        """Curve from precision values on a positive, increasing lambda grid."""
        return _curve(lambdas, alphas, provenance, n_samples)

    def sup_distance(self, other: "PRCurve") -> float:
        """Largest precision gap ``max |alpha - alpha'|`` on a shared grid."""
        if not np.allclose(self.lambdas, other.lambdas):
            raise ValueError("curves are on different lambda grids")
        return float(np.max(np.abs(self.alphas - other.alphas)))


def _curve(lambdas, alphas, provenance, n=None) -> PRCurve:
    lambdas = np.asarray(lambdas, dtype=np.float64)
    if np.any(lambdas <= 0) or np.any(np.diff(lambdas) <= 0):
        raise ValueError("lambda grid must be positive and strictly increasing")
    pts = [PRPoint(float(l), float(a), float(a) / float(l)) for l, a in zip(lambdas, alphas)]
    return PRCurve(pts, provenance, n)


def grid_quadrature(axes):
    """Points and trapezoid weights of the tensor grid built from ``axes``."""
    axes = [np.asarray(a, dtype=np.float64) for a in axes]
    ws = []
    for a in axes:
        w = np.zeros_like(a)
        d = np.diff(a)
        w[:-1] += d / 2
        w[1:] += d / 2
        ws.append(w)
    mesh = np.meshgrid(*axes, indexing="ij")
    points = np.stack([m.ravel() for m in mesh], axis=1)
    weights = ws[0]
    for w in ws[1:]:
        weights = np.multiply.outer(weights, w)
    return points, weights.ravel()


class MassDeficitError(ValueError):
    pass


def pr_curve_exact(p_density, q_density, lambda_grid, quadrature_grid, max_deficit=1e-3) -> PRCurve:
    """``alpha_lam = int min(lam p, q)`` by trapezoid quadrature.

    ``p_density``/``q_density`` map an (n, d) array to density values;
    ``quadrature_grid`` is a sequence of 1D axes.  Mass outside the grid can
    change ``alpha_lam`` by at most ``min(lam * dp, dq)`` (``dp``, ``dq`` the
    missing masses) and ``beta_lam`` by that over ``lam``; if either bound
    exceeds ``max_deficit`` anywhere on the grid the box is rejected.
    """
    points, w = grid_quadrature(quadrature_grid)
    p = np.asarray(p_density(points), dtype=np.float64)
    q = np.asarray(q_density(points), dtype=np.float64)
    lam = np.asarray(lambda_grid, dtype=np.float64)
    mp, mq = float(w @ p), float(w @ q)
    dp, dq = max(1.0 - mp, 0.0), max(1.0 - mq, 0.0)
    err = np.minimum(lam * dp, dq)
    if np.any(np.maximum(err, err / lam) > max_deficit):
        raise MassDeficitError(f"grid misses mass: p {mp:.6f}, q {mq:.6f}")
    alphas = [float(w @ np.minimum(l * p, q)) for l in lam]
    # quadrature can overshoot 1 by rounding; the frontier cannot
    alphas = np.minimum(np.maximum.accumulate(alphas), np.minimum(1.0, lam))
    return _curve(lam, alphas, "exact-quadrature")


def pr_curve_discrete(p, q, lambda_grid) -> PRCurve:
    lam = np.asarray(lambda_grid, dtype=np.float64)
    alphas = [dv.pr_alpha_beta(float(l), p, q).alpha for l in lam]
    return _curve(lam, alphas, "exact-discrete")


def pr_curve_estimated(disc, f, fake_samples, lambda_grid, sample_weights=None) -> PRCurve:
    """``alpha_lam = mean min(lam r(x), 1)`` over fake samples.

    ``disc`` is anything with a ``ratio(x)`` method; ``sample_weights``
    turns the mean into a weighted sum (for tabular, exact expectations).
    """
    f = make_generator(f)
    if not f.strictly_convex:
        raise ValueError(f"{f.name} cannot recover a density ratio")
    x = np.asarray(fake_samples)
    if len(x) == 0:
        raise ValueError("no fake samples")
    r = np.asarray(disc.ratio(x), dtype=np.float64)
    wts = np.full(len(r), 1.0 / len(r)) if sample_weights is None else np.asarray(sample_weights)
    lam = np.asarray(lambda_grid, dtype=np.float64)
    alphas = np.minimum(lam[:, None] * r[None, :], 1.0) @ wts
    return _curve(lam, alphas, "discriminator-estimated", len(r))


class TabularDiscriminator:
    """Scores indexed by support point, for exact discrete checks."""

    def __init__(self, scores, f):
        self.f = make_generator(f)
        self.scores = np.asarray(scores, dtype=np.float64)

    def ratio(self, idx):
        return self.f.conj_grad(self.scores[np.asarray(idx, dtype=int)])


def auc_weights(lambdas) -> np.ndarray:
    """Quadrature weights ``w`` with ``AUC ~ sum(w * alpha**2)``.

    The area under the frontier in polar form is
    ``1/2 int_0^{pi/2} alpha_{tan theta}^2 / sin^2 theta dtheta``; the
    integrand is bounded at both ends.  Trapezoid in ``theta`` with the end
    cells extended to 0 and pi/2, which on the midpoint grid of
    ``default_lambda_grid`` is the midpoint rule.
    """
    lam = np.asarray(lambdas, dtype=np.float64)
    if lam.ndim != 1 or len(lam) < 2 or not np.all(np.isfinite(lam)) or lam[0] <= 0 or np.any(np.diff(lam) <= 0):
        raise ValueError("AUC needs a strictly increasing grid of positive finite lambdas")
    theta = np.arctan(lam)
    edges = np.concatenate([[0.0], 0.5 * (theta[1:] + theta[:-1]), [np.pi / 2]])
    cell = np.diff(edges)
    cell[0] = theta[0] + 0.5 * (theta[1] - theta[0])
    cell[-1] = np.pi / 2 - theta[-1] + 0.5 * (theta[-1] - theta[-2])
    return 0.5 * cell / np.sin(theta) ** 2


def auc(curve: PRCurve) -> float:
    """Area under the PR frontier; 1 for ``P = Q``."""
    return float(np.sum(curve.alphas**2 * auc_weights(curve.lambdas)))


# ---------------------------------------------------------------------------
# estimation-gap experiment


@dataclass
class GapRow:
    instance: int
    f_kind: str
    dual_gap: float
    primal_error: float
    bregman: float
    bound: float
    mc_sigma: float = 0.0
    flagged: bool = False


@dataclass
class GapReport:
    rows: list[GapRow] = field(default_factory=list)
    lam: float = 1.0

    def to_csv(self) -> str:
        lines = ["instance,f_kind,dual_gap,primal_error,bound"]
        for r in self.rows:
            lines.append(f"{r.instance},{r.f_kind},{r.dual_gap!r},{r.primal_error!r},{r.bound!r}")
        return "\n".join(lines) + "\n"

    def by_kind(self, kind) -> list[GapRow]:
        return [r for r in self.rows if r.f_kind == kind]

    def summary(self) -> dict:
        """Median errors and the covariance of (dual_gap, primal_error) per kind."""
        out = {}
        for kind in sorted({r.f_kind for r in self.rows}):
            rows = [r for r in self.by_kind(kind) if not r.flagged]
            pts = np.array([[r.dual_gap, r.primal_error] for r in rows])
            out[kind] = {
                "median_dual_gap": float(np.median(pts[:, 0])),
                "median_primal_error": float(np.median(pts[:, 1])),
                "mean": pts.mean(axis=0).tolist(),
                "cov": np.cov(pts.T).tolist() if len(pts) > 1 else None,
            }
        return out


@dataclass
class GridInstance:
    """A pair of mixtures discretised onto the cell centres of a square grid.

    Both are mixed with a uniform floor so they share the whole grid as
    support, which keeps every ratio and divergence finite.
    """

    points: np.ndarray
    p: np.ndarray
    q: np.ndarray

    @classmethod
    def from_mixtures(cls, target: MixtureDensity, model: MixtureDensity, cells=64, half_width=5.0, floor=0.05):
        edges = np.linspace(-half_width, half_width, cells + 1)
        centres = (edges[:-1] + edges[1:]) / 2
        points, _ = grid_quadrature([centres, centres])

        def discretise(m):
            w = m.pdf(points)
            w = w / w.sum()
            return (1 - floor) * w + floor / len(w)

        return cls(points, discretise(target), discretise(model))

    def sample(self, which, n, rng):
        idx = rng.choice(len(self.points), size=n, p=self.p if which == "p" else self.q)
        return self.points[idx]


def _train_grid_discriminator(inst, f, steps, batch, lr, hidden, seed):
    from . import autodiff as ad
    from .models import Discriminator

    disc = Discriminator(2, f, hidden, rng=make_rng(seed, 500))
    opt = ad.Adam(disc.parameters(), lr=lr)
    rng = make_rng(seed, 501)
    for _ in range(steps):
        tape = ad.Tape()
        obj = disc.dual_objective(inst.sample("p", batch, rng), inst.sample("q", batch, rng), tape)
        tape.backward(-obj)
        opt.step()
    return disc


def gap_row(inst: GridInstance, disc, g, instance: int, kind: str) -> GapRow:
    """Exact (sum over grid cells) dual gap, primal error and Bregman term."""
    f = disc.f
    a = disc.raw(inst.points)
    t = disc.omega.score(a)
    r = disc.omega.ratio(a)
    true = inst.p / inst.q
    d_f = float(np.sum(inst.q * f.f(true)))
    dual = float(np.sum(inst.p * t) - np.sum(inst.q * disc.omega.conj_score(a)))
    d_g = float(np.sum(inst.q * g.f(true)))
    primal = float(np.sum(inst.q * g.f(r)))
    breg = float(np.sum(inst.q * (f.f(true) - f.f(r) - f.fprime(r) * (true - r))))
    gap = d_f - dual
    if f.strong_convexity > 0:
        bound = g.lipschitz * math.sqrt(2 * max(gap, 0.0) / f.strong_convexity)
    else:
        bound = math.inf
    flagged = not all(math.isfinite(v) for v in (gap, primal, d_g))
    return GapRow(instance, kind, gap, abs(d_g - primal), breg, bound, 0.0, flagged)


def bregman_gap_experiment(
    n_instances=200,
    k_components=15,
    seed=0,
    lam=1.0,
    steps=400,
    batch=256,
    lr=1e-3,
    hidden=(64, 64),
    cells=64,
) -> GapReport:
    """Train a chi-squared and a KL discriminator per random mixture pair.

    Each instance draws two random ``k_components`` mixtures, discretises
    them on a grid (see :class:`GridInstance`), trains both discriminators
    on samples, and records the exact dual gap of ``D_f`` and the error of
    the primal estimate of ``D_PR(lam)``.
    """
    if n_instances < 1:
        raise ValueError("n_instances must be at least 1")
    g = make_generator("pr", lam)
    report = GapReport(lam=float(lam))
    for i in range(n_instances):
        rng = make_rng(seed, 400, i)
        inst = GridInstance.from_mixtures(
            random_mixture(k_components, rng), random_mixture(k_components, rng), cells=cells
        )
        for kind in ("chi2", "kl"):
            try:
                disc = _train_grid_discriminator(inst, kind, steps, batch, lr, hidden, seed * 100_003 + i)
                row = gap_row(inst, disc, g, i, kind)
            except (FloatingPointError, ValueError):
                row = GapRow(i, kind, math.nan, math.nan, math.nan, math.nan, flagged=True)
            report.rows.append(row)
    return report


# ---------------------------------------------------------------------------
# theorem checks


@dataclass
class CheckResult:
    check: str
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_error <= self.tolerance)


@dataclass
class TheoremReport:
    results: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def failures(self) -> list[CheckResult]:
        return [r for r in self.results if not r.passed]

    def to_csv(self) -> str:
        lines = ["check,max_error,tolerance,pass"]
        for r in self.results:
            lines.append(f"{r.check},{r.max_error!r},{r.tolerance!r},{str(r.passed).lower()}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        lines = []
        for r in self.results:
            verdict = "PASS" if r.passed else "FAIL"
            lines.append(f"{verdict}  {r.check:<28} max_error={r.max_error:.3e}  tol={r.tolerance:.1e}")
        n_fail = len(self.failures)
        lines.append(f"{len(self.results) - n_fail}/{len(self.results)} checks passed")
        return "\n".join(lines) + "\n"


_CHECK_LAMBDAS = (0.1, 0.5, 1.0, 2.0, 10.0)


def random_instance(rng, max_support=20):
    n = int(rng.integers(2, max_support + 1))
    return rng.dirichlet(np.ones(n)), rng.dirichlet(np.ones(n))


def _random_scores(f, ratio, rng):
    """Admissible, generally suboptimal tabular scores around the optimum."""
    t_opt = f.fprime(ratio)
    if f.kind is Kind.REVERSE_KL:
        return t_opt * np.exp(rng.normal(0, 0.5, ratio.shape))
    if f.kind is Kind.CHI_SQUARED:
        # keep r = t/2 + 1 positive
        return np.maximum(t_opt + rng.normal(0, 1.0, ratio.shape), -2.0 + 1e-6)
    return t_opt + rng.normal(0, 0.5, ratio.shape)


def verify_theorems(n_cases=1000, seed=7, generators=None, n_grid=10_000) -> TheoremReport:
    """Check the exact identities of the PR-divergence calculus on random instances.

    ``generators`` overrides the generator for a kind name (``kl``, ``rkl``,
    ``chi2``, ``tv``, ``pr``; the ``pr`` entry is called with lambda).  Used to
    inject faulty generators as negative controls.
    """
    report = TheoremReport()
    if n_cases <= 0:
        return report
    generators = dict(generators or {})

    def gen(kind, lam=None):
        if kind in generators:
            return generators[kind](lam) if kind == "pr" else generators[kind]
        return make_generator(kind, lam)

    rng = make_rng(seed, 600)
    err = {
        name: 0.0
        for name in (
            "f_at_one",
            "fenchel_consistency",
            "alpha_identity",
            "pr_reversal",
            "pr1_equals_tv",
            "weak_duality",
            "bregman_gap_identity",
            "primal_bound",
            "pr_decomposition",
            "decomposition_weights",
            "auc_area",
            "auc_perfect_dominates",
        )
    }
    smooth = ("kl", "rkl", "chi2")

    for kind in (*smooth, "tv"):
        err["f_at_one"] = max(err["f_at_one"], abs(float(gen(kind).f(1.0))))
    for lam in _CHECK_LAMBDAS:
        err["f_at_one"] = max(err["f_at_one"], abs(float(gen("pr", lam).f(1.0))))
    u = np.geomspace(1e-3, 1e3, 201)
    for kind in smooth:
        f = gen(kind)
        err["fenchel_consistency"] = max(
            err["fenchel_consistency"], float(np.max(np.abs(f.conj_grad(f.fprime(u)) - u) / u))
        )

    decomposition_cases = min(n_cases, 100)
    for case in range(n_cases):
        p, q = random_instance(rng)
        ratio = p / q
        for lam in _CHECK_LAMBDAS:
            g = gen("pr", lam)
            alpha = float(np.minimum(lam * p, q).sum())
            d_pr = float(np.sum(q * g.f(ratio)))
            err["alpha_identity"] = max(err["alpha_identity"], abs(alpha - (min(1.0, lam) - d_pr)))
            rev = float(np.sum(p * g.f(q / p)))
            d_inv = float(np.sum(q * gen("pr", 1.0 / lam).f(ratio)))
            err["pr_reversal"] = max(err["pr_reversal"], abs(rev - lam * d_inv))
        d_pr1 = float(np.sum(q * gen("pr", 1.0).f(ratio)))
        d_tv = float(np.sum(q * gen("tv").f(ratio)))
        err["pr1_equals_tv"] = max(err["pr1_equals_tv"], abs(d_pr1 - d_tv))

        for kind in smooth:
            f = gen(kind)
            d_f = float(np.sum(q * f.f(ratio)))
            t = _random_scores(f, ratio, rng)
            dual = float(np.sum(p * t) - np.sum(q * f.conj(t)))
            err["weak_duality"] = max(err["weak_duality"], dual - d_f)
            r = f.conj_grad(t)
            # the gap is Breg_f(p/q, r); the reversed order only agrees for symmetric Bregman (chi2)
            breg = float(np.sum(q * (f.f(ratio) - f.f(r) - f.fprime(r) * (ratio - r))))
            scale = max(1.0, abs(d_f))
            err["bregman_gap_identity"] = max(err["bregman_gap_identity"], abs((d_f - dual) - breg) / scale)
            if kind == "chi2":
                eps = max(d_f - dual, 0.0)
                for lam in _CHECK_LAMBDAS:
                    g = gen("pr", lam)
                    d_g = float(np.sum(q * g.f(ratio)))
                    primal = float(np.sum(q * g.f(r)))
                    bound = lam * math.sqrt(2 * eps / f.strong_convexity)
                    err["primal_bound"] = max(err["primal_bound"], abs(d_g - primal) - bound)
            if case < decomposition_cases:
                rebuilt = dv.decompose_as_pr_integral(f, p, q, n_grid)
                err["pr_decomposition"] = max(err["pr_decomposition"], abs(rebuilt - d_f) / d_f)

        lam_grid = default_lambda_grid(64)
        curve = pr_curve_discrete(p, q, lam_grid)
        perfect = _curve(lam_grid, np.minimum(1.0, lam_grid), "exact-discrete")
        err["auc_perfect_dominates"] = max(err["auc_perfect_dominates"], auc(curve) - auc(perfect))

    lam = rng.uniform(0.05, 20.0, size=20)
    table = {"kl": 1 / lam**2, "rkl": 1 / lam, "chi2": 2 / lam**3}
    for kind, expected in table.items():
        w = gen(kind).fsecond(1 / lam) / lam**3
        err["decomposition_weights"] = max(err["decomposition_weights"], float(np.max(np.abs(w - expected) / expected)))

    # the AUC quadrature equals the polygon area under the (beta, alpha) frontier
    p, q = random_instance(rng)
    lam_dense = default_lambda_grid(4096)
    alpha = pr_curve_discrete(p, q, lam_dense).alphas
    xs = np.concatenate([[0.0, 1.0], alpha / lam_dense, [0.0]])
    ys = np.concatenate([[0.0, 0.0], alpha, [1.0]])
    area = 0.5 * abs(np.dot(xs, np.roll(ys, -1)) - np.dot(ys, np.roll(xs, -1)))
    err["auc_area"] = abs(auc(_curve(lam_dense, alpha, "exact-discrete")) - area) / area

    tol = {
        "f_at_one": 1e-12,
        "fenchel_consistency": 1e-10,
        "alpha_identity": 1e-12,
        "pr_reversal": 1e-12,
        "pr1_equals_tv": 1e-12,
        "weak_duality": 1e-12,
        "bregman_gap_identity": 1e-10,
        "primal_bound": 1e-12,
        "pr_decomposition": 1e-3,
        "decomposition_weights": 1e-12,
        "auc_area": 1e-4,
        "auc_perfect_dominates": 1e-12,
    }
    for name, value in err.items():
        report.results.append(CheckResult(name, float(value), tol[name]))
    return report
