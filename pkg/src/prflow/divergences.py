"""Exact f-divergence calculus on finite-support distributions.

Generators, their Fenchel conjugates, the precision-recall (PR) divergence
family, Bregman divergences, dual and primal estimates, and the
reconstruction of a smooth f-divergence as a weighted integral of
PR-divergences.  Everything here is float64 and exact up to rounding, which
is what the theorem checks in :mod:`prflow.evaluation` rely on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import xlogy

from . import autodiff as ad

__all__ = [
    "LAMBDA_INF",
    "DiscreteDistribution",
    "GeneratorFunction",
    "Interval",
    "Kind",
    "PRPoint",
    "RatioBounds",
    "bregman",
    "decompose_as_pr_integral",
    "dual_value",
    "exact_divergence",
    "make_generator",
    "optimal_discriminator",
    "pr_alpha_beta",
    "pr_divergence_consistency",
    "primal_estimate",
    "ratio_bounds",
]


class Kind(str, Enum):
    KL = "kl"
    REVERSE_KL = "rkl"
    CHI_SQUARED = "chi2"
    TOTAL_VARIATION = "tv"
    PR = "pr"


_ALIASES = {
    "kl": Kind.KL,
    "reversekl": Kind.REVERSE_KL,
    "reverse_kl": Kind.REVERSE_KL,
    "rkl": Kind.REVERSE_KL,
    "chi2": Kind.CHI_SQUARED,
    "chisquared": Kind.CHI_SQUARED,
    "chi_squared": Kind.CHI_SQUARED,
    "tv": Kind.TOTAL_VARIATION,
    "totalvariation": Kind.TOTAL_VARIATION,
    "total_variation": Kind.TOTAL_VARIATION,
    "pr": Kind.PR,
}

STRICTLY_CONVEX = frozenset({Kind.KL, Kind.REVERSE_KL, Kind.CHI_SQUARED})


class _LambdaInfinity:
    """Sentinel for the trade-off parameter at +infinity."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "LAMBDA_INF"

    def __reduce__(self):
        return (_LambdaInfinity, ())


LAMBDA_INF = _LambdaInfinity()


@dataclass(frozen=True)
class Interval:
    lo: float
    hi: float
    lo_closed: bool = True
    hi_closed: bool = True

    def contains(self, t) -> bool:
        t = np.asarray(t, dtype=np.float64)
        lo_ok = t >= self.lo if self.lo_closed else t > self.lo
        hi_ok = t <= self.hi if self.hi_closed else t < self.hi
        return bool(np.all(lo_ok & hi_ok & ~np.isnan(t)))


_REALS = Interval(-math.inf, math.inf, False, False)


def _check_lambda(lam) -> float:
    if lam is LAMBDA_INF:
        raise ValueError("LAMBDA_INF has no generator; use pr_alpha_beta")
    if isinstance(lam, bool) or not isinstance(lam, (int, float, np.floating, np.integer)):
        raise TypeError(f"lambda must be a real number, got {type(lam).__name__}")
    lam = float(lam)
    if not math.isfinite(lam) or lam <= 0:
        raise ValueError(f"lambda must be positive and finite, got {lam}")
    return lam


@dataclass(frozen=True)
class GeneratorFunction:
    """A convex generator ``f`` with ``f(1) = 0`` and its conjugate.

    ``f`` and ``conj`` accept arrays or :class:`~prflow.autodiff.Node`
    objects; the derivative members are numpy-only.
    """

    kind: Kind
    lam: float | None = None

    @property
    def name(self) -> str:
        if self.kind is Kind.PR:
            return f"pr({self.lam:g})"
        return self.kind.value

    @property
    def strictly_convex(self) -> bool:
        return self.kind in STRICTLY_CONVEX

    @property
    def conj_domain(self) -> Interval:
        if self.kind is Kind.PR:
            return Interval(0.0, self.lam)
        if self.kind is Kind.TOTAL_VARIATION:
            return Interval(-0.5, 0.5)
        if self.kind is Kind.REVERSE_KL:
            return Interval(-math.inf, 0.0, False, False)
        return _REALS

    @property
    def lipschitz(self) -> float:
        """Lipschitz constant on the positive half-line (inf if unbounded)."""
        if self.kind is Kind.PR:
            return self.lam
        if self.kind is Kind.TOTAL_VARIATION:
            return 0.5
        return math.inf

    @property
    def strong_convexity(self) -> float:
        """Global strong-convexity modulus on the positive half-line."""
        return 2.0 if self.kind is Kind.CHI_SQUARED else 0.0

    def f(self, u):
        k = self.kind
        if k is Kind.KL:
            if not isinstance(u, ad.Node):
                # continuous extension 0 log 0 = 0
                return xlogy(u, u)
            return u * ad.log(u)
        if k is Kind.REVERSE_KL:
            return -ad.log(u)
        if k is Kind.CHI_SQUARED:
            d = u - 1.0
            return d * d
        if k is Kind.TOTAL_VARIATION:
            d = u - 1.0
            return (ad.relu(d) + ad.relu(-d)) * 0.5
        return ad.maximum(u * self.lam, 1.0) - max(self.lam, 1.0)

    def fprime(self, u):
        u = np.asarray(u, dtype=np.float64)
        k = self.kind
        if k is Kind.KL:
            return 1.0 + np.log(u)
        if k is Kind.REVERSE_KL:
            return -1.0 / u
        if k is Kind.CHI_SQUARED:
            return 2.0 * (u - 1.0)
        if k is Kind.TOTAL_VARIATION:
            return np.where(u >= 1.0, 0.5, -0.5)
        # right derivative at the kink u = 1/lam
        return np.where(u * self.lam >= 1.0, self.lam, 0.0)

    def fsecond(self, u):
        u = np.asarray(u, dtype=np.float64)
        k = self.kind
        if k is Kind.KL:
            return 1.0 / u
        if k is Kind.REVERSE_KL:
            return 1.0 / (u * u)
        if k is Kind.CHI_SQUARED:
            return np.full_like(u, 2.0)
        return np.zeros_like(u)

    def conj(self, t):
        k = self.kind
        if k is Kind.KL:
            return ad.exp(t - 1.0)
        if k is Kind.REVERSE_KL:
            return -1.0 - ad.log(-t)
        if k is Kind.CHI_SQUARED:
            return t * t * 0.25 + t
        if k is Kind.TOTAL_VARIATION:
            return t
        return t * (1.0 / self.lam) + (max(self.lam, 1.0) - 1.0)

    def conj_grad(self, t):
        t = np.asarray(t, dtype=np.float64)
        k = self.kind
        if k is Kind.KL:
            return np.exp(t - 1.0)
        if k is Kind.REVERSE_KL:
            return -1.0 / t
        if k is Kind.CHI_SQUARED:
            return 0.5 * t + 1.0
        if k is Kind.TOTAL_VARIATION:
            return np.ones_like(t)
        return np.full_like(t, 1.0 / self.lam)

    def in_domain(self, u) -> bool:
        """Whether ``u`` lies in the domain of ``f`` (the ratio domain)."""
        u = np.asarray(u, dtype=np.float64)
        if self.kind is Kind.REVERSE_KL:
            return bool(np.all(u > 0))
        if self.kind in (Kind.KL, Kind.PR):
            return bool(np.all(u >= 0))
        return bool(np.all(np.isfinite(u)))


def make_generator(kind, lam=None) -> GeneratorFunction:
    """Build a generator by name: ``kl``, ``rkl``, ``chi2``, ``tv`` or ``pr``.

    ``lam`` is required for ``pr`` and rejected otherwise.
    """
    if isinstance(kind, GeneratorFunction):
        return kind
    if not isinstance(kind, Kind):
        key = str(kind).strip().lower().replace("-", "_")
        if key not in _ALIASES:
            raise ValueError(f"unknown divergence kind {kind!r}")
        kind = _ALIASES[key]
    if kind is Kind.PR:
        if lam is None:
            raise ValueError("PR generator requires lambda")
        return GeneratorFunction(kind, _check_lambda(lam))
    if lam is not None:
        raise ValueError(f"lambda is only meaningful for PR, not {kind.value}")
    return GeneratorFunction(kind)


@dataclass(frozen=True)
class DiscreteDistribution:
    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        if w.ndim != 1 or w.size == 0:
            raise ValueError("weights must be a non-empty vector")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and non-negative")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {w.sum()!r}, not 1")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    def __len__(self):
        return self.weights.size


def _weights(d) -> np.ndarray:
    if isinstance(d, DiscreteDistribution):
        return d.weights
    return DiscreteDistribution(d).weights


def _pair(p, q, strict_q=True):
    p, q = _weights(p), _weights(q)
    if p.shape != q.shape:
        raise ValueError(f"support mismatch: {p.size} vs {q.size}")
    if strict_q and np.any(q <= 0):
        raise ValueError("q must be strictly positive on the shared support")
    return p, q


def exact_divergence(p, q, g: GeneratorFunction) -> float:
    """``sum_i q_i g(p_i / q_i)``."""
    p, q = _pair(p, q)
    return float(np.sum(q * g.f(p / q)))


@dataclass(frozen=True)
class PRPoint:
    lam: object
    alpha: float
    beta: float


def pr_alpha_beta(lam, p, q) -> PRPoint:
    """Point of the PR frontier: ``alpha = sum min(lam p, q)``, ``beta = alpha / lam``.

    At ``LAMBDA_INF`` the frontier ends at ``alpha = 1, beta = 0``.
    """
    p, q = _pair(p, q, strict_q=False)
    if lam is LAMBDA_INF:
        return PRPoint(LAMBDA_INF, float(q[p > 0].sum()), 0.0)
    lam = _check_lambda(lam)
    alpha = float(np.minimum(lam * p, q).sum())
    return PRPoint(lam, alpha, alpha / lam)


def pr_divergence_consistency(lam, p, q) -> tuple[float, float]:
    """Both sides of ``alpha_lam = min(1, lam) - D_PR(lam)``."""
    lhs = pr_alpha_beta(lam, p, q).alpha
    if lam is LAMBDA_INF:
        return lhs, 1.0
    rhs = min(1.0, float(lam)) - exact_divergence(p, q, make_generator("pr", lam))
    return lhs, rhs


def bregman(g: GeneratorFunction, a, b) -> float:
    a, b = float(a), float(b)
    if a <= 0 or b <= 0:
        raise ValueError("Bregman arguments must be positive")
    if g.kind is Kind.PR and b * g.lam == 1.0:
        raise ValueError(f"{g.name} is not differentiable at b = {b}")
    if g.kind is Kind.TOTAL_VARIATION and b == 1.0:
        raise ValueError("tv is not differentiable at b = 1")
    return float(g.f(a) - g.f(b) - g.fprime(b) * (a - b))


def dual_value(p, q, f: GeneratorFunction, t_values) -> float:
    """``sum p_i t_i - sum q_i f*(t_i)``; a lower bound on ``D_f(p || q)``."""
    p, q = _pair(p, q)
    t = np.asarray(t_values, dtype=np.float64)
    if t.shape != p.shape:
        raise ValueError(f"need one score per support point, got {t.shape}")
    if not f.conj_domain.contains(t):
        raise ValueError(f"scores outside the conjugate domain of {f.name}")
    return float(np.sum(p * t) - np.sum(q * f.conj(t)))


def _require_strict(f: GeneratorFunction):
    if not f.strictly_convex:
        raise ValueError(
            f"{f.name} has a degenerate conjugate gradient and cannot recover a ratio"
        )


def optimal_discriminator(f: GeneratorFunction, ratio):
    """Score that maximises the dual objective where ``p/q = ratio``: ``f'(ratio)``."""
    _require_strict(f)
    ratio = np.asarray(ratio, dtype=np.float64)
    if np.any(ratio <= 0):
        raise ValueError("ratio must be positive")
    out = f.fprime(ratio)
    return float(out) if out.ndim == 0 else out


def primal_estimate(p, q, f: GeneratorFunction, g: GeneratorFunction, t_values) -> float:
    """``sum q_i g(r_i)`` with the ratio estimate ``r = grad f*(t)``."""
    _require_strict(f)
    p, q = _pair(p, q)
    t = np.asarray(t_values, dtype=np.float64)
    if t.shape != p.shape:
        raise ValueError(f"need one score per support point, got {t.shape}")
    if not f.conj_domain.contains(t):
        raise ValueError(f"scores outside the conjugate domain of {f.name}")
    r = f.conj_grad(t)
    if not g.in_domain(r):
        raise ValueError(f"ratio estimates fall outside the domain of {g.name}")
    return float(np.sum(q * g.f(r)))


@dataclass(frozen=True)
class RatioBounds:
    m: float
    M: float


def ratio_bounds(p, q) -> RatioBounds:
    p, q = _pair(p, q)
    if np.any(p <= 0):
        raise ValueError("p must be strictly positive for ratio bounds")
    r = q / p
    return RatioBounds(float(r.min()), float(r.max()))


def pr_divergence_curve(p, q, lambdas) -> np.ndarray:
    """``D_PR(lam)`` for every entry of ``lambdas`` (vectorised)."""
    p, q = _pair(p, q)
    lam = np.asarray(lambdas, dtype=np.float64)[:, None]
    return np.sum(np.maximum(lam * p, q), axis=1) - np.maximum(lam[:, 0], 1.0)


def decompose_as_pr_integral(f: GeneratorFunction, p, q, n_grid: int = 10_000) -> float:
    """Rebuild ``D_f(p || q)`` as ``int_m^M f''(1/lam) / lam^3 * D_PR(lam) dlam``.

    Trapezoid rule on a log-spaced grid over ``[m, M]``, with the kinks of
    the piecewise-linear ``D_PR`` (``lam = q_i/p_i`` and ``lam = 1``) added
    as nodes.  Error is O(n_grid^-2).
    """
    if n_grid < 8:
        raise ValueError("n_grid must be at least 8")
    if not f.strictly_convex:
        raise ValueError(f"{f.name} is not twice differentiable")
    p, q = _pair(p, q)
    bounds = ratio_bounds(p, q)
    m, M = bounds.m, bounds.M
    if M - m <= 1e-15 * M:
        return 0.0
    kinks = np.concatenate([q / p, [1.0]])
    grid = np.union1d(np.geomspace(m, M, n_grid), kinks[(kinks >= m) & (kinks <= M)])
    weight = f.fsecond(1.0 / grid) / grid**3
    return float(np.trapezoid(weight * pr_divergence_curve(p, q, grid), grid))
