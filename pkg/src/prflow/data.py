"""Synthetic mixtures with closed-form densities, and seeded batching.

Randomness comes from numpy's Philox generator, a counter-based bit
generator, keyed by ``SeedSequence([seed, *stream])``.  Streams are split by
appending integers to the key, so a (seed, epoch, batch) triple always maps
to the same draws on every platform numpy supports.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

__all__ = [
    "DatasetHandle",
    "MixtureDensity",
    "eight_gaussians",
    "make_rng",
    "random_mixture",
    "read_samples_csv",
    "two_gaussian_fixture",
    "write_samples_csv",
]


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Philox generator for ``seed`` on the sub-stream identified by ``stream``."""
    ss = np.random.SeedSequence([int(seed), *map(int, stream)])
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class MixtureDensity:
    """Mixture of isotropic Gaussians with closed-form density."""

    means: np.ndarray
    stds: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        means = np.array(self.means, dtype=np.float64)
        if means.ndim == 1:
            means = means[:, None]
        stds = np.array(self.stds, dtype=np.float64).reshape(-1)
        weights = np.array(self.weights, dtype=np.float64).reshape(-1)
        k = means.shape[0]
        if stds.shape != (k,) or weights.shape != (k,):
            raise ValueError("means, stds and weights disagree on component count")
        if np.any(stds <= 0):
            raise ValueError("standard deviations must be positive")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must lie on the simplex")
        for name, arr in (("means", means), ("stds", stds), ("weights", weights)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    def _as_points(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.dim == 1 and x.ndim <= 1:
            x = x.reshape(-1, 1)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ValueError(f"expected points of dimension {self.dim}, got shape {x.shape}")
        return x

    def log_pdf(self, x) -> np.ndarray:
        x = self._as_points(x)
        d = self.dim
        sq = ((x[:, None, :] - self.means[None]) ** 2).sum(axis=2)
        var = self.stds**2
        comp = -0.5 * sq / var - 0.5 * d * np.log(2 * np.pi * var)
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        return logsumexp(comp + logw, axis=1)

    def pdf(self, x) -> np.ndarray:
        return np.exp(self.log_pdf(x))

    def sample(self, n: int, rng: np.random.Generator, return_labels=False):
        labels = rng.choice(self.n_components, size=n, p=self.weights)
        noise = rng.standard_normal((n, self.dim))
        x = self.means[labels] + self.stds[labels, None] * noise
        return (x, labels) if return_labels else x

    def to_dict(self) -> dict:
        return {
            "means": self.means.tolist(),
            "stds": self.stds.tolist(),
            "weights": self.weights.tolist(),
        }


def eight_gaussians(n: int, rng: np.random.Generator, radius=2.0, std=0.1):
    """``n`` samples from 8 equal-weight Gaussians on a circle, plus the density."""
    if n < 1:
        raise ValueError("n must be positive")
    angles = np.arange(8) * (np.pi / 4)
    means = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    density = MixtureDensity(means, np.full(8, std), np.full(8, 1 / 8))
    return density.sample(n, rng), density


def two_gaussian_fixture():
    """1D target with two modes, a covering model and a one-mode model.

    Returns ``(P, P_hat_1, P_hat_2)`` where ``P_hat_1`` spreads over both
    modes and ``P_hat_2`` sits exactly on the right mode.
    """
    target = MixtureDensity([[-2.0], [2.0]], [0.5, 0.5], [0.5, 0.5])
    covering = MixtureDensity([[0.0]], [2.0], [1.0])
    one_mode = MixtureDensity([[2.0]], [0.5], [1.0])
    return target, covering, one_mode


def random_mixture(k: int, rng: np.random.Generator, dim=2, box=4.0, std_range=(0.2, 0.6)):
    """Random mixture: uniform means in ``[-box, box]^dim``, uniform stds, Dirichlet(1) weights."""
    if k < 1:
        raise ValueError("k must be at least 1")
    means = rng.uniform(-box, box, size=(k, dim))
    stds = rng.uniform(*std_range, size=k)
    weights = rng.dirichlet(np.ones(k))
    weights = weights / weights.sum()
    return MixtureDensity(means, stds, weights)


@dataclass
class DatasetHandle:
    """Minibatch source over a fixed buffer or an infinite sampler.

    In buffer mode one epoch is a seeded permutation of the buffer.  In
    sampler mode each batch is drawn fresh from ``density`` on stream
    ``(seed, epoch, batch_index)`` and an epoch has ``batches_per_epoch``
    batches.
    """

    samples: np.ndarray | None = None
    batch_size: int = 256
    seed: int = 0
    density: MixtureDensity | None = None
    batches_per_epoch: int = 100
    _buffer: np.ndarray | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if self.samples is None and self.density is None:
            raise ValueError("need a sample buffer or a density to sample from")
        if self.samples is not None:
            buf = np.asarray(self.samples, dtype=np.float64)
            if buf.ndim != 2 or len(buf) == 0:
                raise ValueError("dataset must be a non-empty (n, d) array")
            self._buffer = buf
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    @property
    def dim(self) -> int:
        return self._buffer.shape[1] if self._buffer is not None else self.density.dim

    def __len__(self) -> int:
        if self._buffer is not None:
            return math.ceil(len(self._buffer) / self.batch_size)
        return self.batches_per_epoch

    def batches(self, epoch: int):
        if self._buffer is not None:
            order = make_rng(self.seed, 1, epoch).permutation(len(self._buffer))
            for start in range(0, len(order), self.batch_size):
                yield self._buffer[order[start : start + self.batch_size]]
        else:
            for i in range(self.batches_per_epoch):
                yield self.density.sample(self.batch_size, make_rng(self.seed, 2, epoch, i))


def write_samples_csv(path, x, labels=None) -> None:
    x = np.asarray(x, dtype=np.float64)
    header = [f"x{j}" for j in range(x.shape[1])]
    if labels is not None:
        header.append("label")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i, row in enumerate(x):
            out = [repr(float(v)) for v in row]
            if labels is not None:
                out.append(int(labels[i]))
            w.writerow(out)


def read_samples_csv(path):
    with open(Path(path), newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    has_label = header[-1] == "label"
    ncols = len(header) - int(has_label)
    x = np.array([[float(v) for v in r[:ncols]] for r in body], dtype=np.float64)
    if has_label:
        return x, np.array([int(r[-1]) for r in body])
    return x, None
