"""Mixture fixtures, seeded streams, batching and sample CSVs."""

import math

import numpy as np
import pytest

from prflow.data import (
    DatasetHandle,
    MixtureDensity,
    eight_gaussians,
    make_rng,
    random_mixture,
    read_samples_csv,
    two_gaussian_fixture,
    write_samples_csv,
)
from prflow.divergences import make_generator
from prflow.evaluation import grid_quadrature


def test_make_rng_is_reproducible_and_stream_split():
    a = make_rng(3, 1, 2).standard_normal(5)
    np.testing.assert_array_equal(a, make_rng(3, 1, 2).standard_normal(5))
    assert not np.array_equal(a, make_rng(3, 1, 3).standard_normal(5))
    assert not np.array_equal(a, make_rng(4, 1, 2).standard_normal(5))
    assert isinstance(make_rng(0).bit_generator, np.random.Philox)


def test_make_rng_pinned_values():
    # counter-based Philox keyed by SeedSequence([0]) is platform independent
    np.testing.assert_array_equal(
        make_rng(0).integers(0, 2**32, 3),
        np.random.Generator(np.random.Philox(np.random.SeedSequence([0]))).integers(0, 2**32, 3),
    )


def test_eight_gaussians_construction():
    x, dens = eight_gaussians(10, make_rng(0))
    assert dens.n_components == 8
    np.testing.assert_array_equal(dens.weights, np.full(8, 1 / 8))
    np.testing.assert_allclose(np.linalg.norm(dens.means, axis=1), 2.0)
    assert x.shape == (10, 2)


def test_eight_gaussians_sample_mean():
    n = 20_000
    x, _ = eight_gaussians(n, make_rng(1))
    spread = math.sqrt(2.0**2 / 2 + 0.1**2)
    assert np.all(np.abs(x.mean(axis=0)) < 4 * spread / math.sqrt(n))


def test_eight_gaussians_density_at_mode():
    _, dens = eight_gaussians(1, make_rng(0))
    value = dens.pdf(dens.means[:1])[0]
    assert value == pytest.approx(1 / 8 / (2 * math.pi * 0.01), rel=0.01)
    assert value == pytest.approx(1.9894, rel=0.01)


def test_two_gaussian_fixture_symmetry_and_overlap():
    target, covering, one_mode = two_gaussian_fixture()
    x = np.linspace(-6, 6, 301)
    np.testing.assert_allclose(target.pdf(x), target.pdf(-x), rtol=0, atol=1e-12)
    axis = np.linspace(-8, 8, 8001)
    pts, w = grid_quadrature([axis])
    overlap = w @ np.minimum(target.pdf(pts), one_mode.pdf(pts))
    assert overlap == pytest.approx(0.5, abs=0.02)
    assert covering.n_components == 1


def test_random_mixture_invariants():
    m = random_mixture(15, make_rng(2))
    assert m.n_components == 15
    assert np.all(m.weights > 0) and m.weights.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(m.stds > 0)
    again = random_mixture(15, make_rng(2))
    np.testing.assert_array_equal(m.means, again.means)
    np.testing.assert_array_equal(m.weights, again.weights)


def test_single_component_mixture_has_zero_divergence_to_itself():
    m = random_mixture(1, make_rng(3))
    axis = np.linspace(-8, 8, 201)
    pts, w = grid_quadrature([axis, axis])
    p = m.pdf(pts) * w
    p = p / p.sum()
    assert np.sum(p * make_generator("kl").f(np.ones_like(p))) == 0.0


def test_mixture_density_integrates_to_one():
    m = random_mixture(5, make_rng(4))
    axis = np.linspace(-8, 8, 401)
    pts, w = grid_quadrature([axis, axis])
    assert w @ m.pdf(pts) == pytest.approx(1.0, abs=1e-4)


def test_mixture_validation():
    with pytest.raises(ValueError):
        MixtureDensity([[0.0, 0.0]], [0.0], [1.0])
    with pytest.raises(ValueError):
        MixtureDensity([[0.0, 0.0]], [1.0], [0.5])
    with pytest.raises(ValueError):
        MixtureDensity([[0.0, 0.0], [1.0, 1.0]], [1.0], [0.5, 0.5])
    with pytest.raises(ValueError):
        random_mixture(0, make_rng(0))
    with pytest.raises(ValueError):
        eight_gaussians(0, make_rng(0))
    m = MixtureDensity([[0.0, 0.0]], [1.0], [1.0])
    with pytest.raises(ValueError):
        m.pdf(np.zeros((3, 3)))


def test_buffer_batches_cover_each_epoch_once():
    x = np.arange(20.0).reshape(10, 2)
    ds = DatasetHandle(x, batch_size=4, seed=1)
    assert len(ds) == 3
    seen = np.concatenate(list(ds.batches(0)))
    np.testing.assert_array_equal(np.sort(seen[:, 0]), x[:, 0])
    first = [b.copy() for b in ds.batches(0)]
    again = list(ds.batches(0))
    for a, b in zip(first, again):
        np.testing.assert_array_equal(a, b)
    assert not np.array_equal(np.concatenate(first), np.concatenate(list(ds.batches(1))))


def test_sampler_batches_are_keyed_by_epoch_and_index():
    _, dens = eight_gaussians(1, make_rng(0))
    ds = DatasetHandle(density=dens, batch_size=8, batches_per_epoch=3, seed=2)
    a = list(ds.batches(5))
    b = list(ds.batches(5))
    assert len(a) == 3 and a[0].shape == (8, 2)
    for u, v in zip(a, b):
        np.testing.assert_array_equal(u, v)
    assert ds.dim == 2


def test_dataset_validation():
    with pytest.raises(ValueError):
        DatasetHandle()
    with pytest.raises(ValueError):
        DatasetHandle(np.zeros((0, 2)))
    with pytest.raises(ValueError):
        DatasetHandle(np.zeros((3, 2)), batch_size=0)


def test_sample_csv_round_trip(tmp_path):
    x, labels = eight_gaussians(50, make_rng(5))[1].sample(50, make_rng(5), return_labels=True)
    path = tmp_path / "s.csv"
    write_samples_csv(path, x, labels)
    assert path.read_text().splitlines()[0] == "x0,x1,label"
    x2, l2 = read_samples_csv(path)
    np.testing.assert_array_equal(x2, x)
    np.testing.assert_array_equal(l2, labels)
    write_samples_csv(path, x)
    x3, l3 = read_samples_csv(path)
    np.testing.assert_array_equal(x3, x)
    assert l3 is None


def test_fixture_parameters_export():
    _, dens = eight_gaussians(1, make_rng(0))
    d = dens.to_dict()
    assert set(d) == {"means", "stds", "weights"}
    np.testing.assert_array_equal(MixtureDensity(d["means"], d["stds"], d["weights"]).means, dens.means)
