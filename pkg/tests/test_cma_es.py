import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bbtune.cma_es import CmaState, cma_ask, cma_init, cma_tell, default_popsize, fmin


def sphere(x):
    return float(np.dot(x, x))


def rosenbrock(x):
    return float(np.sum(100.0 * (x[1:] - x[:-1] ** 2) ** 2 + (1 - x[:-1]) ** 2))


def test_init_defaults():
    es = cma_init(500, 0.5, popsize=20, seed=1)
    assert es.popsize == 20
    assert es.sigma == 0.5
    assert np.array_equal(es.mean, np.zeros(500))
    assert np.array_equal(es.C, np.eye(500))


@pytest.mark.parametrize("d, lam", [(1, 4), (100, 17), (500, 22), (50, 15)])
def test_default_popsize(d, lam):
    assert default_popsize(d) == lam
    assert cma_init(d, 1.0).popsize == lam


@pytest.mark.parametrize("d, sigma", [(0, 1.0), (-3, 1.0), (5, 0.0), (5, -1.0), (2.5, 1.0)])
def test_init_rejects_bad_arguments(d, sigma):
    with pytest.raises(ValueError):
        cma_init(d, sigma)


def test_weights_non_increasing_and_normalized():
    es = cma_init(30, 0.3, popsize=20)
    assert len(es.weights) == 10
    assert np.all(np.diff(es.weights) <= 0)
    assert math.isclose(es.weights.sum(), 1.0)


def test_ask_shape_and_replay():
    es = cma_init(3, 0.5, popsize=7, seed=11)
    a = cma_ask(es.clone())
    b = cma_ask(es.clone())
    assert a.shape == (7, 3)
    assert np.array_equal(a, b)


def test_ask_tiny_sigma_hugs_mean():
    es = cma_init(4, 1e-12, popsize=50, seed=2, mean=np.arange(4.0))
    xs = cma_ask(es)
    assert np.abs(xs - es.mean).max() < 1e-9


def test_tell_rejects_nonfinite_with_index():
    es = cma_init(3, 0.5, popsize=6)
    xs = es.ask()
    losses = np.ones(6)
    losses[4] = np.nan
    with pytest.raises(ValueError, match="candidate 4"):
        cma_tell(es, xs, losses)
    losses[4] = np.inf
    with pytest.raises(ValueError, match="candidate 4"):
        cma_tell(es, xs, losses)


def test_tell_rejects_length_mismatch():
    es = cma_init(3, 0.5, popsize=6)
    xs = es.ask()
    with pytest.raises(ValueError):
        es.tell(xs, np.ones(5))
    with pytest.raises(ValueError):
        es.tell(xs[:5], np.ones(6))


def test_tell_records_best_and_generation():
    es = cma_init(2, 0.5, popsize=6, seed=0)
    xs = es.ask()
    losses = [sphere(x) for x in xs]
    es.tell(xs, losses)
    assert es.generation == 1
    assert es.best_loss == min(losses)
    assert np.array_equal(es.best_x, xs[int(np.argmin(losses))])


def _state_equal(a, b):
    return all(np.array_equal(getattr(a, k), getattr(b, k)) for k in ("mean", "C", "pc", "ps", "sigma", "D", "B"))


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), d=st.integers(1, 12), scale=st.floats(0.01, 100), shift=st.floats(-50, 50))
def test_rank_invariance(seed, d, scale, shift):
    es = cma_init(d, 0.7, seed=seed)
    for _ in range(2):
        es.tell(xs := es.ask(), np.random.default_rng(seed).standard_normal(es.popsize))
    xs = es.ask()
    losses = np.random.default_rng(seed + 1).standard_normal(es.popsize)
    a, b, c = es.clone(), es.clone(), es.clone()
    a.tell(xs, losses)
    b.tell(xs, 2 * losses + 1)
    c.tell(xs, scale * np.exp(losses) + shift)
    assert _state_equal(a, b)
    assert _state_equal(a, c)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), d=st.integers(1, 8), gens=st.integers(1, 30))
def test_covariance_stays_positive_definite(seed, d, gens):
    rng = np.random.default_rng(seed)
    es = cma_init(d, 0.5, seed=seed)
    for _ in range(gens):
        xs = es.ask()
        es.tell(xs, rng.standard_normal(es.popsize) * rng.choice([1e-8, 1.0, 1e8]))
        assert np.linalg.eigvalsh(es.C).min() > 0
        assert es.sigma > 0
        assert np.allclose(es.C, es.C.T)


def test_sphere_converges():
    es = fmin(sphere, 20, 0.5, budget=20_000, seed=0)
    assert es.evaluations <= 20_000
    assert es.best_loss < 1e-8


def test_rosenbrock_converges():
    es = fmin(rosenbrock, 10, 0.5, budget=100_000, seed=0)
    assert es.best_loss < 1e-4


def test_translation_equivariance():
    c = np.linspace(-1, 1, 6)
    a = fmin(sphere, 6, 0.5, budget=6000, seed=3)
    b = fmin(lambda x: sphere(x - c), 6, 0.5, budget=6000, seed=3, mean=c)
    assert np.allclose(b.mean - c, a.mean, atol=1e-6)


def test_replay_is_deterministic():
    a = fmin(rosenbrock, 5, 0.3, budget=2000, seed=9)
    b = fmin(rosenbrock, 5, 0.3, budget=2000, seed=9)
    assert _state_equal(a, b)
    assert a.best_loss == b.best_loss
