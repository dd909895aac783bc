import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import literal_slack, measure_step_terms, sharp_slack
from kmprox.measure import (DiscreteMeasure, kl_divergence, linear_functional, md_step_measure,
                            sample, tv_norm)

seeds = st.integers(0, 2**32 - 1)


def rand_measure(rng, atoms):
    return DiscreteMeasure.from_weights(atoms, rng.dirichlet(np.ones(len(atoms))))


def test_invariants_enforced():
    with pytest.raises(ValueError):
        DiscreteMeasure([0.0, 1.0], [0.0, 0.0])
    with pytest.raises(ValueError):
        DiscreteMeasure.from_weights([0.0, 1.0], [1.0, 0.0])
    with pytest.raises(ValueError):
        DiscreteMeasure.from_weights([], [])
    lw = DiscreteMeasure.from_log_weights([0.0, 1.0], [3.0, 3.0]).log_weights
    np.testing.assert_allclose(lw, np.log([0.5, 0.5]))


def test_tv_norm_examples():
    assert tv_norm([0.2, 0.3, 0.5]) == pytest.approx(1.0)
    assert tv_norm([0.0, 0.0]) == 0.0
    assert tv_norm(np.array([0.3, 0.7]) - np.array([0.5, 0.5])) == pytest.approx(0.4)


def test_kl_examples():
    atoms = [0.0, 1.0, 2.0]
    u = DiscreteMeasure.uniform(atoms)
    assert kl_divergence(u, u) == 0.0
    a = DiscreteMeasure.from_weights([0.0, 1.0], [2 / 3, 1 / 3])
    b = DiscreteMeasure.uniform([0.0, 1.0])
    assert kl_divergence(a, b) == pytest.approx(0.056633, abs=1e-6)
    assert kl_divergence(a, b) == pytest.approx((2 / 3) * math.log(4 / 3) + (1 / 3) * math.log(2 / 3), rel=1e-12)


def test_kl_atom_mismatch():
    with pytest.raises(ValueError):
        kl_divergence(DiscreteMeasure.uniform([0.0, 1.0]), DiscreteMeasure.uniform([0.0, 2.0]))


def test_md_step_examples():
    mu0 = DiscreteMeasure.uniform([0.0, 1.0])
    out = md_step_measure(mu0, [0.0, math.log(2)], 1.0)
    np.testing.assert_allclose(out.weights, [2 / 3, 1 / 3], rtol=1e-14)
    same = md_step_measure(mu0, [3.0, 3.0], 0.7)
    np.testing.assert_allclose(same.weights, mu0.weights, rtol=1e-14)
    tiny = md_step_measure(DiscreteMeasure.from_weights([0, 1, 2], [0.2, 0.3, 0.5]), [1.0, -2.0, 5.0], 1e-12)
    assert tv_norm(tiny.weights - np.array([0.2, 0.3, 0.5])) <= 1e-10


def test_md_step_errors():
    mu0 = DiscreteMeasure.uniform([0.0, 1.0])
    with pytest.raises(ValueError):
        md_step_measure(mu0, [0.0, 1.0], 0.0)
    with pytest.raises(ValueError):
        md_step_measure(mu0, [0.0, float("nan")], 1.0)
    with pytest.raises(ValueError):
        md_step_measure(mu0, [0.0, 1.0, 2.0], 1.0)


def test_linear_functional_examples():
    mu = DiscreteMeasure.from_weights([0.0, 1.0], [0.3, 0.7])
    assert linear_functional(mu, [1.0, 1.0]) == pytest.approx(1.0)
    assert linear_functional(mu, [0.0, 0.0]) == 0.0
    assert linear_functional(mu, [1.0, -1.0]) == pytest.approx(-0.4)
    with pytest.raises(ValueError):
        linear_functional(mu, [1.0])


def test_sample_examples():
    point = DiscreteMeasure.from_weights([[0.0], [3.0]], [1.0 - 1e-300, 1e-300])
    assert np.all(sample(point, 50, 0) == 0.0)
    u = DiscreteMeasure.uniform([0.0, 1.0])
    x = sample(u, 100_000, 3)
    assert abs(x.mean() - 0.5) <= 0.01
    np.testing.assert_array_equal(sample(u, 1000, 11), sample(u, 1000, 11))
    with pytest.raises(ValueError):
        sample(u, 0, 1)


def test_json_round_trip(rng):
    mu = rand_measure(rng, rng.normal(size=(4, 2)))
    back = DiscreteMeasure.from_json(mu.to_json())
    np.testing.assert_array_equal(back.atoms, mu.atoms)
    np.testing.assert_array_equal(back.log_weights, mu.log_weights)


@settings(max_examples=100, deadline=None)
@given(seeds, st.floats(1e-6, 1e4))
def test_md_step_stays_on_simplex(seed, eta):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(1, 10))
    mu0 = rand_measure(rng, np.arange(m))
    out = md_step_measure(mu0, rng.normal(size=m) * 50, eta)
    assert np.all(np.isfinite(out.log_weights))
    assert np.all(out.weights > 0)
    assert abs(out.weights.sum() - 1.0) <= 1e-10


@settings(max_examples=100, deadline=None)
@given(seeds)
def test_composition(seed):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(2, 8))
    mu0 = rand_measure(rng, np.arange(m))
    x1, x2 = rng.normal(size=m), rng.normal(size=m)
    eta = rng.uniform(0.01, 3)
    two = md_step_measure(md_step_measure(mu0, x1, eta), x2, eta)
    one = md_step_measure(mu0, x1 + x2, eta)
    np.testing.assert_allclose(two.log_weights, one.log_weights, atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(seeds)
def test_pinsker(seed):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(2, 10))
    a, b = rand_measure(rng, np.arange(m)), rand_measure(rng, np.arange(m))
    assert tv_norm(a.weights - b.weights) ** 2 <= 2 * kl_divergence(a, b) + 1e-12


@settings(max_examples=300, deadline=None)
@given(seeds)
def test_measure_three_point_sharp_form(seed):
    assert sharp_slack(measure_step_terms(np.random.default_rng(seed))) >= -1e-9


def test_measure_three_point_literal_form_counterexample():
    # no derivative error and hat-mu = mu: the left side vanishes, the Bregman part is
    # KL(mu, tilde mu) ~ tv^2 / 2, which cannot pay for 2 tv^2
    mt = DiscreteMeasure.uniform([0.0, 1.0])
    mu = md_step_measure(mt, [0.0, 0.1], 1.0)
    tv = tv_norm(mu.weights - mt.weights)
    assert kl_divergence(mu, mt) - 2 * tv**2 < 0
