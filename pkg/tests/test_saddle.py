import math

import numpy as np
import pytest
from scipy.optimize import minimize

from kmprox.measure import DiscreteMeasure, tv_norm
from kmprox.oracle import finite_difference_check
from kmprox.rkhs import Kernel, RkhsFunction, mmd
from kmprox.saddle import (BlockLipschitz, MmdMatchingGame, NoNoiseSourceError, SaddleProblem,
                           SaddleState, make_mmd_matching_game, random_state)
from kmprox.solver import duality_gap

from conftest import matching_instance, toy_dro

G1 = Kernel("gaussian", 1.0)


def two_atom_game(**kw):
    return make_mmd_matching_game(G1, [0.0, 1.0], DiscreteMeasure.from_weights([0.0, 1.0], [0.3, 0.7]), **kw)


def test_value_zero_at_f_zero(matching, rng):
    for _ in range(5):
        u = random_state(matching, rng)
        assert matching.value(u.replace(f=RkhsFunction.zero(matching.kernel))) == 0.0
    assert matching.value(matching.saddle_point()) == 0.0


def test_derivatives_vanish_at_saddle(matching):
    d = matching.derivatives(matching.saddle_point())
    assert d.d_f.norm() < 1e-12
    np.testing.assert_allclose(d.d_mu, 0.0)


def test_dmu_is_f_at_atoms(matching, rng):
    u = random_state(matching, rng)
    np.testing.assert_allclose(matching.derivatives(u).d_mu, u.f(matching.atoms), rtol=1e-12)


def test_closed_form_gap_example():
    g = two_atom_game()
    u = SaddleState(f=RkhsFunction.zero(G1), mu=DiscreteMeasure.uniform([0.0, 1.0]))
    expected = 0.5 * 0.08 * (1 - math.exp(-0.5))
    assert g.closed_form_gap(u.f, u.mu) == pytest.approx(expected, rel=1e-12)
    assert expected == pytest.approx(0.0157388, abs=1e-7)
    assert duality_gap(g, u) == pytest.approx(expected, rel=1e-9)
    assert g.closed_form_gap(RkhsFunction.zero(G1), g.nu) == pytest.approx(0.0, abs=1e-15)


def test_inner_minimum_is_half_mmd_sq(rng):
    g = two_atom_game()
    mu = DiscreteMeasure.from_weights([0.0, 1.0], [0.8, 0.2])
    target = -0.5 * mmd(mu, g.nu, G1) ** 2

    def obj(a):
        return g.value(SaddleState(f=RkhsFunction(g.atoms, a, G1), mu=mu))

    res = minimize(obj, rng.normal(size=2), method="BFGS", options={"gtol": 1e-12})
    assert res.fun == pytest.approx(target, abs=1e-10)
    best = -(mu.weights - g.nu.weights)
    assert obj(best) == pytest.approx(target, rel=1e-12)


def test_nu_must_live_on_atoms():
    with pytest.raises(ValueError):
        make_mmd_matching_game(G1, [0.0, 1.0], DiscreteMeasure.uniform([0.0, 2.0]))


def test_lipschitz_tables():
    assert matching_instance().lipschitz().L == 1.0
    assert two_atom_game(quad=0.0).lipschitz().entry("f", "f") == 0.0
    zero = BlockLipschitz(np.zeros((4, 4)))
    assert zero.L == 0.0
    with pytest.raises(ValueError):
        BlockLipschitz(-np.ones((4, 4)))


def test_base_problem_has_no_noise():
    p = SaddleProblem(G1, [0.0])
    with pytest.raises(NoNoiseSourceError):
        p.stochastic_derivatives(SaddleState(), 1, 0)


@pytest.mark.parametrize("quad", [1.0, 0.0, 2.5])
def test_finite_differences_matching(quad, rng):
    g = MmdMatchingGame(Kernel("laplacian", 0.8), np.linspace(-1, 1, 4),
                        DiscreteMeasure.from_weights(np.linspace(-1, 1, 4), [0.1, 0.2, 0.3, 0.4]), quad=quad)
    for _ in range(50):
        u = random_state(g, rng)
        for block in g.blocks:
            assert finite_difference_check(g, u, block) <= 1e-6


def _segment_points(p, u, v, block, t):
    if block in ("theta",):
        return u.replace(theta=(1 - t) * u.theta + t * v.theta)
    if block in ("f", "h"):
        return u.replace(**{block: (1 - t) * getattr(u, block) + t * getattr(v, block)})
    return u.replace(mu=p.measure((1 - t) * u.mu.weights + t * v.mu.weights))


@pytest.mark.parametrize("make", [matching_instance, lambda: toy_dro(), lambda: toy_dro("custom-table",
                         {"b": np.linspace(0, 1, 10), "g": np.linspace(-1, 1, 10)[:, None], "c": np.ones(10)})])
def test_convexity_probes(make, rng):
    p = make()
    for _ in range(30):
        u, v = random_state(p, rng), random_state(p, rng)
        for block in p.blocks:
            mid = p.value(_segment_points(p, u, v, block, 0.5))
            ends = 0.5 * (p.value(u) + p.value(_segment_points(p, u, v, block, 1.0)))
            if block in ("theta", "f"):
                assert mid <= ends + 1e-9
            else:
                assert mid >= ends - 1e-9


def test_matching_lipschitz_certificate(matching, rng):
    lip = matching.lipschitz()
    for _ in range(100):
        u, v = random_state(matching, rng, scale=1.0), random_state(matching, rng, scale=1.0)
        du, dv = matching.derivatives(u), matching.derivatives(v)
        df = (u.f - v.f).norm()
        tv = tv_norm(u.mu.weights - v.mu.weights)
        assert (du.d_f - dv.d_f).norm() <= lip.entry("f", "f") * df + lip.entry("f", "mu") * tv + 1e-9
        assert np.abs(du.d_mu - dv.d_mu).max() <= lip.entry("mu", "f") * df + 1e-9


def test_noise_zero_sigma_is_exact(matching, rng):
    u = random_state(matching, rng)
    a, b = matching.derivatives(u), matching.stochastic_derivatives(u, 1, 5)
    np.testing.assert_array_equal(a.d_mu, b.d_mu)
    assert (a.d_f - b.d_f).norm() == 0.0


def test_noise_determinism_and_large_batch(rng):
    g = matching_instance(noise_sigma2=0.01)
    u = random_state(g, rng)
    a, b = g.stochastic_derivatives(u, 3, 99), g.stochastic_derivatives(u, 3, 99)
    np.testing.assert_array_equal(a.d_mu, b.d_mu)
    np.testing.assert_array_equal(a.d_f.coefficients, b.d_f.coefficients)
    exact = g.derivatives(u)
    batch = 100_000
    est = g.stochastic_derivatives(u, batch, 1)
    sig = math.sqrt(0.005)
    assert (est.d_f - exact.d_f).norm() <= 3 * sig / math.sqrt(batch)
    assert np.abs(est.d_mu - exact.d_mu).max() <= 3 * sig / math.sqrt(batch)


def test_noise_variance_matches_declaration(rng):
    g = matching_instance(noise_sigma2=0.01)
    u = random_state(g, rng)
    exact = g.derivatives(u)
    ef, emu = [], []
    for s in range(4000):
        d = g.stochastic_derivatives(u, 1, s)
        ef.append((d.d_f - exact.d_f).norm_sq())
        emu.append(np.abs(d.d_mu - exact.d_mu).max() ** 2)
    declared = g.noise_variances(1)
    # sample means are within a few standard errors of the declared variances
    assert np.mean(ef) == pytest.approx(declared["f"], rel=0.1)
    assert np.mean(emu) == pytest.approx(declared["mu"], rel=0.1)
    assert g.noise_variances(10)["f"] == pytest.approx(declared["f"] / 10)
