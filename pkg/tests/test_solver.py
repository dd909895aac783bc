import math

import numpy as np
import pytest

from kmprox.measure import DiscreteMeasure
from kmprox.rkhs import HilbertBall, Kernel, RkhsFunction
from kmprox.saddle import (BlockDerivatives, BlockLipschitz, GapSets, InfeasibleStateError,
                           MmdMatchingGame, SaddleProblem, SaddleState, random_state)
from kmprox.solver import (StepSizes, duality_gap, gap_diameter_sq, kmp_run, kmp_run_stochastic,
                           step_size_diameter, step_size_theorem, theorem_bound)

from conftest import matching_instance, toy_dro


class ConstantProblem(SaddleProblem):
    """F identically zero on (f, mu)."""

    blocks = ("f", "mu")

    def value(self, u):
        return 0.0

    def derivatives(self, u):
        return BlockDerivatives(d_f=RkhsFunction(self.atoms, np.zeros(len(self.atoms)), self.kernel),
                                d_mu=np.zeros(len(self.atoms)))

    def lipschitz(self):
        return BlockLipschitz(np.zeros((4, 4)))


def test_step_size_theorem_examples():
    assert step_size_theorem(1.0).f == 0.0625
    assert step_size_theorem(0.0).mu == 1.0
    assert step_size_theorem(0.0, eta_max=0.3).f == 0.3
    assert step_size_theorem(16.0).theta == 1 / 256
    with pytest.raises(ValueError):
        step_size_theorem(-1.0)


def test_step_sizes_validate():
    with pytest.raises(ValueError):
        StepSizes.uniform(0.0)
    with pytest.raises(ValueError):
        StepSizes(0.1, 0.1, math.inf, 0.1)


def test_step_size_diameter_examples():
    assert step_size_diameter(1.0, 0.0, 1.0, 10).f == 1 / 16
    s = step_size_diameter(1.0, 1.0, 1.0, 6)
    assert s.f == 1 / 16
    assert s.bound == pytest.approx(max(8 / 6, math.sqrt(3 / 12)))
    assert step_size_diameter(1.0, 1.0, 1.0, 10**6).f == pytest.approx(1 / math.sqrt(6e6))
    assert step_size_diameter(1.0, 4.0, 1.0, 6, rule="optimal").f == pytest.approx(min(1 / 16, 1 / (2 * 6)))
    with pytest.raises(ValueError):
        step_size_diameter(1.0, 1.0, 1.0, 6, rule="other")


def test_theorem_bound():
    assert theorem_bound(1.0, 2.0, 100) == pytest.approx(0.16)
    assert theorem_bound(1.0, 2.0, 100, 0.01) == pytest.approx(0.16 + 0.03 / 16)


def test_zero_derivatives_fixed_point(rng):
    p = ConstantProblem(Kernel("gaussian", 1.0), np.arange(4.0), f_ball=HilbertBall(1.0))
    u0 = random_state(p, rng)
    rec = kmp_run(p, u0, StepSizes.uniform(0.5), 20)
    np.testing.assert_allclose(rec.average.mu.weights, u0.mu.weights, rtol=1e-14)
    assert (rec.average.f - u0.f).norm() < 1e-14


def test_saddle_is_stationary(matching):
    us = matching.saddle_point()
    rec = kmp_run(matching, us, step_size_theorem(1.0), 1)
    assert rec.last_leader.f.norm() == 0.0
    np.testing.assert_allclose(rec.last_leader.mu.weights, matching.nu.weights, rtol=1e-14)
    assert duality_gap(matching, us) == pytest.approx(0.0, abs=1e-9)


def test_gap_matches_closed_form_and_weak_duality(matching, rng):
    for _ in range(40):
        u = random_state(matching, rng)
        gap = duality_gap(matching, u)
        assert gap >= -1e-9
        assert gap == pytest.approx(matching.closed_form_gap(u.f, u.mu), rel=1e-9, abs=1e-12)


def test_gap_rejects_points_outside_sets(matching):
    far = RkhsFunction(matching.atoms, np.full(5, 5.0), matching.kernel)
    with pytest.raises(InfeasibleStateError):
        duality_gap(matching, SaddleState(f=far, mu=matching.nu))


def test_gap_weak_duality_dro(rng):
    p = toy_dro()
    for _ in range(10):
        assert duality_gap(p, random_state(p, rng)) >= -1e-9


def test_feasibility_preserved(rng):
    p = toy_dro(epsilon=0.5)
    rec = kmp_run(p, p.initial_state(), StepSizes.uniform(0.5), 40, history_every=1)
    for u in rec.history + [rec.last_extrapolated, rec.average]:
        p.check_feasible(u)
        assert u.f.norm() <= p.f_ball.radius + 1e-12
        assert u.h.norm() <= 1.0 + 1e-12
        assert abs(u.mu.weights.sum() - 1) < 1e-12


def test_average_uses_leaders_only(matching):
    rec = kmp_run(matching, matching.initial_state(), step_size_theorem(1.0), 30, history_every=1)
    w = np.mean([u.mu.weights for u in rec.history], axis=0)
    f = sum((u.f for u in rec.history[1:]), rec.history[0].f) * (1 / 30)
    np.testing.assert_allclose(rec.average.mu.weights, w, rtol=1e-12)
    assert (rec.average.f - f).norm() < 1e-12


def test_bound_at_n100(matching):
    u0 = matching.initial_state()
    D2 = gap_diameter_sq(matching, u0)
    assert D2 == pytest.approx(matching.f_ball.radius**2 + 2 * math.log(5))
    rec = kmp_run(matching, u0, step_size_theorem(1.0), 100)
    assert rec.gap_at(100) <= theorem_bound(1.0, D2, 100)


def test_cadence_options(matching):
    u0 = matching.initial_state()
    steps = step_size_theorem(1.0)
    assert [r["iter"] for r in kmp_run(matching, u0, steps, 5, cadence="every").gap_trace] == [1, 2, 3, 4, 5]
    assert kmp_run(matching, u0, steps, 100, cadence="log").gap_trace[-1]["iter"] == 100
    with pytest.raises(ValueError):
        kmp_run(matching, u0, steps, 5, cadence=[7])
    with pytest.raises(ValueError):
        kmp_run(matching, u0, steps, 0)


def test_stochastic_with_zero_noise_is_bit_identical(matching):
    u0 = matching.initial_state()
    a = kmp_run(matching, u0, step_size_theorem(1.0), 50, cadence=[10, 50])
    b = kmp_run_stochastic(matching, u0, step_size_theorem(1.0), 50, 1, 3, cadence=[10, 50])
    np.testing.assert_array_equal(a.average.mu.log_weights, b.average.mu.log_weights)
    np.testing.assert_array_equal(a.average.f.coefficients, b.average.f.coefficients)
    assert [r["gap"] for r in a.gap_trace] == [r["gap"] for r in b.gap_trace]


def test_stochastic_determinism():
    g = matching_instance(0.01)
    runs = [kmp_run_stochastic(g, g.initial_state(), step_size_theorem(1.0), 100, 2, 42, cadence=[100])
            for _ in range(2)]
    assert runs[0].to_json() == runs[1].to_json()
    other = kmp_run_stochastic(g, g.initial_state(), step_size_theorem(1.0), 100, 2, 43, cadence=[100])
    assert other.to_json() != runs[0].to_json()


def test_stochastic_requires_noise_source():
    p = ConstantProblem(Kernel("gaussian", 1.0), np.arange(3.0))
    with pytest.raises(Exception):
        kmp_run_stochastic(p, p.initial_state(), StepSizes.uniform(0.1), 5, 1, 0)


def test_stochastic_mean_gap_n200():
    g = matching_instance(0.01)
    u0 = g.initial_state()
    D2 = gap_diameter_sq(g, u0)
    gaps = [kmp_run_stochastic(g, u0, step_size_theorem(1.0), 200, 1, s).gap_trace[-1]["gap"]
            for s in range(20)]
    assert np.mean(gaps) <= 2 * theorem_bound(1.0, D2, 200, 0.01)


def test_stochastic_plateau():
    # with batch 1 the averaged gap stays in the noise vicinity instead of decaying to zero
    g = matching_instance(0.01)
    floor = 3 * 0.01 / 16 / 4
    gaps = [kmp_run_stochastic(g, g.initial_state(), step_size_theorem(1.0), 10_000, 1, s).gap_trace[-1]["gap"]
            for s in range(4)]
    assert np.mean(gaps) >= floor


def test_run_record_json_omits_timing(matching):
    rec = kmp_run(matching, matching.initial_state(), step_size_theorem(1.0), 5, cadence="every")
    d = rec.to_dict()
    assert "wall_time_s" not in d and all("wall_ms" not in r for r in d["gap_trace"])
    assert "wall_time_s" in rec.to_dict(timing=True)
