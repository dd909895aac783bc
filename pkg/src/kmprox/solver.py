"""Kernel mirror prox: extragradient iterations over all active blocks."""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .measure import DiscreteMeasure, md_step_measure
from .rkhs import HilbertBall, RkhsFunction, dictionary_compress, inner, md_step_hilbert
from .saddle import (BLOCKS, BlockDerivatives, Box, GapSets, InfeasibleStateError, SaddleProblem,
                     SaddleState)

DEFAULT_ETA_MAX = 1.0
GAP_THETA_ITERS = 500
GAP_THETA_TOL = 1e-9


@dataclass(frozen=True)
class StepSizes:
    theta: float
    f: float
    mu: float
    h: float
    bound: float | None = None  # guarantee attached to the rule that produced the steps

    def __post_init__(self):
        for b in BLOCKS:
            v = getattr(self, b)
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"step size for block {b!r} must be positive and finite, got {v}")

    @classmethod
    def uniform(cls, eta: float, bound: float | None = None) -> StepSizes:
        return cls(eta, eta, eta, eta, bound)

    def get(self, block: str) -> float:
        return getattr(self, block)

    def to_dict(self) -> dict:
        return {b: getattr(self, b) for b in BLOCKS} | {"bound": self.bound}


def step_size_theorem(L: float, eta_max: float = DEFAULT_ETA_MAX) -> StepSizes:
    """``eta = 1 / (16 L)`` on every block; ``eta_max`` when ``L = 0``."""
    if L < 0:
        raise ValueError("L must be nonnegative")
    return StepSizes.uniform(eta_max if L == 0 else 1.0 / (16.0 * L))


def step_size_diameter(L: float, sigma2: float, omega_sq: float, N: int, *,
                       rule: str = "printed", eta_max: float = DEFAULT_ETA_MAX) -> StepSizes:
    """Fixed-horizon step size using the squared diameter ``omega_sq`` of the gap set.

    ``rule="printed"`` uses ``min{1/(16L), Omega * sigma / sqrt(6N)}``;
    ``rule="optimal"`` uses ``min{1/(16L), Omega / (sigma * sqrt(6N))}``, the
    minimizer of ``Omega^2 / (2 N eta) + 3 sigma^2 eta``.
    """
    if N < 1 or L < 0 or sigma2 < 0 or omega_sq < 0:
        raise ValueError("need N >= 1 and nonnegative L, sigma2, omega_sq")
    base = step_size_theorem(L, eta_max)
    if sigma2 == 0:
        return base
    omega, sigma = math.sqrt(omega_sq), math.sqrt(sigma2)
    if rule == "printed":
        candidate = omega * sigma / math.sqrt(6 * N)
    elif rule == "optimal":
        candidate = omega / (sigma * math.sqrt(6 * N))
    else:
        raise ValueError(f"unknown diameter rule {rule!r}")
    eta = min(base.f, candidate) if candidate > 0 else base.f
    bound = max(8 * L * omega_sq / N, math.sqrt(3 * sigma2 * omega_sq / (2 * N)))
    return StepSizes.uniform(eta, bound)


def theorem_bound(L: float, diameter_sq: float, N: int, sigma2: float = 0.0) -> float:
    """``8 L D^2 / N`` plus the ``3 sigma^2 / (16 L)`` vicinity term when noisy."""
    det = 8.0 * L * diameter_sq / N
    if sigma2 == 0:
        return det
    return det + 3.0 * sigma2 / (16.0 * L)


# --------------------------------------------------------------------------- steps


def mirror_directions(d: BlockDerivatives) -> dict:
    """Arguments fed to the mirror steps: ``F'`` for min blocks, ``-F'`` for max blocks."""
    out = {}
    if d.d_theta is not None:
        out["theta"] = d.d_theta
    if d.d_f is not None:
        out["f"] = d.d_f
    if d.d_mu is not None:
        out["mu"] = -d.d_mu
    if d.d_h is not None:
        out["h"] = -d.d_h
    return out


def mirror_step(problem: SaddleProblem, ut: SaddleState, d: BlockDerivatives, steps: StepSizes,
                compress_tol: float = 0.0) -> SaddleState:
    xi = mirror_directions(d)
    new = {}
    if ut.theta is not None:
        new["theta"] = problem.theta_box.project(ut.theta - steps.theta * xi["theta"])
    if ut.f is not None:
        new["f"] = dictionary_compress(md_step_hilbert(ut.f, xi["f"], steps.f, problem.f_ball), compress_tol)
    if ut.mu is not None:
        new["mu"] = md_step_measure(ut.mu, xi["mu"], steps.mu)
    if ut.h is not None:
        new["h"] = dictionary_compress(md_step_hilbert(ut.h, xi["h"], steps.h, problem.h_ball), compress_tol)
    return ut.replace(**new)


class _Averager:
    """Running sum of leader iterates; mu is averaged in linear-domain weights."""

    def __init__(self):
        self.n = 0
        self.theta = None
        self.f = None
        self.w = None
        self.h = None
        self.atoms = None

    def add(self, u: SaddleState):
        self.n += 1
        if u.theta is not None:
            self.theta = u.theta.copy() if self.theta is None else self.theta + u.theta
        if u.f is not None:
            self.f = u.f if self.f is None else dictionary_compress(self.f + u.f)
        if u.mu is not None:
            self.atoms = u.mu.atoms
            self.w = u.mu.weights if self.w is None else self.w + u.mu.weights
        if u.h is not None:
            self.h = u.h if self.h is None else dictionary_compress(self.h + u.h)

    def mean(self) -> SaddleState:
        n = self.n
        mu = None
        if self.w is not None:
            w = self.w / n
            mu = DiscreteMeasure.from_weights(self.atoms, w / w.sum())
        return SaddleState(
            theta=None if self.theta is None else self.theta / n,
            f=None if self.f is None else self.f * (1.0 / n),
            mu=mu,
            h=None if self.h is None else self.h * (1.0 / n),
        )


def _checkpoints(cadence, N: int) -> set[int]:
    if cadence is None:
        return set()
    if cadence == "final":
        return {N}
    if cadence == "every":
        return set(range(1, N + 1))
    if cadence == "log":
        grid = np.unique(np.round(np.geomspace(1, N, num=max(2, int(4 * math.log10(N)) + 1))).astype(int))
        return set(int(k) for k in grid) | {N}
    pts = {int(k) for k in cadence}
    if any(k < 1 or k > N for k in pts):
        raise ValueError(f"gap checkpoints must lie in [1, {N}]")
    return pts


@dataclass
class RunRecord:
    average: SaddleState
    N: int
    steps: StepSizes
    gap_trace: list[dict] = field(default_factory=list)
    history: list[SaddleState] = field(default_factory=list)
    last_leader: SaddleState | None = None
    last_extrapolated: SaddleState | None = None
    seed: int | None = None
    wall_time_s: float = 0.0
    config: dict | None = None

    def gap_at(self, n: int) -> float:
        for row in self.gap_trace:
            if row["iter"] == n:
                return row["gap"]
        raise KeyError(f"no gap recorded at iteration {n}")

    def to_dict(self, timing: bool = False) -> dict:
        """Plain-data view; timing is left out by default so reruns serialize identically."""
        out = {
            "N": self.N,
            "seed": self.seed,
            "steps": self.steps.to_dict(),
            "average": state_to_dict(self.average),
            "gap_trace": [{k: r[k] for k in ("iter", "gap", "value_F")} for r in self.gap_trace],
            "config": self.config,
        }
        if timing:
            out["wall_time_s"] = self.wall_time_s
        return out

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, **kw)

    def write_gap_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "gap", "value_F", "wall_ms"])
            for r in self.gap_trace:
                w.writerow([r["iter"], repr(r["gap"]), repr(r["value_F"]), f"{r['wall_ms']:.3f}"])


def state_to_dict(u: SaddleState) -> dict:
    out = {}
    if u.theta is not None:
        out["theta"] = np.asarray(u.theta).tolist()
    for b in ("f", "h"):
        g = getattr(u, b)
        if g is not None:
            out[b] = {"dictionary": g.dictionary.tolist(), "coefficients": g.coefficients.tolist()}
    if u.mu is not None:
        out["mu"] = u.mu.to_dict()
    return out


def _run(problem: SaddleProblem, u0: SaddleState, steps: StepSizes, N: int,
         oracle: Callable[[SaddleState, int, int], BlockDerivatives], *, gap_sets: GapSets | None,
         cadence, history_every: int, compress_tol: float, seed, config) -> RunRecord:
    if N < 1:
        raise ValueError("N must be at least 1")
    problem.check_feasible(u0)
    checkpoints = _checkpoints(cadence, N)
    if checkpoints and gap_sets is None:
        gap_sets = problem.default_gap_sets()
    avg = _Averager()
    ut = u0
    trace, history = [], []
    t0 = time.perf_counter()
    u = ut
    for k in range(N):
        u = mirror_step(problem, ut, oracle(ut, k, 0), steps, compress_tol)
        ut = mirror_step(problem, ut, oracle(u, k, 1), steps, compress_tol)
        avg.add(u)
        if history_every and k % history_every == 0:
            history.append(u)
        if (k + 1) in checkpoints:
            ubar = avg.mean()
            trace.append({
                "iter": k + 1,
                "gap": duality_gap(problem, ubar, gap_sets),
                "value_F": problem.value(ubar),
                "wall_ms": 1e3 * (time.perf_counter() - t0),
            })
    return RunRecord(average=avg.mean(), N=N, steps=steps, gap_trace=trace, history=history,
                     last_leader=u, last_extrapolated=ut, seed=seed,
                     wall_time_s=time.perf_counter() - t0, config=config)


def kmp_run(problem: SaddleProblem, u0: SaddleState, steps: StepSizes, N: int, *,
            gap_sets: GapSets | None = None, cadence="final", history_every: int = 0,
            compress_tol: float = 0.0, config: dict | None = None) -> RunRecord:
    """Deterministic mirror prox; returns the average of the leader iterates ``u_k``.

    Gaps are evaluated at the iterations selected by ``cadence`` ("every",
    "log", "final", an explicit list, or None for no gaps); evaluation never
    touches solver state.
    """
    return _run(problem, u0, steps, N, lambda u, k, j: problem.derivatives(u),
                gap_sets=gap_sets, cadence=cadence, history_every=history_every,
                compress_tol=compress_tol, seed=None, config=config)


def derivative_seed(seed: int, k: int, j: int) -> np.random.Generator:
    """Counter-based stream for call ``j`` (0 = leader, 1 = extrapolation) of iteration ``k``."""
    return np.random.default_rng([seed, k, j])


def kmp_run_stochastic(problem: SaddleProblem, u0: SaddleState, steps: StepSizes, N: int,
                       batch: int, seed: int, *, gap_sets: GapSets | None = None, cadence="final",
                       history_every: int = 0, compress_tol: float = 0.0,
                       config: dict | None = None) -> RunRecord:
    """Mirror prox with mini-batched stochastic derivatives; deterministic given ``seed``."""
    if batch < 1:
        raise ValueError("batch must be at least 1")
    problem.noise_variances(batch)  # raises if the problem has no noise source

    def oracle(u, k, j):
        return problem.stochastic_derivatives(u, batch, derivative_seed(seed, k, j))

    return _run(problem, u0, steps, N, oracle, gap_sets=gap_sets, cadence=cadence,
                history_every=history_every, compress_tol=compress_tol, seed=seed, config=config)


# --------------------------------------------------------------------------- gap


def _ball_sup_linear(g: RkhsFunction, ball: HilbertBall) -> float:
    """``max_{h in ball} <g, h>``."""
    c = 0.0 if ball.center is None else inner(g, ball.center)
    return c + ball.radius * g.norm()


def _ball_argmin_quadratic(a: float, g: RkhsFunction, ball: HilbertBall) -> RkhsFunction:
    """Minimizer of ``a/2 ||f||^2 + <g, f>`` over ``ball``."""
    if a > 0:
        return ball.project(g * (-1.0 / a))
    ng = g.norm()
    center = g * 0.0 if ball.center is None else ball.center
    if ng == 0.0:
        return center
    return center + g * (-ball.radius / ng)


def _project_gradient_min(phi: Callable[[np.ndarray], float], grad: Callable[[np.ndarray], np.ndarray],
                          box: Box, x0: np.ndarray, step0: float) -> np.ndarray:
    """Projected gradient descent with backtracking on a box."""
    x = box.project(np.asarray(x0, float))
    fx = phi(x)
    step = step0
    for _ in range(GAP_THETA_ITERS):
        g = grad(x)
        while True:
            y = box.project(x - step * g)
            fy = phi(y)
            d = y - x
            if fy <= fx + g @ d + (0.5 / step) * (d @ d) + 1e-15 or step < 1e-12:
                break
            step *= 0.5
        moved = float(np.linalg.norm(d))
        x, fx = y, fy
        if moved <= GAP_THETA_TOL:
            break
        step *= 1.5
    return x


def _check_in_sets(problem: SaddleProblem, u: SaddleState, sets: GapSets, tol: float = 1e-9):
    if u.theta is not None and not sets.U_theta.contains(u.theta, tol):
        raise InfeasibleStateError("averaged theta outside U_theta")
    for name, ball in (("f", sets.U_f), ("h", sets.U_h)):
        g = getattr(u, name)
        if g is not None and not math.isinf(ball.radius) and ball.distance_from_center(g) > ball.radius + tol:
            raise InfeasibleStateError(f"averaged {name} outside U_{name}")


def gap_components(problem: SaddleProblem, ubar: SaddleState, sets: GapSets) -> dict:
    """Both sides of the duality gap with their maximizers/minimizers."""
    _check_in_sets(problem, ubar, sets)
    F0 = problem.value(ubar)
    d = problem.derivatives(ubar)
    out = {"value": F0}

    upper = F0
    if ubar.mu is not None:
        best = int(np.argmax(d.d_mu))  # lowest index on ties
        upper += float(d.d_mu[best] - ubar.mu.weights @ d.d_mu)
        out["mu_best_atom"] = best
    if ubar.h is not None:
        upper += _ball_sup_linear(d.d_h, sets.U_h) - inner(d.d_h, ubar.h)
    out["upper"] = upper

    lower = F0
    if ubar.f is not None:
        a = problem.f_curvature
        g = dictionary_compress(d.d_f - a * ubar.f)
        fstar = _ball_argmin_quadratic(a, g, sets.U_f)
        lower += 0.5 * a * (fstar.norm_sq() - ubar.f.norm_sq()) + inner(g, fstar) - inner(g, ubar.f)
        out["f_min"] = fstar
    if ubar.theta is not None:
        def phi(t):
            return problem.value(ubar.replace(theta=t))

        def grad(t):
            return problem.derivatives(ubar.replace(theta=t)).d_theta

        L_tt = problem.lipschitz().entry("theta", "theta")
        theta_star = _project_gradient_min(phi, grad, sets.U_theta, ubar.theta,
                                           1.0 / L_tt if L_tt > 0 else DEFAULT_ETA_MAX)
        lower += phi(theta_star) - F0
        out["theta_min"] = theta_star
    out["lower"] = lower
    out["gap"] = upper - lower
    return out


def duality_gap(problem: SaddleProblem, ubar: SaddleState, sets: GapSets | None = None) -> float:
    """``max_{(mu,h) in U} F(ubar_min, .) - min_{(theta,f) in U} F(., ubar_max)``."""
    if sets is None:
        sets = problem.default_gap_sets()
    return float(gap_components(problem, ubar, sets)["gap"])


def gap_diameter_sq(problem: SaddleProblem, u0: SaddleState, sets: GapSets | None = None) -> float:
    return (sets or problem.default_gap_sets()).diameter_sq(u0)


def checkpoint_gaps(record: RunRecord, points: Sequence[int]) -> list[float]:
    return [record.gap_at(n) for n in points]
