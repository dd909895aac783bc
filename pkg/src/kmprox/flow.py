"""Explicit-Euler integrators for RKHS gradient flows and the coupled reaction/RKHS system."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .measure import DiscreteMeasure, md_step_measure
from .rkhs import RkhsFunction, dictionary_compress
from .saddle import SaddleProblem, SaddleState


class FlowStepError(ValueError):
    """Step size violates the positivity cap of the reaction update."""


@dataclass(frozen=True)
class FlowState:
    t: float
    f: RkhsFunction
    mu: DiscreteMeasure | None = None


@dataclass(frozen=True, eq=False)
class QuadraticEnergy:
    """``V(f) = lam/2 ||f - target||^2``; lam-convex with minimizer ``target``."""

    target: RkhsFunction
    lam: float = 1.0

    def __call__(self, f: RkhsFunction) -> float:
        return 0.5 * self.lam * (f - self.target).norm_sq()

    def gradient(self, f: RkhsFunction) -> RkhsFunction:
        return self.lam * (f - self.target)

    @property
    def minimizer(self) -> RkhsFunction:
        return self.target

    def exact(self, f0: RkhsFunction, t: float) -> RkhsFunction:
        return self.target + math.exp(-self.lam * t) * (f0 - self.target)


def rkhs_flow_step(V, s: FlowState, dt: float) -> FlowState:
    if not dt > 0:
        raise ValueError("time step must be positive")
    return FlowState(s.t + dt, dictionary_compress(s.f - dt * V.gradient(s.f)), s.mu)


def rkhs_flow(V, f0: RkhsFunction, dt: float, T: float, record_every: int = 1) -> list[FlowState]:
    steps = int(round(T / dt))
    s = FlowState(0.0, f0)
    out = [s]
    for k in range(1, steps + 1):
        s = rkhs_flow_step(V, s, dt)
        # times accumulate by multiplication to avoid drift from repeated addition
        s = FlowState(k * dt, s.f, s.mu)
        if k % record_every == 0 or k == steps:
            out.append(s)
    return out


def reaction_step_cap(g, w) -> float:
    """Largest step keeping the linearized reaction update positive."""
    dev = np.abs(np.asarray(g) - w @ g).max()
    return math.inf if dev == 0 else 1.0 / (2.0 * dev)


def interacting_flow_step(problem: SaddleProblem, s: FlowState, dt: float) -> FlowState:
    """One simultaneous Euler step: f descends, mu follows the reaction equation.

    The measure update is ``w_i <- w_i exp(dt (g_i - sum_j w_j g_j))`` followed by
    renormalization, with ``g = F'_mu`` at the atoms.
    """
    if not dt > 0:
        raise ValueError("time step must be positive")
    if tuple(problem.blocks) != ("f", "mu") or s.mu is None:
        raise ValueError(f"interacting flow needs blocks (f, mu), got {problem.blocks}")
    d = problem.derivatives(SaddleState(f=s.f, mu=s.mu))
    g = np.asarray(d.d_mu, float)
    w = s.mu.weights
    cap = reaction_step_cap(g, w)
    if dt > cap:
        raise FlowStepError(f"dt={dt:.3g} exceeds positivity cap {cap:.3g}")
    # centering is a constant shift in log space; normalization removes it
    mu_new = md_step_measure(s.mu, -(g - w @ g), dt)
    f_new = dictionary_compress(s.f - dt * d.d_f)
    return FlowState(s.t + dt, f_new, mu_new)


def interacting_flow(problem: SaddleProblem, f0: RkhsFunction, mu0: DiscreteMeasure, dt: float,
                     T: float, record_every: int = 1) -> list[FlowState]:
    steps = int(round(T / dt))
    s = FlowState(0.0, f0, mu0)
    out = [s]
    for k in range(1, steps + 1):
        s = interacting_flow_step(problem, s, dt)
        s = FlowState(k * dt, s.f, s.mu)
        if k % record_every == 0 or k == steps:
            out.append(s)
    return out


def m_lambda(lam: float, tau):
    """``int_0^tau exp(-lam (tau - s)) ds``."""
    tau = np.asarray(tau, float)
    if lam == 0:
        return tau
    return -np.expm1(-lam * tau) / lam


def evi_residual(V, trajectory: list[FlowState], h_ref: RkhsFunction, lam: float | None = None) -> float:
    """Max over recorded pairs ``s < t`` of the integrated EVI defect (<= 0 for exact flows)."""
    if not trajectory:
        raise ValueError("empty trajectory")
    lam = V.lam if lam is None else lam
    if len(trajectory) == 1:
        return 0.0
    t = np.array([s.t for s in trajectory])
    d2 = np.array([(s.f - h_ref).norm_sq() for s in trajectory])
    Vt = np.array([V(s.f) for s in trajectory])
    Vh = V(h_ref)
    tau = t[None, :] - t[:, None]           # rows s, columns t
    later = tau > 0
    tau_pos = np.where(later, tau, 0.0)
    R = 0.5 * d2[None, :] - 0.5 * np.exp(-lam * tau_pos) * d2[:, None] - m_lambda(lam, tau_pos) * (Vh - Vt[None, :])
    return float(R[later].max())


def write_trajectory_csv(path, trajectory: list[FlowState], energy, with_weights: bool = False):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = ["t", "norm_f", "energy"]
        m = trajectory[0].mu.size if with_weights and trajectory[0].mu is not None else 0
        header += [f"w{i}" for i in range(m)]
        w.writerow(header)
        for s in trajectory:
            row = [repr(float(s.t)), repr(s.f.norm()), repr(float(energy(s)))]
            if m:
                row += [repr(float(x)) for x in s.mu.weights]
            w.writerow(row)
