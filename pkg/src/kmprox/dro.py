"""MMD-constrained distributionally robust optimization as a 4-block saddle problem.

The problem is

    min_{theta, f} max_{mu, ||h|| <= 1}  (1/n) sum_i f(x_i) + eps <h, f> + E_mu[l(theta; x) - f(x)]

with ``mu`` on a fixed atom grid that contains every data point.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .measure import DiscreteMeasure, sample_indices
from .rkhs import HilbertBall, Kernel, RkhsFunction, as_points, dictionary_compress, inner, mmd
from .saddle import BlockDerivatives, BlockLipschitz, Box, SaddleProblem, SaddleState

RISK_ITERS = 2000
RISK_TOL = 1e-8
DYKSTRA_ITERS = 5000
DYKSTRA_TOL = 1e-13


class OffGridError(ValueError):
    def __init__(self, row: int, point):
        super().__init__(f"data row {row} ({np.asarray(point).tolist()}) is not an atom of the grid")
        self.row = row


class EpsilonPreconditionWarning(UserWarning):
    pass


def _softplus(x):
    return np.logaddexp(0.0, x)


@dataclass(frozen=True)
class LossSpec:
    """A loss ``l(theta; x)`` with gradient in ``theta`` and its smoothness constants.

    kinds:
      ``logistic``          negative log-likelihood of a logistic location model,
                            ``sum_j softplus(r_j) + softplus(-r_j)``, ``r = (theta - x) / scale``
      ``clipped-quadratic`` ``min(||theta - x||^2, cap)``; non-convex in ``x`` (and in theta
                            past the cap), so runs with it are not certified
      ``custom-table``      per-atom table ``b_i + g_i . theta + c_i/2 ||theta||^2`` defined
                            only on the grid atoms
    """

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("logistic", "clipped-quadratic", "custom-table"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.kind == "logistic" and not self.params.get("scale", 1.0) > 0:
            raise ValueError("logistic scale must be positive")
        if self.kind == "clipped-quadratic" and not self.params.get("cap", 1.0) > 0:
            raise ValueError("clipped-quadratic cap must be positive")
        if self.kind == "custom-table":
            for key in ("b", "g", "c"):
                if key not in self.params:
                    raise ValueError(f"custom-table loss needs parameter {key!r}")
            if np.any(np.asarray(self.params["c"], float) < 0):
                raise ValueError("custom-table curvatures must be nonnegative")

    @property
    def convex_in_theta(self) -> bool:
        return self.kind != "clipped-quadratic"

    # values/gradients on a batch of atoms X (n, d); ``idx`` locates X on the grid
    def values(self, theta, X, idx=None) -> np.ndarray:
        theta = np.asarray(theta, float)
        if self.kind == "logistic":
            r = (theta[None, :] - X) / self.params.get("scale", 1.0)
            return (_softplus(r) + _softplus(-r)).sum(axis=1)
        if self.kind == "clipped-quadratic":
            return np.minimum(((theta[None, :] - X) ** 2).sum(axis=1), self.params.get("cap", 1.0))
        b, g, c = self._table(idx)
        return b + g @ theta + 0.5 * c * (theta @ theta)

    def gradients(self, theta, X, idx=None) -> np.ndarray:
        theta = np.asarray(theta, float)
        if self.kind == "logistic":
            s = self.params.get("scale", 1.0)
            return np.tanh((theta[None, :] - X) / (2.0 * s)) / s
        if self.kind == "clipped-quadratic":
            diff = theta[None, :] - X
            inside = (diff**2).sum(axis=1) < self.params.get("cap", 1.0)
            return 2.0 * diff * inside[:, None]
        b, g, c = self._table(idx)
        return g + c[:, None] * theta[None, :]

    def _table(self, idx):
        if idx is None:
            raise ValueError("custom-table losses are only defined on grid atoms")
        b = np.asarray(self.params["b"], float)[idx]
        g = np.atleast_2d(np.asarray(self.params["g"], float))
        g = (g.T if g.shape[0] == 1 and len(np.asarray(self.params["b"])) > 1 else g)[idx]
        c = np.asarray(self.params["c"], float)[idx]
        return b, g, c

    def grad_bound(self, theta_dim: int, box: Box | None = None) -> float:
        """``L0 = sup_{x, theta} ||grad_theta l||``."""
        if self.kind == "logistic":
            return math.sqrt(theta_dim) / self.params.get("scale", 1.0)
        if self.kind == "clipped-quadratic":
            return 2.0 * math.sqrt(self.params.get("cap", 1.0))
        g = np.atleast_2d(np.asarray(self.params["g"], float))
        b = np.asarray(self.params["b"], float)
        g = g.T if g.shape[0] == 1 and len(b) > 1 else g
        c = np.asarray(self.params["c"], float)
        corner = np.maximum(np.abs(box.low), np.abs(box.high)) if box is not None else 0.0
        return float(max(np.linalg.norm(gi) + ci * np.linalg.norm(corner) for gi, ci in zip(g, c)))

    def curvature_bounds(self, n_atoms: int) -> np.ndarray:
        """Per-atom Lipschitz constants ``L(x)`` of ``grad_theta l(.; x)``."""
        if self.kind == "logistic":
            return np.full(n_atoms, 0.5 / self.params.get("scale", 1.0) ** 2)
        if self.kind == "clipped-quadratic":
            return np.full(n_atoms, 2.0)
        return np.asarray(self.params["c"], float)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": self.params}


def locate_on_grid(points, grid, tol: float = 1e-12) -> np.ndarray:
    """Grid index of every point; raises ``OffGridError`` naming the first offending row."""
    P, G = as_points(points), as_points(grid)
    if P.shape[1] != G.shape[1]:
        raise ValueError(f"data dimension {P.shape[1]} != grid dimension {G.shape[1]}")
    d = np.abs(P[:, None, :] - G[None, :, :]).max(axis=2)
    idx = d.argmin(axis=1)
    bad = np.flatnonzero(d[np.arange(len(P)), idx] > tol)
    if len(bad):
        raise OffGridError(int(bad[0]), P[bad[0]])
    return idx


class DroProblem(SaddleProblem):
    blocks = ("theta", "f", "mu", "h")
    f_curvature = 0.0

    def __init__(self, loss: LossSpec, data, epsilon: float, kernel: Kernel, grid,
                 theta_box: Box, *, f_radius: float = 10.0, printed_sign: bool = False):
        if not epsilon > 0:
            raise ValueError("ambiguity radius epsilon must be positive")
        super().__init__(kernel, grid, theta_box=theta_box, f_ball=HilbertBall(f_radius),
                         h_ball=HilbertBall(1.0))
        self.loss = loss
        self.data = as_points(data)
        if len(self.data) < 1:
            raise ValueError("need at least one data point")
        self.data_idx = locate_on_grid(self.data, self.atoms)
        self.n = len(self.data)
        self.epsilon = float(epsilon)
        self.printed_sign = printed_sign
        self.K = kernel.gram(self.atoms)
        self.w_hat = np.bincount(self.data_idx, minlength=len(self.atoms)) / self.n
        self.e_hat = RkhsFunction(self.atoms, self.w_hat, kernel, self.K)
        self._all_idx = np.arange(len(self.atoms))

    @property
    def m(self) -> int:
        return len(self.atoms)

    def empirical_support_measure(self) -> np.ndarray:
        return self.w_hat.copy()

    def loss_values(self, theta) -> np.ndarray:
        return self.loss.values(theta, self.atoms, self._all_idx)

    def loss_gradients(self, theta) -> np.ndarray:
        return self.loss.gradients(theta, self.atoms, self._all_idx)

    def _grid_values(self, g: RkhsFunction) -> np.ndarray:
        return self.grid_values(g)

    def value(self, u: SaddleState) -> float:
        fv = self._grid_values(u.f)
        lv = self.loss_values(u.theta)
        w = u.mu.weights
        return float(self.w_hat @ fv + self.epsilon * inner(u.h, u.f) + w @ (lv - fv))

    def derivatives(self, u: SaddleState) -> BlockDerivatives:
        w = u.mu.weights
        d_theta = w @ self.loss_gradients(u.theta)
        d_f = dictionary_compress(RkhsFunction(self.atoms, self.w_hat - w, self.kernel, self.K)
                                  + self.epsilon * u.h)
        d_mu = self.loss_values(u.theta) - self._grid_values(u.f)
        d_h = self.epsilon * u.f
        return BlockDerivatives(d_theta=d_theta, d_f=d_f, d_mu=d_mu, d_h=d_h)

    def stochastic_derivatives(self, u: SaddleState, batch: int, seed) -> BlockDerivatives:
        return dro_stochastic_derivatives(self, u, batch, batch, seed)

    def noise_variances(self, batch: int = 1) -> dict[str, float]:
        L0 = self.loss.grad_bound(len(self.theta_box.low), self.theta_box)
        return {"theta": L0**2 / batch, "f": 4.0 * self.kernel.C / batch, "mu": 0.0, "h": 0.0}

    def lipschitz(self) -> BlockLipschitz:
        return dro_lipschitz(self)

    def measure(self, weights) -> DiscreteMeasure:
        return DiscreteMeasure.from_weights(self.atoms, weights)


def dro_derivatives(p: DroProblem, u: SaddleState) -> BlockDerivatives:
    return p.derivatives(u)


def dro_stochastic_derivatives(p: DroProblem, u: SaddleState, n_theta: int, n_f: int,
                               seed) -> BlockDerivatives:
    """Sampled theta- and f-derivatives; mu and h blocks are exact.

    The f-estimate is ``eps h + mean(k(., Xhat_i) - k(., X_i))`` with ``Xhat ~ mu_hat``,
    ``X ~ mu``; ``p.printed_sign`` switches the second term to ``+ k(., X_i)``.
    """
    if n_theta < 1 or n_f < 1:
        raise ValueError("batch sizes must be at least 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    exact = p.derivatives(u)
    idx_theta = sample_indices(u.mu, n_theta, rng)
    d_theta = p.loss.gradients(u.theta, p.atoms[idx_theta], idx_theta).mean(axis=0)
    idx_hat = p.data_idx[rng.integers(0, p.n, size=n_f)]
    idx_mu = sample_indices(u.mu, n_f, rng)
    sign = 1.0 if p.printed_sign else -1.0
    coef = (np.bincount(idx_hat, minlength=p.m) + sign * np.bincount(idx_mu, minlength=p.m)) / n_f
    d_f = dictionary_compress(RkhsFunction(p.atoms, coef, p.kernel, p.K) + p.epsilon * u.h)
    return BlockDerivatives(d_theta=d_theta, d_f=d_f, d_mu=exact.d_mu, d_h=exact.d_h)


def dro_lipschitz(p: DroProblem) -> BlockLipschitz:
    """theta-theta uses ``sup_x L(x)``, an upper bound for every reading of ``L1``."""
    L0 = p.loss.grad_bound(len(p.theta_box.low), p.theta_box)
    L1 = float(p.loss.curvature_bounds(p.m).max())
    rc = math.sqrt(p.kernel.C)
    eps = p.epsilon
    return BlockLipschitz.from_entries(theta_theta=L1, theta_mu=L0, f_mu=rc, f_h=eps,
                                       mu_f=rc, mu_theta=L0, h_f=eps)


def curvature_candidates(p: DroProblem) -> dict[str, float]:
    """The competing definitions of the theta-curvature constant, for reports."""
    Lx = p.loss.curvature_bounds(p.m)
    return {"sup_mu_E_L_sq": float((Lx**2).max()), "sup_mu_E_L": float(Lx.max()),
            "sup_x_L": float(Lx.max())}


# --------------------------------------------------------------------------- risk


def project_simplex(v) -> np.ndarray:
    """Euclidean projection onto the probability simplex."""
    v = np.asarray(v, float)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ind = np.arange(1, len(v) + 1)
    rho = np.count_nonzero(u - css / ind > 0)
    tau = css[rho - 1] / rho
    return np.maximum(v - tau, 0.0)


class EllipsoidProjector:
    """Euclidean projection onto ``{w : (w - c)^T K (w - c) <= r^2}``."""

    def __init__(self, K: np.ndarray, center: np.ndarray, radius: float):
        lam, Q = np.linalg.eigh(K)
        self.lam = np.maximum(lam, 0.0)
        self.Q = Q
        self.K = K
        self.c = np.asarray(center, float)
        self.r2 = float(radius) ** 2
        self._t = 0.0

    def excess(self, w) -> float:
        d = w - self.c
        return float(d @ self.K @ d) - self.r2

    def __call__(self, y) -> np.ndarray:
        v = np.asarray(y, float) - self.c
        p = self.Q.T @ v
        if float(self.lam @ p**2) <= self.r2:
            return np.asarray(y, float).copy()
        if self.r2 == 0.0:
            # only the null space of K is free
            p = np.where(self.lam > 1e-14 * max(self.lam.max(), 1.0), 0.0, p)
            return self.c + self.Q @ p

        lp2 = self.lam * p**2
        r = math.sqrt(self.r2)

        def phi(t):
            return float(np.sum(lp2 / (1.0 + t * self.lam) ** 2)) - self.r2

        # Newton on 1/||.|| - 1/r, which is nearly linear in t; warm-started from the last root
        t = self._t
        for _ in range(100):
            den = 1.0 + t * self.lam
            s2 = float(lp2 @ (1.0 / den**2))
            ds2 = -2.0 * float(lp2 @ (self.lam / den**3))
            s = math.sqrt(s2)
            t_new = max(t - (1.0 / s - 1.0 / r) / (-0.5 * ds2 / (s2 * s)), 0.0)
            done = abs(t_new - t) <= 1e-15 * max(t_new, 1.0)
            t = t_new
            if done:
                break
        else:
            hi = 1.0
            while phi(hi) > 0:
                hi *= 4.0
            t = brentq(phi, 0.0, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)
        self._t = t
        return self.c + self.Q @ (p / (1.0 + t * self.lam))


def project_simplex_ellipsoid(y, proj_e: EllipsoidProjector, *, iters: int = DYKSTRA_ITERS,
                              tol: float = DYKSTRA_TOL) -> np.ndarray:
    """Dykstra's alternating projections onto simplex ∩ ellipsoid."""
    x = np.asarray(y, float).copy()
    p = np.zeros_like(x)
    q = np.zeros_like(x)
    for _ in range(iters):
        a = project_simplex(x + p)
        p = x + p - a
        x_new = proj_e(a + q)
        q = a + q - x_new
        if np.max(np.abs(x_new - x)) <= tol and np.max(np.abs(x_new - a)) <= tol:
            x = x_new
            break
        x = x_new
    return project_simplex(x)


def worst_case_weights(values, K, w_ref, epsilon, *, iters: int = RISK_ITERS,
                       tol: float = RISK_TOL) -> np.ndarray:
    """Maximize ``values . w`` over simplex weights with ``(w - w_ref)^T K (w - w_ref) <= eps^2``.

    Projected gradient ascent; each projection onto the intersection is
    computed with Dykstra's algorithm.
    """
    l = np.asarray(values, float)
    w = np.asarray(w_ref, float).copy()
    spread = float(l.max() - l.min())
    if spread == 0.0:
        return w
    proj_e = EllipsoidProjector(K, w_ref, epsilon)
    step = 1.0 / spread
    change = 1.0
    for _ in range(iters):
        # inexact projections early on, tightened as the iterates settle
        inner_tol = max(DYKSTRA_TOL, 1e-5 * change)
        w_new = project_simplex_ellipsoid(w + step * l, proj_e, tol=inner_tol)
        change = float(np.max(np.abs(w_new - w)))
        w = w_new
        if change <= tol:
            break
    return w


def dro_risk(p: DroProblem, theta, epsilon: float | None = None, w_ref=None) -> float:
    """``Z(theta) = sup { E_mu l(theta; x) : mmd(mu, mu_hat) <= eps }`` over the grid."""
    eps = p.epsilon if epsilon is None else float(epsilon)
    ref = p.w_hat if w_ref is None else np.asarray(w_ref, float)
    l = p.loss_values(theta)
    if eps <= 0:
        return float(ref @ l)
    w = worst_case_weights(l, p.K, ref, eps)
    return float(w @ l)


def epsilon_n(n: int, delta: float, C: float = 1.0) -> float:
    """High-probability bound on ``mmd(mu_hat_n, mu_0)``."""
    if n < 1 or not 0 < delta < 1:
        raise ValueError("need n >= 1 and 0 < delta < 1")
    return math.sqrt(C / n) + math.sqrt(2.0 * C * math.log(1.0 / delta) / n)


def kmp_suboptimality_certificate(p: DroProblem, record, sets=None, *, theta_star=None,
                                  u0: SaddleState | None = None, tol: float = 1e-6) -> dict:
    """Compare ``Z(theta_bar) - Z(theta*)`` with the duality gap of the averaged iterate."""
    from . import oracle
    from .solver import duality_gap, theorem_bound

    sets = sets or p.default_gap_sets()
    ubar = record.average
    if theta_star is None:
        theta_star = oracle.dro_minimizer(p)
    risk_kmp = dro_risk(p, ubar.theta)
    risk_oracle = dro_risk(p, theta_star)
    gap = duality_gap(p, ubar, sets)
    L = p.lipschitz().L
    D2 = sets.diameter_sq(u0 if u0 is not None else p.initial_state())
    diff = risk_kmp - risk_oracle
    return {
        "N": record.N,
        "theta_kmp": np.asarray(ubar.theta).tolist(),
        "theta_oracle": np.asarray(theta_star).tolist(),
        "risk_kmp": risk_kmp,
        "risk_oracle": risk_oracle,
        "risk_difference": diff,
        "duality_gap": gap,
        "gap_bound": theorem_bound(L, D2, record.N),
        "certified": bool(p.loss.convex_in_theta),
        "difference_le_gap": bool(diff <= gap + tol),
    }


def robustness_report(p: DroProblem, theta_hat, mu0: DiscreteMeasure, delta: float,
                      epsilon: float | None = None, *, theta_star=None) -> dict:
    """Population-risk and distribution-shift clauses for a decision ``theta_hat``."""
    from . import oracle

    eps = p.epsilon if epsilon is None else float(epsilon)
    if mu0.atoms.shape != p.atoms.shape or not np.array_equal(mu0.atoms, p.atoms):
        raise ValueError("mu0 must live on the problem grid")
    C = p.kernel.C
    eps_n = epsilon_n(p.n, delta, C)
    mu_hat = DiscreteMeasure.from_weights(p.atoms, np.maximum(p.w_hat, 1e-300))
    dist = float(np.sqrt(max((p.w_hat - mu0.weights) @ p.K @ (p.w_hat - mu0.weights), 0.0)))
    pop_risk = float(mu0.weights @ p.loss_values(theta_hat))
    dro_hat = dro_risk(p, theta_hat, eps)
    if theta_star is None:
        theta_star = oracle.dro_minimizer(p)
    z_star = dro_risk(p, theta_star, eps)
    z_shift = dro_risk(p, theta_hat, eps, w_ref=mu0.weights)
    precondition = eps > eps_n
    if not precondition:
        warnings.warn(f"epsilon={eps:.4g} does not exceed epsilon_n={eps_n:.4g}; "
                      "the population clause carries no guarantee", EpsilonPreconditionWarning)
    return {
        "epsilon": eps,
        "epsilon_n": eps_n,
        "delta": delta,
        "mmd_hat_mu0": dist,
        "precondition_met": bool(precondition),
        "clauses": {
            "population": {
                "population_risk": pop_risk,
                "dro_risk": dro_hat,
                "mu0_in_ball": bool(dist <= eps),
                "holds": bool(pop_risk <= dro_hat + RISK_TOL) if dist <= eps else None,
            },
            "shift": {
                "shifted_dro_risk": z_shift,
                "optimal_dro_risk": z_star,
                "observed_slack": z_shift - z_star,
            },
        },
        "_mu_hat_mmd_check": mmd(mu_hat, mu0, p.kernel) if np.all(p.w_hat > 0) else None,
    }
