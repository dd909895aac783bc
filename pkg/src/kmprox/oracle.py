"""Brute-force and finite-difference oracles.

Nothing here calls ``derivatives`` of a problem except ``finite_difference_check``,
which compares them against differences of ``value``.  The mesh scans rebuild
objectives from Gram matrices so that agreement with the solver path is evidence
rather than a tautology.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize, minimize_scalar
from scipy.special import comb

from .rkhs import Kernel, RkhsFunction, as_points
from .saddle import MmdMatchingGame, SaddleProblem, SaddleState

DEFAULT_CAP = 10_000_000


class MeshTooLargeError(ValueError):
    pass


@dataclass(frozen=True)
class MeshSpec:
    simplex_step: float = 0.02
    coef_low: float = -1.0
    coef_high: float = 1.0
    coef_step: float = 0.02
    theta_step: float = 0.01
    refine: int = 0
    cap: int = DEFAULT_CAP

    def __post_init__(self):
        for name in ("simplex_step", "coef_step", "theta_step"):
            if not getattr(self, name) > 0:
                raise ValueError(f"mesh {name} must be positive")
        if self.coef_low > self.coef_high:
            raise ValueError("coef_low must not exceed coef_high")
        if self.refine < 0 or self.cap < 1:
            raise ValueError("refine must be >= 0 and cap >= 1")

    def halved(self) -> MeshSpec:
        return MeshSpec(self.simplex_step / 2, self.coef_low, self.coef_high, self.coef_step / 2,
                        self.theta_step / 2, self.refine, self.cap)

    def to_dict(self) -> dict:
        return dict(simplex_step=self.simplex_step, coef_low=self.coef_low,
                    coef_high=self.coef_high, coef_step=self.coef_step,
                    theta_step=self.theta_step, refine=self.refine, cap=self.cap)


def simplex_mesh_size(m: int, step: float) -> int:
    K = int(round(1.0 / step))
    return int(comb(K + m - 1, m - 1, exact=True))


def simplex_mesh(m: int, step: float, cap: int = DEFAULT_CAP) -> np.ndarray:
    """All weight vectors with entries in ``step * Z`` summing to one, shape (count, m)."""
    K = int(round(1.0 / step))
    if abs(K * step - 1.0) > 1e-9:
        raise ValueError("simplex step must divide 1")
    count = simplex_mesh_size(m, step)
    if count > cap:
        raise MeshTooLargeError(f"simplex mesh has {count} points, cap is {cap}")
    # stars and bars: choose m-1 bar positions among K+m-1 slots
    if m == 1:
        return np.ones((1, 1))
    bars = np.array(list(itertools.combinations(range(K + m - 1), m - 1)), dtype=np.int64)
    edges = np.hstack([np.full((len(bars), 1), -1), bars, np.full((len(bars), 1), K + m - 1)])
    counts = np.diff(edges, axis=1) - 1
    return counts / K


def _axis(low: float, high: float, step: float) -> np.ndarray:
    n = int(math.floor((high - low) / step + 1e-9)) + 1
    return low + step * np.arange(n)


def coefficient_mesh(dim: int, spec: MeshSpec) -> np.ndarray:
    ax = _axis(spec.coef_low, spec.coef_high, spec.coef_step)
    if len(ax) ** dim > spec.cap:
        raise MeshTooLargeError(f"coefficient mesh has {len(ax) ** dim} points, cap is {spec.cap}")
    return np.stack(np.meshgrid(*([ax] * dim), indexing="ij"), axis=-1).reshape(-1, dim)


# ----------------------------------------------------------------- saddle scans


def _matching_value_table(game: MmdMatchingGame, A: np.ndarray, W: np.ndarray) -> np.ndarray:
    """F at every (coefficient row, weight row) pair, built from a fresh Gram matrix."""
    K = game.kernel.gram(game.atoms)
    nu = np.exp(game.nu.log_weights)
    KA = A @ K
    quad = 0.5 * game.quad * np.einsum("ij,ij->i", KA, A)
    return quad[:, None] + KA @ W.T - (KA @ nu)[:, None]


def brute_force_saddle(problem: SaddleProblem, mesh: MeshSpec) -> dict:
    """``min`` over a coefficient mesh of ``max`` over a simplex mesh of ``F``.

    ``f`` ranges over expansions on the problem atoms with coefficients on a
    box mesh (intersected with the problem's f-ball), ``mu`` over the simplex mesh.
    """
    if set(problem.blocks) != {"f", "mu"}:
        raise ValueError("brute_force_saddle supports (f, mu) problems")
    m = len(problem.atoms)
    A = coefficient_mesh(m, mesh)
    W = simplex_mesh(m, mesh.simplex_step, mesh.cap)
    if len(A) * len(W) > mesh.cap:
        raise MeshTooLargeError(f"{len(A) * len(W)} evaluations exceed cap {mesh.cap}")
    K = problem.kernel.gram(problem.atoms)
    if math.isfinite(problem.f_ball.radius):
        norms = np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", A, K, A), 0.0))
        A = A[norms <= problem.f_ball.radius]
    if isinstance(problem, MmdMatchingGame):
        table = _matching_value_table(problem, A, W)
    else:
        table = np.array([[problem.value(_state(problem, a, w)) for w in W] for a in A])
    inner_max = table.max(axis=1)
    i = int(inner_max.argmin())
    j = int(table[i].argmax())
    # mesh error: |dF/dalpha|_1 * step/2 (+ curvature term) for the coefficient mesh and
    # max|f(z)| * (L1 radius of the simplex mesh) for the weight mesh
    KA = A @ K
    h = 0.5 * mesh.coef_step
    grad_alpha = problem.f_curvature * np.abs(KA).sum(axis=1).max() + 2.0 * np.abs(K).max(axis=1).sum()
    curv = 0.5 * problem.f_curvature * h**2 * np.abs(K).sum()
    err = h * grad_alpha + curv + np.abs(KA).max() * mesh.simplex_step * max(m - 1, 1)
    return {
        "value": float(inner_max[i]),
        "argmin_coefficients": A[i].tolist(),
        "argmax_weights": W[j].tolist(),
        "error_bound": float(err),
        "evaluations": int(len(A) * len(W)),
        "mesh": mesh.to_dict(),
    }


def _state(problem, a, w) -> SaddleState:
    f = RkhsFunction(problem.atoms, a, problem.kernel)
    return SaddleState(f=f, mu=problem.measure(np.maximum(w, 1e-300)))


def mesh_ball_sup(kernel: Kernel, atoms, direction, radius: float, mesh: MeshSpec) -> float:
    """``sup { <f, g> : ||f|| <= radius }`` with ``f`` on a coefficient mesh, ``g = sum direction_j k(z_j, .)``."""
    Z = as_points(atoms)
    K = kernel.gram(Z)
    A = coefficient_mesh(len(Z), mesh)
    norms = np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", A, K, A), 0.0))
    A = A[norms <= radius]
    return float((A @ K @ np.asarray(direction, float)).max())


# ----------------------------------------------------------------- DRO oracles


def brute_force_dro_risk(p, theta, mesh: MeshSpec, epsilon: float | None = None) -> float:
    """Simplex mesh scan of ``E_w l(theta; .)`` under ``(w - w_hat)^T K (w - w_hat) <= eps^2``.

    With ``mesh.refine = r`` the scan is repeated ``r`` times on a ten times finer
    local mesh around the incumbent (the problem is a linear objective over a
    convex set, so the incumbent's neighbourhood contains the optimum).
    """
    eps = p.epsilon if epsilon is None else float(epsilon)
    Z = p.atoms
    K = p.kernel.gram(Z)
    l = np.array([float(p.loss.values(theta, Z[i:i + 1], np.array([i]))[0]) for i in range(len(Z))])
    w_hat = np.bincount(p.data_idx, minlength=len(Z)) / len(p.data_idx)
    W = simplex_mesh(len(Z), mesh.simplex_step, mesh.cap)
    best = _best_feasible(W, l, K, w_hat, eps)
    step = mesh.simplex_step
    for _ in range(mesh.refine):
        fine = step / 10.0
        span = np.arange(-10, 11) * fine
        offs = np.stack(np.meshgrid(*([span] * (len(Z) - 1)), indexing="ij"), -1).reshape(-1, len(Z) - 1)
        if len(offs) > mesh.cap:
            raise MeshTooLargeError("refinement mesh exceeds cap")
        cand = np.empty((len(offs), len(Z)))
        cand[:, :-1] = best[:-1] + offs
        cand[:, -1] = 1.0 - cand[:, :-1].sum(axis=1)
        cand = cand[np.all(cand >= -1e-15, axis=1)]
        cand = np.maximum(cand, 0.0)
        best = _best_feasible(np.vstack([cand, best[None, :]]), l, K, w_hat, eps)
        step = fine
    return float(best @ l)


def _best_feasible(W, l, K, w_hat, eps):
    D = W - w_hat
    q = np.einsum("ij,jk,ik->i", D, K, D)
    ok = q <= eps**2 + 1e-15
    vals = np.where(ok, W @ l, -np.inf)
    return W[int(vals.argmax())]


def planar_dro_risk(p, theta, epsilon: float | None = None, samples: int = 100_000,
                    rounds: int = 3) -> float:
    """Exhaustive DRO risk on a three-atom grid.

    The feasible set is a disc (an ellipse in the zero-sum plane) cut by the
    triangle, so a linear maximum sits at a triangle vertex inside the disc, at an
    edge/ellipse crossing, or on the ellipse arc.  The arc is scanned densely and
    the best sample is re-scanned locally ``rounds`` times.
    """
    eps = p.epsilon if epsilon is None else float(epsilon)
    Z = p.atoms
    if len(Z) != 3:
        raise ValueError("planar oracle needs exactly three atoms")
    K = p.kernel.gram(Z)
    l = np.array([float(p.loss.values(theta, Z[i:i + 1], np.array([i]))[0]) for i in range(3)])
    w_hat = np.bincount(p.data_idx, minlength=3) / len(p.data_idx)

    def q(W):
        D = W - w_hat
        return np.einsum("ij,jk,ik->i", D, K, D)

    cands = [w_hat[None, :]]
    I = np.eye(3)
    cands.append(I[q(I) <= eps**2])
    for i, j in itertools.combinations(range(3), 2):
        # q(e_i + s (e_j - e_i)) = a s^2 + b s + c
        d, r = I[j] - I[i], I[i] - w_hat
        a, b, c = d @ K @ d, 2 * d @ K @ r, r @ K @ r - eps**2
        disc = b * b - 4 * a * c
        if a > 0 and disc >= 0:
            for s in ((-b - math.sqrt(disc)) / (2 * a), (-b + math.sqrt(disc)) / (2 * a)):
                if 0.0 <= s <= 1.0:
                    cands.append((I[i] + s * d)[None, :])
    if eps > 0:
        B = np.array([[1.0, -1.0, 0.0], [1.0, 1.0, -2.0]]).T
        B /= np.linalg.norm(B, axis=0)
        lam, V = np.linalg.eigh(B.T @ K @ B)
        T = B @ V / np.sqrt(lam)  # y -> w - w_hat with unit ellipse norm for |y| = 1

        def arc(t):
            W = w_hat + eps * (np.cos(t)[:, None] * T[:, 0] + np.sin(t)[:, None] * T[:, 1])
            return W[np.all(W >= 0, axis=1)]

        t = np.linspace(0.0, 2 * math.pi, samples, endpoint=False)
        W = arc(t)
        if len(W):
            vals = W @ l
            # recover the best angle and zoom in around it
            y = np.linalg.lstsq(T, (W[int(vals.argmax())] - w_hat) / eps, rcond=None)[0]
            t0, width = math.atan2(y[1], y[0]), 2 * math.pi / samples
            cands.append(W[int(vals.argmax())][None, :])
            for _ in range(rounds):
                Wl = arc(np.linspace(t0 - width, t0 + width, 2001))
                if not len(Wl):
                    break
                k = int((Wl @ l).argmax())
                cands.append(Wl[k][None, :])
                y = np.linalg.lstsq(T, (Wl[k] - w_hat) / eps, rcond=None)[0]
                t0, width = math.atan2(y[1], y[0]), width / 1000
    return float(max((C @ l).max() for C in cands if len(C)))


def slsqp_dro_risk(p, theta, epsilon: float | None = None, starts: int = 4) -> float:
    """DRO risk via scipy's SLSQP from several Dirichlet starts (independent of the Dykstra path)."""
    from scipy.optimize import minimize as _minimize

    eps = p.epsilon if epsilon is None else float(epsilon)
    Z = p.atoms
    K = p.kernel.gram(Z)
    l = np.array([float(p.loss.values(theta, Z[i:i + 1], np.array([i]))[0]) for i in range(len(Z))])
    w_hat = np.bincount(p.data_idx, minlength=len(Z)) / len(p.data_idx)
    best = float(w_hat @ l)
    cons = [{"type": "eq", "fun": lambda w: w.sum() - 1.0, "jac": lambda w: np.ones_like(w)},
            {"type": "ineq", "fun": lambda w: eps**2 - (w - w_hat) @ K @ (w - w_hat),
             "jac": lambda w: -2.0 * K @ (w - w_hat)}]
    rng = np.random.default_rng(0)
    for s in range(starts):
        x0 = w_hat if s == 0 else rng.dirichlet(np.ones(len(Z)))
        r = _minimize(lambda w: -l @ w, x0, jac=lambda w: -l, method="SLSQP",
                      bounds=[(0.0, 1.0)] * len(Z), constraints=cons,
                      options={"ftol": 1e-15, "maxiter": 1000})
        w = np.maximum(r.x, 0.0)
        w = w / w.sum()
        if (w - w_hat) @ K @ (w - w_hat) <= eps**2 * (1 + 1e-9) + 1e-15:
            best = max(best, float(l @ w))
    return best


def dro_minimizer(p, risk=None, *, scan: int = 81, xtol: float = 1e-10) -> np.ndarray:
    """Minimizer of the DRO risk ``Z(theta)`` over the theta box (scan, then local refinement).

    Risk evaluations default to ``slsqp_dro_risk`` so the minimizer does not share
    the projection code used by ``dro_risk``.
    """
    risk = risk or (lambda th: slsqp_dro_risk(p, th))
    lo, hi = p.theta_box.low, p.theta_box.high
    if len(lo) == 1:
        grid = np.linspace(lo[0], hi[0], scan)
        vals = np.array([risk(np.array([t])) for t in grid])
        k = int(vals.argmin())
        a, b = grid[max(k - 1, 0)], grid[min(k + 1, scan - 1)]
        if a == b:
            return np.array([a])
        res = minimize_scalar(lambda t: risk(np.array([t])), bounds=(a, b), method="bounded",
                              options={"xatol": xtol})
        t = res.x if res.fun <= vals[k] else grid[k]
        return np.array([float(t)])
    res = minimize(lambda th: risk(np.asarray(th)), p.theta_box.center, method="Powell",
                   bounds=list(zip(lo, hi)), options={"xtol": xtol, "ftol": 1e-12})
    return np.asarray(res.x, float)


# ----------------------------------------------------------------- finite differences


def finite_difference_check(problem: SaddleProblem, u: SaddleState, block: str,
                            step: float = 1e-5) -> float:
    """Max relative error between central differences of ``value`` and the analytic derivative.

    Charts: theta coordinates; for f and h, directions ``k(z_j, .)`` at each
    grid atom; for mu, the zero-sum directions ``delta_j - mu``.  The error
    of one direction is ``|fd - an| / max(1, |an|, |fd|)``.
    """
    if not step > 0:
        raise ValueError("finite-difference step must be positive")
    if block not in problem.blocks:
        raise ValueError(f"block {block!r} not active in problem")
    d = problem.derivatives(u).get(block)
    Z = problem.atoms
    errs = []
    if block == "theta":
        for j in range(len(u.theta)):
            e = np.zeros_like(u.theta)
            e[j] = step
            fd = (problem.value(u.replace(theta=u.theta + e))
                  - problem.value(u.replace(theta=u.theta - e))) / (2 * step)
            errs.append(_rel(fd, float(d[j])))
    elif block in ("f", "h"):
        g = getattr(u, block)
        an = np.asarray(d(Z), dtype=float)
        for j in range(len(Z)):
            sec = RkhsFunction.section(problem.kernel, Z[j], step)
            fd = (problem.value(u.replace(**{block: g + sec}))
                  - problem.value(u.replace(**{block: g - sec}))) / (2 * step)
            errs.append(_rel(fd, float(an[j])))
    else:
        w = u.mu.weights
        dv = np.asarray(d, float)
        for j in range(len(w)):
            e = -w.copy()
            e[j] += 1.0
            plus = problem.measure(w + step * e)
            minus = problem.measure(w - step * e)
            fd = (problem.value(u.replace(mu=plus)) - problem.value(u.replace(mu=minus))) / (2 * step)
            errs.append(_rel(fd, float(dv[j] - w @ dv)))
    return float(max(errs)) if errs else 0.0


def _rel(fd: float, an: float) -> float:
    return abs(fd - an) / max(1.0, abs(an), abs(fd))
