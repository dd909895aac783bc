"""Saddle-problem contract, block containers and the MMD matching game.

A problem has up to four blocks ``(theta, f, mu, h)``: ``theta`` (Euclidean box)
and ``f`` (RKHS ball) are minimized, ``mu`` (probability simplex over a fixed
atom grid) and ``h`` (RKHS ball) are maximized.  Inactive blocks are ``None``
everywhere.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import integrate, special

from .measure import DiscreteMeasure
from .rkhs import (HilbertBall, Kernel, RkhsFunction, as_points, dictionary_compress, inner,
                   mean_embedding, mmd)

BLOCKS = ("theta", "f", "mu", "h")
MIN_BLOCKS = ("theta", "f")
MAX_BLOCKS = ("mu", "h")


class InfeasibleStateError(ValueError):
    pass


class NoNoiseSourceError(RuntimeError):
    pass


@dataclass(frozen=True)
class Box:
    low: np.ndarray
    high: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.low, dtype=float))
        hi = np.atleast_1d(np.asarray(self.high, dtype=float))
        if lo.shape != hi.shape or np.any(lo > hi):
            raise ValueError("box needs low <= high with equal shapes")
        object.__setattr__(self, "low", lo)
        object.__setattr__(self, "high", hi)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.low + self.high)

    def project(self, theta) -> np.ndarray:
        return np.clip(theta, self.low, self.high)

    def contains(self, theta, tol: float = 1e-12) -> bool:
        t = np.asarray(theta, float)
        return t.shape == self.low.shape and bool(np.all(t >= self.low - tol) and np.all(t <= self.high + tol))

    def max_sq_dist(self, point) -> float:
        p = np.asarray(point, float)
        return float(np.sum(np.maximum(np.abs(p - self.low), np.abs(self.high - p)) ** 2))


@dataclass(frozen=True)
class SaddleState:
    theta: np.ndarray | None = None
    f: RkhsFunction | None = None
    mu: DiscreteMeasure | None = None
    h: RkhsFunction | None = None

    def replace(self, **blocks) -> SaddleState:
        d = {b: getattr(self, b) for b in BLOCKS}
        d.update(blocks)
        return SaddleState(**d)

    def active(self) -> tuple[str, ...]:
        return tuple(b for b in BLOCKS if getattr(self, b) is not None)


@dataclass(frozen=True)
class BlockDerivatives:
    """Fréchet derivatives ``F'_kappa`` of the objective (true derivatives, not ascent/descent directions)."""

    d_theta: np.ndarray | None = None
    d_f: RkhsFunction | None = None
    d_mu: np.ndarray | None = None
    d_h: RkhsFunction | None = None

    def get(self, block: str):
        return getattr(self, "d_" + block)


@dataclass(frozen=True)
class BlockLipschitz:
    """Cross-block Lipschitz constants, rows/cols ordered (theta, f, mu, h)."""

    matrix: np.ndarray

    def __post_init__(self):
        M = np.asarray(self.matrix, dtype=float)
        if M.shape != (4, 4) or np.any(M < 0):
            raise ValueError("Lipschitz table must be a nonnegative 4x4 matrix")
        object.__setattr__(self, "matrix", M)

    @classmethod
    def from_entries(cls, **entries) -> BlockLipschitz:
        """``from_entries(f_mu=1.0, ...)`` sets ``L_{f mu}``."""
        M = np.zeros((4, 4))
        for key, val in entries.items():
            a, b = key.split("_")
            M[BLOCKS.index(a), BLOCKS.index(b)] = val
        return cls(M)

    def entry(self, a: str, b: str) -> float:
        return float(self.matrix[BLOCKS.index(a), BLOCKS.index(b)])

    @property
    def L(self) -> float:
        return float(self.matrix.max())


@dataclass(frozen=True, eq=False)
class GapSets:
    """Compact sets for gap certification; ``U_mu`` is always the full simplex over the grid."""

    U_theta: Box | None = None
    U_f: HilbertBall | None = None
    U_h: HilbertBall | None = None

    def diameter_sq(self, u0: SaddleState) -> float:
        """``max_{u in U} ||theta - theta0||^2 + ||f - f0||^2 + 2 KL(mu, mu0) + ||h - h0||^2``."""
        total = 0.0
        if u0.theta is not None:
            total += self.U_theta.max_sq_dist(u0.theta)
        for name, ball in (("f", self.U_f), ("h", self.U_h)):
            g0 = getattr(u0, name)
            if g0 is None:
                continue
            if math.isinf(ball.radius):
                return math.inf
            total += (ball.distance_from_center(g0) + ball.radius) ** 2
        if u0.mu is not None:
            # KL(mu, mu0) over the simplex is maximized at the lightest atom of mu0
            total += 2.0 * float(-u0.mu.log_weights.min())
        return total


class SaddleProblem:
    """Base class for convex-concave problems over ``(theta, f, mu, h)``.

    Subclasses set ``blocks`` and implement ``value`` and ``derivatives``.
    For gap certification they also declare ``f_curvature`` (the coefficient
    ``a`` in ``F = a/2 ||f||^2 + <f, g(other blocks)> + ...``); max blocks are
    assumed to enter affinely and separately.
    """

    blocks: tuple[str, ...] = ("f", "mu")
    f_curvature: float = 0.0

    def __init__(self, kernel: Kernel, atoms, *, theta_box: Box | None = None,
                 f_ball: HilbertBall | None = None, h_ball: HilbertBall | None = None):
        self.kernel = kernel
        self.atoms = as_points(atoms)
        self.theta_box = theta_box
        self.f_ball = f_ball if f_ball is not None else HilbertBall(math.inf)
        self.h_ball = h_ball

    # contract -------------------------------------------------------------
    def value(self, u: SaddleState) -> float:
        raise NotImplementedError

    def derivatives(self, u: SaddleState) -> BlockDerivatives:
        raise NotImplementedError

    def stochastic_derivatives(self, u: SaddleState, batch: int, seed) -> BlockDerivatives:
        raise NoNoiseSourceError(f"{type(self).__name__} declares no noise source")

    def noise_variances(self, batch: int = 1) -> dict[str, float]:
        """Declared per-block bounds on E||F~' - F'||^2 for a batch of the given size."""
        raise NoNoiseSourceError(f"{type(self).__name__} declares no noise source")

    def lipschitz(self) -> BlockLipschitz:
        raise NotImplementedError

    # helpers ----------------------------------------------------------------
    def initial_state(self) -> SaddleState:
        """theta at the box center, f = h = 0 on the grid, mu uniform on the grid."""
        zero = RkhsFunction(self.atoms, np.zeros(len(self.atoms)), self.kernel)
        return SaddleState(
            theta=self.theta_box.center.copy() if "theta" in self.blocks else None,
            f=zero if "f" in self.blocks else None,
            mu=DiscreteMeasure.uniform(self.atoms) if "mu" in self.blocks else None,
            h=zero if "h" in self.blocks else None,
        )

    def default_gap_sets(self) -> GapSets:
        return GapSets(U_theta=self.theta_box if "theta" in self.blocks else None,
                       U_f=self.f_ball if "f" in self.blocks else None,
                       U_h=self.h_ball if "h" in self.blocks else None)

    def check_feasible(self, u: SaddleState, tol: float = 1e-9):
        for b in BLOCKS:
            present = getattr(u, b) is not None
            if present != (b in self.blocks):
                raise InfeasibleStateError(f"block {b!r} is {'present' if present else 'missing'} "
                                           f"but problem blocks are {self.blocks}")
        if u.theta is not None and not self.theta_box.contains(u.theta, tol):
            raise InfeasibleStateError("theta outside its box")
        if u.f is not None and not _in_ball(self.f_ball, u.f, tol):
            raise InfeasibleStateError("f outside its ball")
        if u.h is not None and not _in_ball(self.h_ball, u.h, tol):
            raise InfeasibleStateError("h outside its ball")
        if u.mu is not None:
            if u.mu.atoms.shape != self.atoms.shape or not np.array_equal(u.mu.atoms, self.atoms):
                raise InfeasibleStateError("mu is not supported on the problem grid")

    def measure(self, weights) -> DiscreteMeasure:
        return DiscreteMeasure.from_weights(self.atoms, weights)

    def grid_values(self, g: RkhsFunction) -> np.ndarray:
        """Values of ``g`` at the atoms, using the cached Gram when ``g`` lives on the grid."""
        if g.dictionary is self.atoms or (g.dictionary.shape == self.atoms.shape
                                          and np.array_equal(g.dictionary, self.atoms)):
            return g.gram @ g.coefficients
        return np.asarray(g(self.atoms), dtype=float)


def _in_ball(ball: HilbertBall, g: RkhsFunction, tol: float) -> bool:
    return math.isinf(ball.radius) or ball.distance_from_center(g) <= ball.radius + tol


@lru_cache(maxsize=None)
def expected_max_sq_gaussian(m: int) -> float:
    """E[max_i g_i^2] for m i.i.d. standard normals."""
    if m == 1:
        return 1.0
    val, _ = integrate.quad(lambda t: 1.0 - special.erf(math.sqrt(t / 2.0)) ** m, 0.0, math.inf,
                            epsabs=1e-13, epsrel=1e-12, limit=200)
    return val


class MmdMatchingGame(SaddleProblem):
    """``F(f, mu) = quad/2 ||f||^2 + <f, e_mu - e_nu>`` over an atom grid.

    With ``quad = 1`` the saddle point is ``(0, nu)``; ``inf_f F = -mmd(mu, nu)^2 / 2``.
    ``noise_sigma2 > 0`` turns on an additive Gaussian derivative noise whose
    variance is split evenly between the two blocks (E||noise_f||^2 and
    E||noise_mu||_inf^2 each equal ``noise_sigma2 / 2`` for batch 1).
    """

    blocks = ("f", "mu")

    def __init__(self, kernel: Kernel, atoms, nu: DiscreteMeasure, *, quad: float = 1.0,
                 f_radius: float = 10.0, noise_sigma2: float = 0.0):
        super().__init__(kernel, atoms, f_ball=HilbertBall(f_radius))
        if nu.atoms.shape != self.atoms.shape or not np.allclose(nu.atoms, self.atoms, atol=0, rtol=0):
            raise ValueError("nu must be supported on the problem atoms")
        if quad < 0 or noise_sigma2 < 0:
            raise ValueError("quad and noise_sigma2 must be nonnegative")
        self.nu = nu
        self.quad = float(quad)
        self.f_curvature = self.quad
        self.noise_sigma2 = float(noise_sigma2)
        self._K = kernel.gram(self.atoms)
        self._e_nu = mean_embedding(nu, kernel)
        self._noise = None
        self._grid_zero = RkhsFunction(self.atoms, np.zeros(len(self.atoms)), kernel, self._K)

    def _embedding_gap(self, mu: DiscreteMeasure) -> RkhsFunction:
        return self._grid_zero.with_coefficients(mu.weights - self.nu.weights)

    def value(self, u: SaddleState) -> float:
        f = u.f
        return 0.5 * self.quad * f.norm_sq() + inner(f, self._embedding_gap(u.mu))

    def derivatives(self, u: SaddleState) -> BlockDerivatives:
        d_f = dictionary_compress(self.quad * u.f + self._embedding_gap(u.mu))
        return BlockDerivatives(d_f=d_f, d_mu=self.grid_values(u.f))

    def noise_variances(self, batch: int = 1) -> dict[str, float]:
        half = 0.5 * self.noise_sigma2 / batch
        return {"theta": 0.0, "f": half, "mu": half, "h": 0.0}

    def _noise_factors(self):
        if self._noise is None:
            self._noise = self._compute_noise_factors()
        return self._noise

    def _compute_noise_factors(self):
        lam, V = np.linalg.eigh(self._K)
        keep = lam > 1e-10 * lam.max()
        # coefficients c = V_r lam_r^{-1/2} g give ||sum c_j k(z_j, .)||^2 = ||g||^2
        return V[:, keep] / np.sqrt(lam[keep]), int(keep.sum())

    def stochastic_derivatives(self, u: SaddleState, batch: int, seed) -> BlockDerivatives:
        if batch < 1:
            raise ValueError("batch must be at least 1")
        exact = self.derivatives(u)
        if self.noise_sigma2 == 0.0:
            return exact
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        half = 0.5 * self.noise_sigma2
        B, r = self._noise_factors()
        m = len(self.atoms)
        g_f = rng.standard_normal((batch, r)).mean(axis=0) * math.sqrt(half / r)
        s_mu = math.sqrt(half / expected_max_sq_gaussian(m))
        g_mu = rng.standard_normal((batch, m)).mean(axis=0) * s_mu
        if exact.d_f.dictionary is self.atoms:
            d_f = exact.d_f.with_coefficients(exact.d_f.coefficients + B @ g_f)
        else:
            d_f = dictionary_compress(exact.d_f + RkhsFunction(self.atoms, B @ g_f, self.kernel, self._K))
        return BlockDerivatives(d_f=d_f, d_mu=exact.d_mu + g_mu)

    def lipschitz(self) -> BlockLipschitz:
        rc = math.sqrt(self.kernel.C)
        return BlockLipschitz.from_entries(f_f=self.quad, f_mu=rc, mu_f=rc)

    def saddle_point(self) -> SaddleState:
        if self.quad <= 0:
            raise ValueError("the linear game has no unique saddle point")
        return SaddleState(f=RkhsFunction(self.atoms, np.zeros(len(self.atoms)), self.kernel, self._K),
                           mu=self.nu)

    def closed_form_gap(self, f: RkhsFunction, mu: DiscreteMeasure) -> float:
        """Gap of the quad=1 game with ``U_f`` large enough to hold ``-(e_mu - e_nu)``."""
        fv = np.asarray(f(self.atoms))
        primal = 0.5 * f.norm_sq() + fv.max() - inner(f, self._e_nu)
        return primal + 0.5 * mmd(mu, self.nu, self.kernel) ** 2


def make_mmd_matching_game(kernel: Kernel, atoms, nu: DiscreteMeasure, **kwargs) -> MmdMatchingGame:
    return MmdMatchingGame(kernel, atoms, nu, **kwargs)


def random_state(problem: SaddleProblem, rng: np.random.Generator, scale: float = 0.3) -> SaddleState:
    """A random feasible state: theta uniform in its box, Gaussian coefficients on the grid
    (radially pulled into the balls), Dirichlet weights kept away from zero."""
    m = len(problem.atoms)
    K = problem.kernel.gram(problem.atoms)

    def fn(ball):
        g = RkhsFunction(problem.atoms, scale * rng.standard_normal(m), problem.kernel, K)
        return ball.project(g) if ball is not None else g

    theta = f = mu = h = None
    if "theta" in problem.blocks:
        theta = rng.uniform(problem.theta_box.low, problem.theta_box.high)
    if "f" in problem.blocks:
        f = fn(problem.f_ball)
    if "mu" in problem.blocks:
        w = rng.dirichlet(np.ones(m)) + 0.01
        mu = DiscreteMeasure.from_weights(problem.atoms, w / w.sum())
    if "h" in problem.blocks:
        h = fn(problem.h_ball)
    return SaddleState(theta=theta, f=f, mu=mu, h=h)
