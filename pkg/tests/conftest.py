import math

import numpy as np
import pytest

from kmprox.dro import DroProblem, LossSpec
from kmprox.measure import DiscreteMeasure, kl_divergence, md_step_measure, tv_norm
from kmprox.rkhs import HilbertBall, Kernel, RkhsFunction, inner, md_step_hilbert
from kmprox.saddle import Box, MmdMatchingGame


def matching_instance(noise_sigma2: float = 0.0) -> MmdMatchingGame:
    """Five-atom gaussian matching game whose f-ball is the smallest centred ball
    holding every best response ``-(e_mu - e_nu)``."""
    atoms = np.linspace(-1, 1, 5)
    kernel = Kernel("gaussian", 0.5)
    nu = DiscreteMeasure.from_weights(atoms, np.random.default_rng(7).dirichlet(np.ones(5) * 2))
    K = kernel.gram(atoms[:, None])
    w = nu.weights
    radius = max(math.sqrt((e - w) @ K @ (e - w)) for e in np.eye(5))
    return MmdMatchingGame(kernel, atoms, nu, f_radius=radius, noise_sigma2=noise_sigma2)


def toy_dro(kind: str = "logistic", params=None, epsilon: float = 0.1, bandwidth: float = 0.5,
            kernel_kind: str = "gaussian") -> DroProblem:
    grid = np.linspace(-2, 2, 10)
    data = grid[[2, 3, 3, 5, 7]]
    params = {"scale": 1.0} if params is None else params
    return DroProblem(LossSpec(kind, params), data, epsilon, Kernel(kernel_kind, bandwidth), grid,
                      Box([-2.0], [2.0]))


def small_dro(kind: str = "clipped-quadratic", params=None, epsilon: float = 0.2) -> DroProblem:
    """Three grid atoms; small enough for mesh oracles."""
    grid = np.array([-1.0, 0.0, 1.0])
    data = grid[[0, 1, 1, 2]]
    params = {"cap": 1.0} if params is None else params
    return DroProblem(LossSpec(kind, params), data, epsilon, Kernel("gaussian", 1.0), grid,
                      Box([-2.0], [2.0]))


def _rand_fn(rng, scale):
    n = int(rng.integers(1, 8))
    return RkhsFunction(rng.uniform(-2, 2, (n, 1)), scale * rng.standard_normal(n), Kernel("gaussian", 1.0))


def hilbert_three_point_slack(rng) -> float:
    """Right side minus left side of the Hilbert mirror-step inequality on a random instance."""
    ball = HilbertBall(rng.uniform(0.2, 3))
    ht = ball.project(_rand_fn(rng, 2))
    xi, xit = _rand_fn(rng, 2), _rand_fn(rng, 2)
    hhat = ball.project(_rand_fn(rng, 2))
    eta = 10 ** rng.uniform(-2, 1)
    h = md_step_hilbert(ht, xi, eta, ball)
    hp = md_step_hilbert(ht, xit, eta, ball)
    lhs = inner(h - hhat, eta * xit)
    rhs = (0.5 * (hhat - ht).norm_sq() - 0.5 * (hhat - hp).norm_sq()
           + 0.5 * eta**2 * (xit - xi).norm_sq() - 0.5 * (h - ht).norm_sq())
    return rhs - lhs


def _rand_measure(rng, atoms):
    return DiscreteMeasure.from_weights(atoms, rng.dirichlet(np.ones(len(atoms))))


def measure_step_terms(rng):
    """Ingredients of the measure mirror-step inequality on one random instance."""
    m = int(rng.integers(2, 8))
    atoms = np.arange(m)
    mt, mh = _rand_measure(rng, atoms), _rand_measure(rng, atoms)
    xi = rng.normal(size=m) * rng.uniform(0, 3)
    xit = xi + rng.normal(size=m) * rng.uniform(0, 2)
    eta = 10 ** rng.uniform(-2, 1)
    mu, mp = md_step_measure(mt, xi, eta), md_step_measure(mt, xit, eta)
    dxi = xit - xi
    return dict(
        lhs=float((mu.weights - mh.weights) @ (eta * xit)),
        bregman=kl_divergence(mh, mt) - kl_divergence(mh, mp),
        eta=eta,
        sup=float(np.abs(dxi).max()),
        osc=float(dxi.max() - dxi.min()),
        tv=tv_norm(mu.weights - mt.weights),
    )


def literal_slack(t) -> float:
    return t["bregman"] + t["eta"] ** 2 / 8 * t["sup"] ** 2 - 2 * t["tv"] ** 2 - t["lhs"]


def sharp_slack(t) -> float:
    # oscillation of the derivative error, and Pinsker's constant for the l1 norm
    return t["bregman"] + t["eta"] ** 2 / 8 * t["osc"] ** 2 - 0.5 * t["tv"] ** 2 - t["lhs"]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def matching():
    return matching_instance()
