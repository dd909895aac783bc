"""Discrete probability measures and the entropic mirror step."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .rkhs import Kernel, as_points

LOG_FLOOR = -700.0
SIMPLEX_TOL = 1e-10


def logsumexp(x) -> float:
    # plain numpy; scipy's version carries array-API overhead that dominates small vectors
    m = float(np.max(x))
    return m + float(np.log(np.sum(np.exp(x - m))))


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """Probability measure on a finite atom set, stored as log-weights.

    All weights are strictly positive; the log-weights are normalized so that
    ``logsumexp(log_weights) == 0``.
    """

    atoms: np.ndarray
    log_weights: np.ndarray
    _gram_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        Z = as_points(self.atoms)
        lw = np.asarray(self.log_weights, dtype=float).reshape(-1)
        if len(lw) < 1 or len(Z) != len(lw):
            raise ValueError(f"need matching nonempty atoms/log_weights, got {len(Z)} and {len(lw)}")
        if not np.all(np.isfinite(lw)):
            raise ValueError("log-weights must be finite (weights strictly positive)")
        total = logsumexp(lw)
        if abs(total) > SIMPLEX_TOL:
            raise ValueError(f"weights do not sum to one (logsumexp = {total:.3e})")
        object.__setattr__(self, "atoms", Z)
        object.__setattr__(self, "log_weights", lw)

    @classmethod
    def from_weights(cls, atoms, weights) -> DiscreteMeasure:
        w = np.asarray(weights, dtype=float).reshape(-1)
        if np.any(w <= 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and strictly positive")
        lw = np.log(w)
        return cls(atoms, lw - logsumexp(lw))

    @classmethod
    def from_log_weights(cls, atoms, log_weights) -> DiscreteMeasure:
        """Normalize arbitrary finite log-weights (floored at ``LOG_FLOOR``)."""
        lw = np.maximum(np.asarray(log_weights, dtype=float), LOG_FLOOR)
        lw = lw - logsumexp(lw)
        # a second pass keeps the floor after normalization shifts everything down
        lw = np.maximum(lw, LOG_FLOOR)
        return cls(atoms, lw - logsumexp(lw))

    @classmethod
    def uniform(cls, atoms) -> DiscreteMeasure:
        Z = as_points(atoms)
        return cls(Z, np.full(len(Z), -np.log(len(Z))))

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    @property
    def size(self) -> int:
        return len(self.log_weights)

    def gram(self, kernel: Kernel) -> np.ndarray:
        K = self._gram_cache.get(kernel)
        if K is None:
            K = kernel.gram(self.atoms)
            self._gram_cache[kernel] = K
        return K

    def with_log_weights(self, log_weights) -> DiscreteMeasure:
        lw = np.asarray(log_weights, dtype=float).reshape(-1)
        if lw.shape != self.log_weights.shape or not np.isfinite(lw).all():
            raise ValueError("log-weights must be finite and match the atoms")
        if abs(logsumexp(lw)) > SIMPLEX_TOL:
            raise ValueError("weights do not sum to one")
        out = object.__new__(DiscreteMeasure)
        object.__setattr__(out, "atoms", self.atoms)
        object.__setattr__(out, "log_weights", lw)
        object.__setattr__(out, "_gram_cache", self._gram_cache)
        return out

    def to_dict(self) -> dict:
        return {"atoms": self.atoms.tolist(), "log_weights": self.log_weights.tolist()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> DiscreteMeasure:
        return cls.from_log_weights(d["atoms"], d["log_weights"])

    @classmethod
    def from_json(cls, s: str) -> DiscreteMeasure:
        return cls.from_dict(json.loads(s))


def _check_same_atoms(mu: DiscreteMeasure, nu: DiscreteMeasure):
    if mu.atoms.shape != nu.atoms.shape or not np.array_equal(mu.atoms, nu.atoms):
        raise ValueError("measures are supported on different atom sets")


def _dual_values(mu: DiscreteMeasure, xi) -> np.ndarray:
    v = np.asarray(xi, dtype=float).reshape(-1)
    if len(v) != mu.size:
        raise ValueError(f"dual function has {len(v)} values but measure has {mu.size} atoms")
    return v


def tv_norm(w) -> float:
    """Total variation norm of a signed weight vector."""
    return float(np.abs(np.asarray(w, dtype=float)).sum())


def kl_divergence(mu: DiscreteMeasure, nu: DiscreteMeasure) -> float:
    """Relative entropy KL(mu || nu) for measures on the same atoms."""
    _check_same_atoms(mu, nu)
    return max(float(mu.weights @ (mu.log_weights - nu.log_weights)), 0.0)


def linear_functional(mu: DiscreteMeasure, xi) -> float:
    """The pairing ``<xi, mu> = sum_i w_i xi_i``."""
    return float(mu.weights @ _dual_values(mu, xi))


def md_step_measure(mu0: DiscreteMeasure, xi, eta: float) -> DiscreteMeasure:
    """Entropic mirror step: ``w_+ proportional to w_0 * exp(-eta * xi)``."""
    if not eta > 0:
        raise ValueError(f"step size must be positive, got {eta}")
    v = _dual_values(mu0, xi)
    if np.any(np.isnan(v)):
        raise ValueError("NaN in dual function values")
    lw = mu0.log_weights - eta * v
    lw = lw - logsumexp(lw)
    if lw.min() < LOG_FLOOR:
        lw = np.maximum(lw, LOG_FLOOR)
        lw = lw - logsumexp(lw)
    return mu0.with_log_weights(lw)


def sample(mu: DiscreteMeasure, n: int, seed) -> np.ndarray:
    """``n`` i.i.d. atoms drawn from ``mu``; deterministic given ``seed``."""
    return mu.atoms[sample_indices(mu, n, seed)]


def sample_indices(mu: DiscreteMeasure, n: int, seed) -> np.ndarray:
    if n < 1:
        raise ValueError("sample size must be at least 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    w = mu.weights
    return rng.choice(mu.size, size=n, p=w / w.sum())
