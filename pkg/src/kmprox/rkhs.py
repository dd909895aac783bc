"""Kernels, finite kernel expansions, mean embeddings and MMD.

An RKHS function is stored as a finite expansion ``f = sum_j alpha_j k(z_j, .)``
over a dictionary of points.  Every derivative that shows up in the saddle
problems of this package lives in such a span, so the representation is exact.
"""
from __future__ import annotations

import math
import weakref
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from .measure import DiscreteMeasure

DUPLICATE_TOL = 1e-12
NORM_TOL = 1e-10

# dictionaries already checked to be duplicate-free, keyed by identity
_UNIQUE_DICTS: weakref.WeakValueDictionary = weakref.WeakValueDictionary()


def as_points(x) -> np.ndarray:
    """Coerce ``x`` to a 2-D float array of shape (n, d)."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise ValueError(f"points must be at most 2-D, got shape {arr.shape}")
    return arr


def _sq_dists(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    XX = (X**2).sum(1)[:, None]
    YY = (Y**2).sum(1)[None, :]
    D2 = XX + YY - 2.0 * X @ Y.T
    np.maximum(D2, 0.0, out=D2)
    return D2


@dataclass(frozen=True)
class Kernel:
    """Translation-invariant kernel with ``k(x, x) = 1``."""

    kind: str = "gaussian"
    bandwidth: float = 1.0

    def __post_init__(self):
        if self.kind not in ("gaussian", "laplacian"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if not (self.bandwidth > 0 and math.isfinite(self.bandwidth)):
            raise ValueError("kernel bandwidth must be a positive finite number")

    @property
    def C(self) -> float:
        """sup_x k(x, x)."""
        return 1.0

    def gram(self, X, Y=None) -> np.ndarray:
        X = as_points(X)
        Y = X if Y is None else as_points(Y)
        if X.shape[1] != Y.shape[1]:
            raise ValueError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
        D2 = _sq_dists(X, Y)
        if Y is X:
            # exact zeros on the diagonal, exact symmetry
            np.fill_diagonal(D2, 0.0)
            D2 = 0.5 * (D2 + D2.T)
        if self.kind == "gaussian":
            return np.exp(-D2 / (2.0 * self.bandwidth**2))
        return np.exp(-np.sqrt(D2) / self.bandwidth)

    def __call__(self, x, y) -> float:
        return float(self.gram(np.atleast_1d(np.asarray(x, float))[None, :],
                               np.atleast_1d(np.asarray(y, float))[None, :])[0, 0])

    def to_dict(self) -> dict:
        return {"kind": self.kind, "bandwidth": self.bandwidth}


@dataclass(frozen=True, eq=False)
class RkhsFunction:
    dictionary: np.ndarray
    coefficients: np.ndarray
    kernel: Kernel
    gram: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        Z = as_points(self.dictionary)
        a = np.asarray(self.coefficients, dtype=float).reshape(-1)
        if len(Z) != len(a):
            raise ValueError(f"{len(Z)} dictionary points but {len(a)} coefficients")
        if not np.all(np.isfinite(a)):
            raise ValueError("coefficients must be finite")
        object.__setattr__(self, "dictionary", Z)
        object.__setattr__(self, "coefficients", a)
        if self.gram is None:
            object.__setattr__(self, "gram", self.kernel.gram(Z))

    # construction helpers
    @classmethod
    def zero(cls, kernel: Kernel, dim: int = 1, dictionary=None) -> RkhsFunction:
        if dictionary is None:
            return cls(np.zeros((0, dim)), np.zeros(0), kernel, np.zeros((0, 0)))
        Z = as_points(dictionary)
        return cls(Z, np.zeros(len(Z)), kernel)

    @classmethod
    def section(cls, kernel: Kernel, x, weight: float = 1.0) -> RkhsFunction:
        """The kernel section ``weight * k(x, .)``."""
        return cls(as_points(np.atleast_1d(np.asarray(x, float))[None, :]), [weight], kernel)

    def with_coefficients(self, coefficients) -> RkhsFunction:
        a = np.asarray(coefficients, dtype=float).reshape(-1)
        if a.shape != self.coefficients.shape:
            raise ValueError(f"{len(self)} dictionary points but {len(a)} coefficients")
        if not np.isfinite(a).all():
            raise ValueError("coefficients must be finite")
        # same dictionary and Gram: skip re-validation, this sits on the solver's hot path
        out = object.__new__(RkhsFunction)
        for name, val in (("dictionary", self.dictionary), ("coefficients", a),
                          ("kernel", self.kernel), ("gram", self.gram)):
            object.__setattr__(out, name, val)
        return out

    @property
    def dim(self) -> int:
        return self.dictionary.shape[1]

    def __len__(self) -> int:
        return len(self.coefficients)

    # evaluation
    def __call__(self, x) -> np.ndarray | float:
        X = np.asarray(x, dtype=float)
        scalar = X.ndim == 0 or (X.ndim == 1 and X.shape[0] == self.dim and self.dim > 1)
        if X.ndim == 1 and self.dim > 1:
            X = X[None, :]
        X = as_points(X)
        if X.shape[1] != self.dim and len(self):
            raise ValueError(f"point dimension {X.shape[1]} != dictionary dimension {self.dim}")
        if not len(self):
            out = np.zeros(len(X))
        else:
            out = self.kernel.gram(X, self.dictionary) @ self.coefficients
        return float(out[0]) if scalar else out

    def norm_sq(self) -> float:
        v = float(self.coefficients @ self.gram @ self.coefficients)
        if v < 0.0:
            if v < -NORM_TOL:
                raise FloatingPointError(f"negative RKHS norm^2 {v}")
            v = 0.0
        return v

    def norm(self) -> float:
        return math.sqrt(self.norm_sq())

    # arithmetic; dictionaries are concatenated unless identical
    def _same_dictionary(self, other: RkhsFunction) -> bool:
        return self.dictionary is other.dictionary or (
            self.dictionary.shape == other.dictionary.shape
            and np.array_equal(self.dictionary, other.dictionary))

    def _check_kernel(self, other: RkhsFunction):
        if self.kernel != other.kernel:
            raise ValueError("RKHS functions use different kernels")

    def __add__(self, other: RkhsFunction) -> RkhsFunction:
        self._check_kernel(other)
        if self._same_dictionary(other):
            return self.with_coefficients(self.coefficients + other.coefficients)
        if not len(other):
            return self
        if not len(self):
            return other
        Z = np.vstack([self.dictionary, other.dictionary])
        K12 = self.kernel.gram(self.dictionary, other.dictionary)
        G = np.block([[self.gram, K12], [K12.T, other.gram]])
        return RkhsFunction(Z, np.concatenate([self.coefficients, other.coefficients]),
                            self.kernel, G)

    def __mul__(self, c: float) -> RkhsFunction:
        return self.with_coefficients(float(c) * self.coefficients)

    __rmul__ = __mul__

    def __neg__(self) -> RkhsFunction:
        return self * -1.0

    def __sub__(self, other: RkhsFunction) -> RkhsFunction:
        return self + (-other)

    def __repr__(self) -> str:
        return f"RkhsFunction(n={len(self)}, d={self.dim}, norm={self.norm():.4g})"


def evaluate(f: RkhsFunction, x) -> float:
    """Point evaluation ``f(x)``."""
    X = as_points(np.atleast_1d(np.asarray(x, float))[None, :]) if np.ndim(x) <= 1 else as_points(x)
    if len(f) and X.shape[1] != f.dim:
        raise ValueError(f"point dimension {X.shape[1]} != dictionary dimension {f.dim}")
    return float(f(X)[0])


def inner(f: RkhsFunction, g: RkhsFunction) -> float:
    """RKHS inner product of two expansions (dictionaries may differ)."""
    f._check_kernel(g)
    if not len(f) or not len(g):
        return 0.0
    if f._same_dictionary(g):
        K = f.gram
    else:
        K = f.kernel.gram(f.dictionary, g.dictionary)
    return float(f.coefficients @ K @ g.coefficients)


def mean_embedding(mu: DiscreteMeasure, kernel: Kernel) -> RkhsFunction:
    """Kernel mean embedding of a discrete measure."""
    if mu.size == 0:
        raise ValueError("empty measure")
    return RkhsFunction(mu.atoms, mu.weights, kernel, mu.gram(kernel))


def mmd(mu: DiscreteMeasure, nu: DiscreteMeasure, kernel: Kernel) -> float:
    """Maximum mean discrepancy ``||e_mu - e_nu||``."""
    return (mean_embedding(mu, kernel) - mean_embedding(nu, kernel)).norm()


@dataclass(frozen=True, eq=False)
class HilbertBall:
    """Closed ball ``{f : ||f - center|| <= radius}``; ``radius = inf`` means the whole space."""

    radius: float = math.inf
    center: RkhsFunction | None = None

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("ball radius must be positive")

    def _offset(self, f: RkhsFunction) -> RkhsFunction:
        return f if self.center is None else f - self.center

    def distance_from_center(self, f: RkhsFunction) -> float:
        return self._offset(f).norm()

    def contains(self, f: RkhsFunction) -> bool:
        return math.isinf(self.radius) or self.distance_from_center(f) <= self.radius + 1e-12

    def project(self, g: RkhsFunction) -> RkhsFunction:
        if math.isinf(self.radius):
            return g
        d = self._offset(g)
        r = d.norm()
        if r <= self.radius:
            return g
        scaled = d * (self.radius / r)
        return scaled if self.center is None else self.center + scaled


def md_step_hilbert(f0: RkhsFunction, xi: RkhsFunction, eta: float,
                    ball: HilbertBall) -> RkhsFunction:
    """Mirror step with the squared-norm prox: project ``f0 - eta * xi`` onto ``ball``."""
    if not eta > 0:
        raise ValueError(f"step size must be positive, got {eta}")
    return ball.project(f0 - eta * xi)


def dictionary_compress(f: RkhsFunction, tol: float = 0.0) -> RkhsFunction:
    """Merge duplicate atoms; with ``tol > 0`` also drop atoms that barely matter.

    An atom ``j`` is dropped when removing it changes ``f`` by less than ``tol``
    in RKHS norm, i.e. ``|alpha_j| * sqrt(k(z_j, z_j)) < tol``.  Drops are
    accumulated so the total change stays below ``tol``.
    """
    if tol < 0:
        raise ValueError("tol must be nonnegative")
    n = len(f)
    if n == 0:
        return f
    Z, a = f.dictionary, f.coefficients
    if _UNIQUE_DICTS.get(id(Z)) is Z:
        rep = np.arange(n)
    else:
        # group exact/near duplicates; the lowest index represents each group
        dup = _sq_dists(Z, Z) < DUPLICATE_TOL**2
        rep = np.argmax(dup, axis=1)
    if np.all(rep == np.arange(n)):
        _UNIQUE_DICTS[id(Z)] = Z
        out = f
    else:
        keep = np.flatnonzero(rep == np.arange(n))
        coef = np.zeros(n)
        np.add.at(coef, rep, a)
        out = RkhsFunction(Z[keep], coef[keep], f.kernel, f.gram[np.ix_(keep, keep)])
    if tol == 0.0:
        return out
    diag = np.sqrt(np.diag(out.gram)) if len(out) else np.zeros(0)
    contrib = np.abs(out.coefficients) * diag
    order = np.argsort(contrib, kind="stable")
    budget, drop = tol, []
    for j in order:
        # triangle inequality keeps ||f_before - f_after|| <= sum of dropped contributions
        if contrib[j] < budget:
            budget -= contrib[j]
            drop.append(j)
        else:
            break
    if not drop:
        return out
    keep = np.setdiff1d(np.arange(len(out)), drop)
    return RkhsFunction(out.dictionary[keep], out.coefficients[keep], f.kernel,
                        out.gram[np.ix_(keep, keep)])
