"""Isotropic stationary covariance functions.

Two families are supported, the squared exponential

    k(r) = s2 * exp(-r**2 / (2 * ell**2))

and the Matérn family

    k(r) = s2 * 2**(1 - nu) / Gamma(nu) * (sqrt(2 nu) r / ell)**nu * K_nu(sqrt(2 nu) r / ell)

with ``r = ||x - x'||``.  Matérn uses closed forms for nu in {1/2, 3/2, 5/2}
and the Bessel expression otherwise; the value at r = 0 is s2 (continuous
limit).  The observation-noise variance lives on :class:`KernelSpec` but is
only ever added by :func:`kernel_matrix` with ``add_noise=True``.
"""

from __future__ import annotations

import dataclasses
import enum
import math

import numpy as np
from scipy import special

from calibrex.errors import InvalidArgumentError

#: Relative diagonal jitter (times output variance) added before every factorization.
JITTER = 1e-10


class KernelFamily(str, enum.Enum):
    SQUARED_EXPONENTIAL = "se"
    MATERN = "matern"


@dataclasses.dataclass(frozen=True)
class KernelSpec:
    family: KernelFamily = KernelFamily.MATERN
    output_variance: float = 1.0
    length_scale: float = 1.0
    smoothness: float = 2.5
    noise_variance: float = 0.0

    def __post_init__(self):
        try:
            object.__setattr__(self, "family", KernelFamily(self.family))
        except ValueError:
            raise InvalidArgumentError(f"unknown kernel family {self.family!r}") from None
        vals = (self.output_variance, self.length_scale, self.smoothness, self.noise_variance)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidArgumentError(f"non-finite kernel hyperparameter in {self}")
        if self.output_variance <= 0:
            raise InvalidArgumentError("output_variance must be > 0")
        if self.length_scale <= 0:
            raise InvalidArgumentError("length_scale must be > 0")
        if self.family is KernelFamily.MATERN and self.smoothness <= 0:
            raise InvalidArgumentError("Matérn smoothness must be > 0")
        if self.noise_variance < 0:
            raise InvalidArgumentError("noise_variance must be >= 0")

    @property
    def jitter(self) -> float:
        return JITTER * self.output_variance

    def replace(self, **changes) -> "KernelSpec":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "family": self.family.value,
            "output_variance": self.output_variance,
            "length_scale": self.length_scale,
            "smoothness": self.smoothness,
            "noise_variance": self.noise_variance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KernelSpec":
        return cls(
            family=d.get("family", "matern"),
            output_variance=float(d.get("output_variance", 1.0)),
            length_scale=float(d.get("length_scale", 1.0)),
            smoothness=float(d.get("smoothness", 2.5)),
            noise_variance=float(d.get("noise_variance", 0.0)),
        )


def _as_points(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2:
        raise InvalidArgumentError(f"expected a list of vectors, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise InvalidArgumentError("non-finite input coordinates")
    return X


def pairwise_distances(X, Y) -> np.ndarray:
    """Euclidean distance matrix between the rows of ``X`` and ``Y``."""
    X = _as_points(X)
    Y = _as_points(Y)
    if X.shape[1] != Y.shape[1]:
        raise InvalidArgumentError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    sq = (
        np.sum(X * X, axis=1)[:, None]
        + np.sum(Y * Y, axis=1)[None, :]
        - 2.0 * X @ Y.T
    )
    np.maximum(sq, 0.0, out=sq)
    # The expansion above loses precision for nearby points; recompute small
    # entries directly so identical inputs give exactly zero.
    small = sq < 1e-6 * (1.0 + np.abs(X).max(initial=0.0) ** 2)
    if np.any(small):
        i, j = np.nonzero(small)
        diff = X[i] - Y[j]
        sq[i, j] = np.sum(diff * diff, axis=1)
    return np.sqrt(sq)


def covariance_from_distance(spec: KernelSpec, r) -> np.ndarray:
    """Evaluate the (noise-free) kernel on an array of distances."""
    r = np.asarray(r, dtype=float)
    s2 = spec.output_variance
    if spec.family is KernelFamily.SQUARED_EXPONENTIAL:
        return s2 * np.exp(-0.5 * (r / spec.length_scale) ** 2)

    nu = spec.smoothness
    if nu == 0.5:
        return s2 * np.exp(-r / spec.length_scale)
    if nu == 1.5:
        a = math.sqrt(3.0) * r / spec.length_scale
        return s2 * (1.0 + a) * np.exp(-a)
    if nu == 2.5:
        a = math.sqrt(5.0) * r / spec.length_scale
        return s2 * (1.0 + a + a * a / 3.0) * np.exp(-a)
    return s2 * matern_bessel(r / spec.length_scale, nu)


def _log_kv_large_order(nu: float, a: np.ndarray) -> np.ndarray:
    """``log K_nu(a)`` from the uniform asymptotic expansion in the order (two correction terms)."""
    z = a / nu
    root = np.sqrt(1.0 + z * z)
    t = 1.0 / root
    eta = root + np.log(z / (1.0 + root))
    u1 = (3.0 * t - 5.0 * t**3) / 24.0
    u2 = (81.0 * t**2 - 462.0 * t**4 + 385.0 * t**6) / 1152.0
    series = 1.0 - u1 / nu + u2 / nu**2
    return 0.5 * np.log(np.pi / (2.0 * nu)) - 0.5 * np.log(root) - nu * eta + np.log(series)


def matern_bessel(scaled_r, nu: float) -> np.ndarray:
    """Unit-variance Matérn correlation from the modified Bessel function.

    ``scaled_r`` is ``r / ell``.  Evaluated in log space so large ``nu`` does
    not overflow Gamma or K_nu; orders above 100 use the large-order expansion.
    """
    scaled_r = np.asarray(scaled_r, dtype=float)
    out = np.ones_like(scaled_r)
    pos = scaled_r > 0
    if np.any(pos):
        a = math.sqrt(2.0 * nu) * scaled_r[pos]
        if nu > 100.0:
            log_k = _log_kv_large_order(nu, a)
        else:
            log_k = np.log(special.kve(nu, a)) - a  # kve(nu, a) = kv(nu, a) * exp(a)
        log_val = (1.0 - nu) * math.log(2.0) - special.gammaln(nu) + nu * np.log(a) + log_k
        out[pos] = np.exp(log_val)
    return np.minimum(out, 1.0)


def kernel_value(spec: KernelSpec, x, x_prime) -> float:
    """Covariance between two points (no noise term)."""
    x = np.asarray(x, dtype=float).ravel()
    x_prime = np.asarray(x_prime, dtype=float).ravel()
    if x.shape != x_prime.shape:
        raise InvalidArgumentError(f"dimension mismatch: {x.shape} vs {x_prime.shape}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(x_prime))):
        raise InvalidArgumentError("non-finite input coordinates")
    r = float(np.linalg.norm(x - x_prime))
    return float(covariance_from_distance(spec, r))


def kernel_matrix(spec: KernelSpec, X, add_noise: bool = False) -> np.ndarray:
    """Gram matrix of ``X``; ``add_noise`` puts the noise variance on the diagonal."""
    X = _as_points(X)
    if X.shape[0] == 0:
        raise InvalidArgumentError("kernel_matrix needs at least one point")
    K = covariance_from_distance(spec, pairwise_distances(X, X))
    K = 0.5 * (K + K.T)
    if add_noise:
        K[np.diag_indices_from(K)] += spec.noise_variance
    return K


def cross_kernel(spec: KernelSpec, X, X_star) -> np.ndarray:
    """Rectangular covariance between two point sets; never includes noise."""
    X = _as_points(X)
    X_star = _as_points(X_star)
    return covariance_from_distance(spec, pairwise_distances(X, X_star))
