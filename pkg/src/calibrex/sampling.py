"""Box domains, Latin hypercube designs and affine normalisation."""

from __future__ import annotations

import dataclasses
import logging

import numpy as np

from calibrex.errors import InvalidArgumentError

log = logging.getLogger(__name__)

DEFAULT_POOL_SIZE = 2000


@dataclasses.dataclass(frozen=True)
class BoxDomain:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.ndim != 1 or lo.shape != hi.shape or lo.size == 0:
            raise InvalidArgumentError(
                f"bounds must be equal-length non-empty vectors, got {lo.shape} and {hi.shape}"
            )
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise InvalidArgumentError("bounds must be finite")
        if np.any(lo >= hi):
            bad = np.flatnonzero(lo >= hi).tolist()
            raise InvalidArgumentError(f"lower >= upper in dimension(s) {bad}")
        lo.flags.writeable = False
        hi.flags.writeable = False
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.width))

    @classmethod
    def cube(cls, d: int, lo: float = -1.0, hi: float = 1.0) -> "BoxDomain":
        return cls(np.full(d, lo), np.full(d, hi))

    def contains(self, X, atol: float = 0.0) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.all((X >= self.lower - atol) & (X <= self.upper + atol), axis=1)

    def clip(self, X) -> np.ndarray:
        return np.clip(X, self.lower, self.upper)

    def to_dict(self) -> dict:
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "BoxDomain":
        return cls(d["lower"], d["upper"])


def lhs(domain: BoxDomain, n: int, rng: np.random.Generator) -> np.ndarray:
    """Latin hypercube design of ``n`` points, uniform within each stratum."""
    if n < 1:
        raise InvalidArgumentError(f"LHS needs n >= 1, got {n}")
    d = domain.dim
    strata = np.argsort(rng.random((d, n)), axis=1).T  # one permutation per column
    u = (strata + rng.random((n, d))) / n
    return domain.lower + u * domain.width


def normalize(domain: BoxDomain, theta) -> np.ndarray:
    """Map the box affinely onto [-1, 1]^d.  Out-of-box inputs are allowed and logged."""
    theta = np.asarray(theta, dtype=float)
    if not np.all(domain.contains(theta)):
        log.debug("normalizing a point outside its domain")
    return 2.0 * (theta - domain.lower) / domain.width - 1.0


def denormalize(domain: BoxDomain, z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    return domain.lower + (z + 1.0) * 0.5 * domain.width


def initial_design_size(d: int, requested: int | None = None) -> int:
    """Design size clamped to ``[2d, 10d]``; defaults to ``10d``."""
    if d < 1:
        raise InvalidArgumentError("dimension must be >= 1")
    if requested is None:
        return 10 * d
    return int(min(max(int(requested), 2 * d), 10 * d))
