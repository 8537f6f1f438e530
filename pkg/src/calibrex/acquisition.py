"""Acquisition scores and fantasy-based batch selection.

All three scores are oriented so that a larger value is more desirable for a
*minimisation* problem:

* PI  = Phi((best - tradeoff - mu) / sigma)
* EI  = sigma * (u Phi(u) + phi(u)),  u = (best - mu) / sigma
* UCB = -(mu - beta * sigma)

``sigma`` is the posterior standard deviation at the candidate.
"""

from __future__ import annotations

import dataclasses
import enum

import numpy as np
from scipy import special

from calibrex import gp as gplib
from calibrex.errors import InvalidArgumentError

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class AcquisitionFamily(str, enum.Enum):
    PI = "pi"
    EI = "ei"
    UCB = "ucb"


class FantasyStrategy(str, enum.Enum):
    RANDOM = "random"  # hallucinate a posterior draw
    KRIGING_BELIEVER = "kriging-believer"  # hallucinate the posterior mean


@dataclasses.dataclass(frozen=True)
class AcquisitionSpec:
    family: AcquisitionFamily = AcquisitionFamily.EI
    pi_tradeoff: float = 0.0
    pi_decay: bool = False
    ucb_beta: float = 2.0
    fantasy: FantasyStrategy = FantasyStrategy.RANDOM

    def __post_init__(self):
        object.__setattr__(self, "family", AcquisitionFamily(self.family))
        object.__setattr__(self, "fantasy", FantasyStrategy(self.fantasy))
        if self.pi_tradeoff < 0:
            raise InvalidArgumentError("pi_tradeoff must be >= 0")
        if self.ucb_beta <= 0:
            raise InvalidArgumentError("ucb_beta must be > 0")

    def tradeoff_at(self, iteration: int) -> float:
        """PI trade-off, optionally decayed as ``tradeoff * 0.9**iteration``."""
        if self.pi_decay:
            return self.pi_tradeoff * 0.9 ** iteration
        return self.pi_tradeoff

    def to_dict(self) -> dict:
        return {
            "family": self.family.value,
            "pi_tradeoff": self.pi_tradeoff,
            "pi_decay": self.pi_decay,
            "ucb_beta": self.ucb_beta,
            "fantasy": self.fantasy.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AcquisitionSpec":
        return cls(
            family=d.get("family", "ei"),
            pi_tradeoff=float(d.get("pi_tradeoff", 0.0)),
            pi_decay=bool(d.get("pi_decay", False)),
            ucb_beta=float(d.get("ucb_beta", 2.0)),
            fantasy=d.get("fantasy", "random"),
        )


def norm_cdf(z):
    return 0.5 * special.erfc(-np.asarray(z, dtype=float) / _SQRT2)


def norm_pdf(z):
    z = np.asarray(z, dtype=float)
    return _INV_SQRT_2PI * np.exp(-0.5 * z * z)


def score(spec: AcquisitionSpec, mu, sigma, best: float, iteration: int = 0):
    """Acquisition value(s); scalars in, scalar out, arrays broadcast."""
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if np.any(~(sigma > 0)):
        raise InvalidArgumentError("posterior standard deviation must be > 0")
    if spec.family is AcquisitionFamily.PI:
        out = norm_cdf((best - spec.tradeoff_at(iteration) - mu) / sigma)
    elif spec.family is AcquisitionFamily.EI:
        u = (best - mu) / sigma
        out = sigma * (u * norm_cdf(u) + norm_pdf(u))
        out = np.maximum(out, 0.0)
    else:
        out = -(mu - spec.ucb_beta * sigma)
    return float(out) if out.ndim == 0 else out


def select_batch(
    model: gplib.GpModel,
    pool,
    n: int,
    spec: AcquisitionSpec,
    rng: np.random.Generator,
    iteration: int = 0,
) -> np.ndarray:
    """Pick ``n`` distinct pool points by repeated argmax with fantasised outcomes.

    After each pick the point leaves the pool and a hallucinated outcome
    ``mu + z * sigma`` (``z`` standard normal, or 0 for the kriging-believer
    strategy) is appended to a scratch copy of the training set.  The
    incumbent ``best`` is the minimum of that scratch set.  Returns the picks
    in selection order; ``model`` itself is never modified.
    """
    pool = np.atleast_2d(np.asarray(pool, dtype=float))
    if pool.shape[0] == 0:
        raise InvalidArgumentError("candidate pool is empty")
    if n < 1 or n > pool.shape[0]:
        raise InvalidArgumentError(f"cannot select {n} points from a pool of {pool.shape[0]}")
    if not model.is_fitted:
        model = gplib.fit(model)

    available = np.ones(pool.shape[0], dtype=bool)
    X, y = model.train_X, model.train_y
    current = model
    picks = []
    for _ in range(n):
        idx = np.flatnonzero(available)
        post = gplib.predict(current, pool[idx], full_cov=False)
        sigma = post.std
        values = score(spec, post.mean, sigma, float(np.min(y)), iteration)
        k = int(np.argmax(values))
        chosen = idx[k]
        picks.append(chosen)
        available[chosen] = False

        z = 0.0
        if spec.fantasy is FantasyStrategy.RANDOM:
            z = float(rng.standard_normal())
        fantasy = post.mean[k] + z * sigma[k]
        X = np.vstack([X, pool[chosen]])
        y = np.append(y, fantasy)
        if len(picks) < n:
            current = gplib.fit(current.with_data(X, y))
    return pool[np.array(picks)]
