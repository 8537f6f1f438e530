"""Gaussian-process surrogate over the loss surface.

A :class:`GpModel` is an immutable value: :func:`fit` and
:func:`optimize_hyperparameters` return new models.  The posterior follows
the partitioned-Gaussian conditioning

    mu_post = m(X*) + K*e Kee^-1 (y - m(Xe))
    K_post  = K** - K*e Kee^-1 Ke*

with ``Kee`` carrying the noise variance and a fixed relative jitter on its
diagonal.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from typing import Callable, Optional

import numpy as np
from scipy import linalg

from calibrex.errors import InvalidArgumentError, NumericalError, StateError
from calibrex.kernels import (
    KernelSpec,
    covariance_from_distance,
    cross_kernel,
    kernel_matrix,
    pairwise_distances,
)

log = logging.getLogger(__name__)

#: Floor applied to posterior variances before they are used as scales.
VARIANCE_FLOOR = 1e-12


class ZeroMean:
    """The constant-zero prior mean."""

    def __call__(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.zeros(X.shape[0])

    def __repr__(self):
        return "ZeroMean()"


MeanFunction = Callable[[np.ndarray], np.ndarray]


@dataclasses.dataclass(frozen=True)
class Posterior:
    query: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    cov: Optional[np.ndarray] = None

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.maximum(self.var, VARIANCE_FLOOR))


@dataclasses.dataclass(frozen=True)
class GpModel:
    kernel: KernelSpec
    train_X: np.ndarray
    train_y: np.ndarray
    mean_fn: MeanFunction = dataclasses.field(default_factory=ZeroMean)
    chol: Optional[np.ndarray] = dataclasses.field(default=None, repr=False)
    alpha: Optional[np.ndarray] = dataclasses.field(default=None, repr=False)
    gram: Optional[np.ndarray] = dataclasses.field(default=None, repr=False)
    diagnostics: dict = dataclasses.field(default_factory=dict, compare=False)

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.train_X, dtype=float))
        y = np.asarray(self.train_y, dtype=float).ravel()
        if X.shape[0] != y.shape[0]:
            raise InvalidArgumentError(
                f"{X.shape[0]} training inputs but {y.shape[0]} training outputs"
            )
        if not np.all(np.isfinite(y)):
            raise InvalidArgumentError("training outputs must be finite")
        object.__setattr__(self, "train_X", X)
        object.__setattr__(self, "train_y", y)

    @property
    def is_fitted(self) -> bool:
        return self.chol is not None

    @property
    def n_train(self) -> int:
        return self.train_y.shape[0]

    def with_data(self, X, y) -> "GpModel":
        """Same kernel and mean, new training set; the factorization is dropped."""
        return GpModel(self.kernel, X, y, self.mean_fn)

    def with_kernel(self, kernel: KernelSpec) -> "GpModel":
        return GpModel(kernel, self.train_X, self.train_y, self.mean_fn)


def _cholesky(K: np.ndarray) -> np.ndarray:
    c, info = linalg.lapack.dpotrf(K, lower=1, clean=1, overwrite_a=0)
    if info != 0:
        index = int(info) - 1 if info > 0 else None
        smallest = float(np.linalg.eigvalsh(K)[0]) if K.shape[0] <= 2000 else None
        raise NumericalError(
            f"kernel matrix not positive definite after jitter: leading minor "
            f"{index} failed, smallest eigenvalue {smallest!r}",
            pivot_index=index,
            pivot_value=smallest,
        )
    return c


def _count_duplicates(X: np.ndarray) -> int:
    if X.shape[0] < 2:
        return 0
    _, counts = np.unique(X, axis=0, return_counts=True)
    return int(np.sum(counts - 1))


_SPLIT = 134217729.0  # 2**27 + 1


def _two_product(a: np.ndarray, b: np.ndarray):
    """Dekker's error-free product: ``a * b == p + e`` exactly."""
    p = a * b
    ca = _SPLIT * a
    a_hi = ca - (ca - a)
    a_lo = a - a_hi
    cb = _SPLIT * b
    b_hi = cb - (cb - b)
    b_lo = b - b_hi
    e = ((a_hi * b_hi - p) + a_hi * b_lo + a_lo * b_hi) + a_lo * b_lo
    return p, e


def _exact_residual(K: np.ndarray, b: np.ndarray, x_hi: np.ndarray, x_lo: np.ndarray) -> np.ndarray:
    """Correctly rounded ``b - K (x_hi + x_lo)``, one ``fsum`` per row."""
    p1, e1 = _two_product(K, x_hi[None, :])
    p2, e2 = _two_product(K, x_lo[None, :])
    terms = np.concatenate([-p1, -e1, -p2, -e2, b[:, None]], axis=1)
    return np.array([math.fsum(row) for row in terms])


def _refined_weights(chol: np.ndarray, K: np.ndarray, b: np.ndarray, steps: int = 3) -> np.ndarray:
    """``K^-1 b`` refined with exactly rounded residuals, returned in extended precision.

    Noise-free kernels on nearby points make ``K`` nearly singular; plain
    double precision then loses most digits of the weights, while this
    keeps the posterior mean accurate to roughly the rounding of the kernel
    entries themselves.
    """
    hi = linalg.cho_solve((chol, True), b)
    lo = np.zeros_like(hi)
    for _ in range(steps):
        r = _exact_residual(K, b, hi, lo)
        if not np.any(r):
            break
        d = linalg.cho_solve((chol, True), r)
        s = hi + (lo + d)
        lo = (lo + d) - (s - hi)
        hi = s
    return hi.astype(np.longdouble) + lo.astype(np.longdouble)


def _refined_solve(chol: np.ndarray, K: np.ndarray, B: np.ndarray, steps: int = 4) -> np.ndarray:
    """``K^-1 B`` for a block of right-hand sides, refined with extended-precision residuals."""
    X = linalg.cho_solve((chol, True), B)
    Kl = K.astype(np.longdouble)
    Bl = np.asarray(B, dtype=np.longdouble)
    Xl = X.astype(np.longdouble)
    for _ in range(steps):
        R = (Bl - Kl @ Xl).astype(float)
        if not np.any(R):
            break
        Xl = Xl + linalg.cho_solve((chol, True), R).astype(np.longdouble)
    return Xl.astype(float)


def fit(model: GpModel) -> GpModel:
    """Factorize the training covariance and cache the weights ``Kee^-1 (y - m)``."""
    if model.n_train < 1:
        raise InvalidArgumentError("fit needs at least one training point")
    K = kernel_matrix(model.kernel, model.train_X, add_noise=True)
    K[np.diag_indices_from(K)] += model.kernel.jitter
    chol = _cholesky(K)
    resid = model.train_y - np.asarray(model.mean_fn(model.train_X), dtype=float).ravel()
    alpha = _refined_weights(chol, K, resid)
    diag = {
        "duplicates": _count_duplicates(model.train_X),
        "min_pivot": float(np.min(np.diag(chol))),
    }
    if diag["duplicates"]:
        log.debug("GP training set has %d duplicate inputs", diag["duplicates"])
    return dataclasses.replace(model, chol=chol, alpha=alpha, gram=K, diagnostics=diag)


def predict(model: GpModel, X_star, full_cov: bool = True) -> Posterior:
    """Posterior mean and covariance (or just the variance diagonal) at ``X_star``."""
    if not model.is_fitted:
        raise StateError("predict() called on an unfitted GpModel; call fit() first")
    X_star = np.atleast_2d(np.asarray(X_star, dtype=float))
    Ks = cross_kernel(model.kernel, model.train_X, X_star)
    prior_mean = np.asarray(model.mean_fn(X_star), dtype=float).ravel()
    mean = prior_mean + (Ks.T.astype(np.longdouble) @ model.alpha).astype(float)
    if full_cov:
        W = _refined_solve(model.chol, model.gram, Ks)
        cov = kernel_matrix(model.kernel, X_star) - Ks.T @ W
        cov = 0.5 * (cov + cov.T)
        var = np.diag(cov).copy()
    else:
        v = linalg.solve_triangular(model.chol, Ks, lower=True, check_finite=False)
        cov = None
        var = model.kernel.output_variance - np.sum(v * v, axis=0)
    return Posterior(query=X_star, mean=mean, var=var, cov=cov)


def sample_posterior(post: Posterior, n_draws: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n_draws`` joint samples; rows are draws, columns query points."""
    if post.cov is None:
        raise InvalidArgumentError("sampling needs the full posterior covariance")
    m = post.mean.shape[0]
    cov = post.cov
    scale = max(float(np.max(np.abs(np.diag(cov)), initial=0.0)), 1.0)
    L = _cholesky(cov + 1e-10 * scale * np.eye(m))
    if not np.any(np.diag(cov) > 0):
        L = np.zeros_like(L)
    z = rng.standard_normal((n_draws, m))
    return post.mean[None, :] + z @ L.T


def log_marginal_likelihood(model: GpModel) -> float:
    """``-1/2 r' K^-1 r - 1/2 log|K| - n/2 log(2 pi)`` with ``r = y - m(X)``."""
    if not model.is_fitted:
        raise StateError("log_marginal_likelihood() needs a fitted model")
    resid = model.train_y - np.asarray(model.mean_fn(model.train_X), dtype=float).ravel()
    n = model.n_train
    return float(
        -0.5 * resid @ model.alpha
        - np.sum(np.log(np.diag(model.chol)))
        - 0.5 * n * math.log(2.0 * math.pi)
    )


@dataclasses.dataclass(frozen=True)
class HyperBounds:
    """Box bounds for the searched hyperparameters (all strictly positive)."""

    output_variance: tuple = (1e-3, 1e3)
    length_scale: tuple = (1e-2, 1e1)
    noise_variance: tuple = (1e-10, 1e-1)

    def __post_init__(self):
        for name in ("output_variance", "length_scale", "noise_variance"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi) or not math.isfinite(hi):
                raise InvalidArgumentError(f"bad bounds for {name}: {(lo, hi)}")

    def as_log_array(self) -> np.ndarray:
        return np.log(
            np.array([self.output_variance, self.length_scale, self.noise_variance], dtype=float)
        )

    @classmethod
    def scaled_to(cls, y_scale: float, length=(1e-2, 1e1)) -> "HyperBounds":
        """Bounds relative to the mean square ``y_scale`` of the centred targets."""
        s = max(float(y_scale), 1e-12)
        return cls(
            output_variance=(1e-3 * s, 1e2 * s),
            length_scale=tuple(length),
            noise_variance=(1e-10 * s, 1e-1 * s),
        )

    def to_dict(self) -> dict:
        return {
            "output_variance": list(self.output_variance),
            "length_scale": list(self.length_scale),
            "noise_variance": list(self.noise_variance),
        }


_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class _NegLogLik:
    """Negative log-likelihood over log-hyperparameters, reusing the distance matrix."""

    def __init__(self, model: GpModel):
        self.model = model
        self.dist = pairwise_distances(model.train_X, model.train_X)
        self.resid = model.train_y - np.asarray(
            model.mean_fn(model.train_X), dtype=float
        ).ravel()
        self.n = model.n_train
        self.evaluations = 0

    def kernel_at(self, theta: np.ndarray) -> KernelSpec:
        s2, ell, noise = np.exp(theta)
        return self.model.kernel.replace(
            output_variance=float(s2), length_scale=float(ell), noise_variance=float(noise)
        )

    def __call__(self, theta: np.ndarray) -> float:
        self.evaluations += 1
        spec = self.kernel_at(theta)
        K = covariance_from_distance(spec, self.dist)
        K[np.diag_indices_from(K)] += spec.noise_variance + spec.jitter
        c, info = linalg.lapack.dpotrf(K, lower=1, clean=0, overwrite_a=1)
        if info != 0:
            return math.inf
        alpha = linalg.cho_solve((c, True), self.resid, check_finite=False)
        val = (
            0.5 * self.resid @ alpha
            + np.sum(np.log(np.diag(c)))
            + 0.5 * self.n * math.log(2.0 * math.pi)
        )
        return float(val) if math.isfinite(val) else math.inf


def _golden_section(f, lo: float, hi: float, tol: float) -> tuple:
    a, b = lo, hi
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = f(d)
    return (c, fc) if fc <= fd else (d, fd)


def optimize_hyperparameters(
    model: GpModel,
    bounds: HyperBounds,
    rng: np.random.Generator,
    n_starts: int = 8,
    sweeps: int = 3,
    tol: float = 0.05,
) -> GpModel:
    """Maximise the log marginal likelihood over (variance, length scale, noise).

    Multi-start coordinate search in log space: every start does ``sweeps``
    passes of golden-section minimisation along each coordinate within
    ``bounds``.  The first start is the incoming hyperparameters clipped to
    the bounds; the rest are log-uniform draws from ``rng``.  The incoming
    model is returned unchanged if nothing beats it.
    """
    if model.n_train < 2:
        raise InvalidArgumentError("hyperparameter search needs at least 2 training points")
    objective = _NegLogLik(model)
    box = bounds.as_log_array()
    k = model.kernel
    incoming = np.log([k.output_variance, k.length_scale, max(k.noise_variance, 1e-300)])
    incoming_val = objective(incoming)

    starts = [np.clip(incoming, box[:, 0], box[:, 1])]
    for _ in range(n_starts - 1):
        starts.append(rng.uniform(box[:, 0], box[:, 1]))

    best_theta, best_val = incoming, incoming_val
    for theta0 in starts:
        theta = theta0.copy()
        val = objective(theta)
        for _ in range(sweeps):
            for j in range(3):
                def along(t, j=j, theta=theta):
                    trial = theta.copy()
                    trial[j] = t
                    return objective(trial)

                t_best, v_best = _golden_section(along, box[j, 0], box[j, 1], tol)
                if v_best < val:
                    theta[j], val = t_best, v_best
        if val < best_val:
            best_theta, best_val = theta, val

    if not math.isfinite(best_val):
        log.warning("hyperparameter search failed at every start; keeping incoming model")
        return model
    if best_val >= incoming_val:
        return model if model.is_fitted else fit(model)
    return fit(model.with_kernel(objective.kernel_at(best_theta)))
