"""Linear dimension reduction by active subspaces.

Everything here works in normalised coordinates, i.e. the original box is
assumed to be [-1, 1]^d.  Gradients are estimated by local linear
least-squares fits on nearest neighbours, the averaged outer-product matrix
is eigendecomposed, and the active dimension is placed at the largest
log-ratio gap of the eigenvalue spectrum.
"""

from __future__ import annotations

import dataclasses
import itertools
import logging

import numpy as np
from scipy import linalg

from calibrex.errors import InfeasibleLatentError, InvalidArgumentError
from calibrex.sampling import BoxDomain

log = logging.getLogger(__name__)

RIDGE = 1e-8
RECOVER_MAX_ITER = 500
RECOVER_TOL = 1e-8


def estimate_gradients(X, f, k_neighbors: int | None = None):
    """Local-linear-regression gradient estimate at every sample.

    Returns ``(gradients, ridge_flags)`` where ``ridge_flags[i]`` is True when
    the local system at sample ``i`` was rank deficient and the ridge
    fallback was used.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    f = np.asarray(f, dtype=float).ravel()
    N, d = X.shape
    if f.shape[0] != N:
        raise InvalidArgumentError("one loss value per sample required")
    if N < d + 2:
        raise InvalidArgumentError(f"need at least d + 2 = {d + 2} samples, got {N}")
    k = min(2 * (d + 1), N) if k_neighbors is None else min(int(k_neighbors), N)
    if k < d + 1:
        raise InvalidArgumentError(f"k_neighbors must be >= d + 1 = {d + 1}")

    sq = np.sum((X[:, None, :] - X[None, :, :]) ** 2, axis=2)
    order = np.argsort(sq, axis=1, kind="stable")[:, :k]
    grads = np.empty((N, d))
    flags = np.zeros(N, dtype=bool)
    for i in range(N):
        nb = order[i]
        A = np.hstack([np.ones((k, 1)), X[nb] - X[i]])
        coef, _, rank, _ = np.linalg.lstsq(A, f[nb], rcond=None)
        if rank < d + 1:
            flags[i] = True
            coef = np.linalg.solve(A.T @ A + RIDGE * np.eye(d + 1), A.T @ f[nb])
        grads[i] = coef[1:]
    if flags.any():
        log.info("ridge fallback used for %d of %d gradient fits", flags.sum(), N)
    return grads, flags


def build_subspace(gradients):
    """Eigen-decomposition of ``C = mean(g g^T)``, eigenvalues non-increasing.

    Eigenvector signs are fixed so the largest-magnitude entry of each
    column is positive.
    """
    G = np.atleast_2d(np.asarray(gradients, dtype=float))
    if G.shape[0] < 1:
        raise InvalidArgumentError("need at least one gradient")
    C = G.T @ G / G.shape[0]
    vals, vecs = np.linalg.eigh(0.5 * (C + C.T))
    order = np.argsort(vals)[::-1]
    vals = np.maximum(vals[order], 0.0)
    vecs = vecs[:, order]
    lead = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[lead, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vals, vecs * signs


def detect_gap(eigvals) -> int:
    """Active dimension at the largest ``log10(l_i / l_{i+1})`` gap.

    Eigenvalues are floored at ``1e-12 * l_1`` first; ties go to the smaller
    dimension.  A non-positive leading eigenvalue means no reduction.
    """
    lam = np.asarray(eigvals, dtype=float).ravel()
    if lam.size < 2:
        raise InvalidArgumentError("gap detection needs at least 2 eigenvalues")
    if lam[0] <= 0:
        log.warning("leading eigenvalue is %g; keeping all %d dimensions", lam[0], lam.size)
        return lam.size
    floored = np.maximum(lam, 1e-12 * lam[0])
    gaps = np.log10(floored[:-1] / floored[1:])
    n = int(np.argmax(gaps)) + 1  # argmax returns the first maximum
    if np.all(gaps <= 0):
        log.warning("no clear gap in the eigenvalue spectrum; using active dimension %d", n)
    return n


@dataclasses.dataclass(frozen=True)
class Subspace:
    eigvecs: np.ndarray
    eigvals: np.ndarray
    active_dim: int

    def __post_init__(self):
        W = np.atleast_2d(np.asarray(self.eigvecs, dtype=float))
        lam = np.asarray(self.eigvals, dtype=float).ravel()
        d = W.shape[0]
        if W.shape != (d, d) or lam.size != d:
            raise InvalidArgumentError("eigvecs must be d x d with d eigenvalues")
        if not 1 <= self.active_dim <= d:
            raise InvalidArgumentError(f"active_dim must lie in [1, {d}]")
        object.__setattr__(self, "eigvecs", W)
        object.__setattr__(self, "eigvals", lam)
        object.__setattr__(self, "active_dim", int(self.active_dim))

    @property
    def dim(self) -> int:
        return self.eigvecs.shape[0]

    @property
    def W1(self) -> np.ndarray:
        return self.eigvecs[:, : self.active_dim]

    @property
    def W2(self) -> np.ndarray:
        return self.eigvecs[:, self.active_dim :]

    @property
    def latent_bounds(self) -> BoxDomain:
        return latent_box(self)

    def to_dict(self) -> dict:
        return {
            "eigvecs": self.eigvecs.tolist(),
            "eigvals": self.eigvals.tolist(),
            "active_dim": self.active_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Subspace":
        return cls(np.array(d["eigvecs"]), np.array(d["eigvals"]), d["active_dim"])


def find_active_subspace(X, f, k_neighbors=None, active_dim=None) -> Subspace:
    """Gradients, eigendecomposition and gap detection in one call.

    ``active_dim`` overrides gap detection when given.
    """
    grads, _ = estimate_gradients(X, f, k_neighbors)
    vals, vecs = build_subspace(grads)
    n = detect_gap(vals) if active_dim is None else int(active_dim)
    return Subspace(vecs, vals, n)


def project(sub: Subspace, x) -> np.ndarray:
    """Active coordinates ``W1^T x`` (rows of ``x`` are points)."""
    x = np.asarray(x, dtype=float)
    return x @ sub.W1


def latent_box(sub: Subspace, original_box: BoxDomain | None = None) -> BoxDomain:
    """Exact per-coordinate image interval of [-1, 1]^d under ``W1^T``.

    ``original_box`` is accepted for interface symmetry and must be the
    normalised cube when given.
    """
    if original_box is not None and not (
        np.all(original_box.lower == -1.0) and np.all(original_box.upper == 1.0)
    ):
        raise InvalidArgumentError("latent_box works on the normalised [-1, 1]^d cube")
    half = np.sum(np.abs(sub.W1), axis=0)
    if np.any(half <= 0):
        raise InvalidArgumentError("degenerate (zero) active direction")
    return BoxDomain(-half, half)


def _facet_normals(W1: np.ndarray) -> np.ndarray:
    """Candidate facet normals of the zonotope ``W1^T [-1, 1]^d``."""
    d, n = W1.shape
    if n == 1:
        return np.ones((1, 1))
    normals = []
    for subset in itertools.combinations(range(d), n - 1):
        G = W1[list(subset)]
        ns = linalg.null_space(G)
        if ns.shape[1] == 1:
            normals.append(ns[:, 0])
    return np.array(normals)


class _Zonotope:
    def __init__(self, W1: np.ndarray):
        self.normals = _facet_normals(W1)
        self.support = np.sum(np.abs(self.normals @ W1.T), axis=1)

    def slack(self, V: np.ndarray) -> np.ndarray:
        """``max_a |a.v| / h(a)``: <= 1 inside the image, > 1 outside."""
        return np.max(np.abs(np.atleast_2d(V) @ self.normals.T) / self.support, axis=1)


def is_feasible(sub: Subspace, V, tol: float = 1e-10) -> np.ndarray:
    """Whether each latent point is the image of some point of [-1, 1]^d."""
    return _Zonotope(sub.W1).slack(V) <= 1.0 + tol


def shrink_to_feasible(sub: Subspace, V, margin: float = 1e-9) -> np.ndarray:
    """Radially pull infeasible latent points back just inside the image."""
    V = np.atleast_2d(np.asarray(V, dtype=float))
    s = _Zonotope(sub.W1).slack(V)
    factor = np.where(s > 1.0, (1.0 - margin) / s, 1.0)
    return V * factor[:, None]


def recover(sub: Subspace, v, original_box: BoxDomain | None = None) -> np.ndarray:
    """Original-space point ``W1 v + W2 z`` with the smallest ``||z||`` inside the box.

    Solved through the dual of ``min 1/2 ||x||^2  s.t.  W1^T x = v, x in box``
    (for such ``x``, ``||x||^2 = ||v||^2 + ||z||^2``).  The primal point is the
    box projection ``clip(W1 mu)``; the multiplier ``mu`` is found by damped
    semismooth Newton with a gradient-step fallback.
    """
    box = original_box or BoxDomain.cube(sub.dim)
    lb, ub = box.lower, box.upper
    v = np.asarray(v, dtype=float).ravel()
    W1 = sub.W1
    if v.size != W1.shape[1]:
        raise InvalidArgumentError(f"latent point has {v.size} coords, expected {W1.shape[1]}")
    if not is_feasible(sub, v)[0]:
        raise InfeasibleLatentError(f"latent point {v.tolist()} has no preimage in the box")

    def dual(mu):
        x = np.clip(W1 @ mu, lb, ub)
        F = W1.T @ x - v
        phi = -0.5 * x @ x + mu @ (W1.T @ x) - mu @ v
        return x, F, phi

    mu = v.copy()
    x, F, phi = dual(mu)
    n = v.size
    for _ in range(RECOVER_MAX_ITER):
        if np.linalg.norm(F) <= RECOVER_TOL:
            break
        free = (W1 @ mu > lb) & (W1 @ mu < ub)
        H = W1[free].T @ W1[free] + 1e-12 * np.eye(n)
        try:
            step = -np.linalg.solve(H, F)
        except np.linalg.LinAlgError:
            step = -F
        if not np.all(np.isfinite(step)) or step @ F >= 0:
            step = -F
        t = 1.0
        while True:
            x_new, F_new, phi_new = dual(mu + t * step)
            if phi_new <= phi + 1e-4 * t * (F @ step) or t < 1e-10:
                break
            t *= 0.5
        if t < 1e-10:
            # Newton direction stalled; a unit gradient step is always a descent step
            # (the dual gradient is 1-Lipschitz).
            x_new, F_new, phi_new = dual(mu - F)
            mu = mu - F
        else:
            mu = mu + t * step
        x, F, phi = x_new, F_new, phi_new

    if np.linalg.norm(F) > 1e-6:
        raise InfeasibleLatentError(
            f"recovery did not converge for latent point {v.tolist()} (residual {np.linalg.norm(F):.2e})"
        )
    return x


def spectrum_rows(eigvals) -> list:
    """``(index, eigenvalue)`` rows for the eigenvalue CSV, 1-based index."""
    return [(i + 1, float(lam)) for i, lam in enumerate(np.asarray(eigvals).ravel())]
