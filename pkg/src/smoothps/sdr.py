"""Kernel sufficient dimension reduction for balancing scores.

Finds ``W`` (``l x d``, orthonormal rows) minimizing the trace of the
empirical conditional covariance operator of ``y`` given ``W x``::

    eps * Tr[G_Y (G_W + N eps I)^-1]  =  Tr[G_Y - G_Y G_W (G_W + N eps I)^-1] / N

with centered Gaussian Gram matrices ``G``.
"""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.spatial.distance import pdist, squareform

from .data import Sample

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SDROptions:
    eps: float = 1e-3
    restarts: int = 5
    max_iter: int = 300
    grad_tol: float = 1e-5
    seed: int = 0
    # outer passes re-estimating the W x bandwidth at the current iterate
    bandwidth_passes: int = 4
    bandwidth_rtol: float = 1e-3
    # eigenvalues of G_Y below this fraction of its trace are dropped
    y_rank_tol: float = 1e-13
    threads: int = 1


@dataclass(frozen=True, eq=False)
class SDRProjection:
    W: np.ndarray
    objective: float
    sigma_x: float
    sigma_y: float
    eps: float
    converged: bool = True
    grad_norm: float = 0.0
    # objective along accepted iterates, one tuple per bandwidth pass
    history: tuple = field(default=(), repr=False)

    @property
    def l(self) -> int:
        return self.W.shape[0]

    def transform(self, X) -> np.ndarray:
        return np.asarray(X, dtype=float) @ self.W.T


def median_bandwidth(Z: np.ndarray) -> float:
    """Median pairwise Euclidean distance (1.0 if every distance is zero)."""
    d = pdist(np.asarray(Z, dtype=float).reshape(len(Z), -1))
    med = float(np.median(d)) if d.size else 0.0
    return med if med > 0 else 1.0


def _center(K):
    return K - K.mean(axis=0) - K.mean(axis=1)[:, None] + K.mean()


def gaussian_gram(Z: np.ndarray, sigma: float) -> np.ndarray:
    D2 = squareform(pdist(Z.reshape(len(Z), -1), "sqeuclidean"))
    return np.exp(-D2 / (2 * sigma ** 2))


class ConditionalCovariance:
    """Objective and Euclidean gradient for fixed data and ``y`` kernel."""

    def __init__(self, X, y, eps: float = 1e-3, y_rank_tol: float = 1e-13, sigma_y=None):
        self.X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float).reshape(len(self.X), -1)
        self.n = len(self.X)
        self.eps = eps
        self.sigma_y = median_bandwidth(y) if sigma_y is None else float(sigma_y)
        Gy = _center(gaussian_gram(y, self.sigma_y))
        w, V = linalg.eigh(Gy)
        keep = w > y_rank_tol * max(np.sum(np.maximum(w, 0)), 1e-300)
        self.lam_y, self.V = w[keep], V[:, keep]

    def evaluate(self, W, sigma, gradient=False):
        Z = self.X @ W.T
        K = gaussian_gram(Z, sigma)
        A = _center(K)
        A[np.diag_indices_from(A)] += self.n * self.eps
        C = linalg.cho_factor(A, lower=True, check_finite=False)
        MV = linalg.cho_solve(C, self.V, check_finite=False)
        value = self.eps * float(np.sum(self.lam_y * np.einsum("ij,ij->j", self.V, MV)))
        if not gradient:
            return value
        P = MV - MV.mean(axis=0)
        B = (-self.eps * (P * self.lam_y) @ P.T) * K
        S = self.X.T @ (B.sum(axis=1)[:, None] * self.X) - self.X.T @ B @ self.X
        grad = -(2 / sigma ** 2) * W @ S
        return value, grad


def _orthonormal_rows(M):
    Q, R = np.linalg.qr(M.T)
    Q = Q * np.where(np.diag(R) < 0, -1.0, 1.0)
    return Q.T


def _descend(obj: ConditionalCovariance, W, sigma, opts: SDROptions):
    """Projected gradient with BB steps and Armijo backtracking at fixed bandwidth."""
    f, G = obj.evaluate(W, sigma, gradient=True)
    Gp = G - (G @ W.T) @ W
    gnorm = float(np.linalg.norm(Gp))
    history = [f]
    t = 1.0 / max(gnorm, 1e-12) * 0.1
    prev = None
    for _ in range(opts.max_iter):
        if gnorm < opts.grad_tol:
            break
        if prev is not None:
            s, yv = W - prev[0], Gp - prev[1]
            sy = float(np.sum(s * yv))
            if sy > 0:
                t = float(np.sum(s * s)) / sy
        accepted = False
        while t * gnorm > 1e-14:
            Wn = _orthonormal_rows(W - t * Gp)
            fn = obj.evaluate(Wn, sigma)
            if fn <= f - 1e-4 * t * gnorm ** 2:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        prev = (W, Gp)
        W = Wn
        f, G = obj.evaluate(W, sigma, gradient=True)
        Gp = G - (G @ W.T) @ W
        gnorm = float(np.linalg.norm(Gp))
        history.append(f)
    return W, f, gnorm, tuple(history)


def _optimize_from(obj: ConditionalCovariance, W0, opts: SDROptions):
    W = W0
    sigma = median_bandwidth(obj.X @ W.T)
    passes = []
    for _ in range(opts.bandwidth_passes):
        W, f, gnorm, hist = _descend(obj, W, sigma, opts)
        passes.append(hist)
        new_sigma = median_bandwidth(obj.X @ W.T)
        stable = abs(new_sigma / sigma - 1) <= opts.bandwidth_rtol
        sigma = new_sigma
        f, G = obj.evaluate(W, sigma, gradient=True)
        gnorm = float(np.linalg.norm(G - (G @ W.T) @ W))
        if stable and gnorm < opts.grad_tol:
            break
    return W, f, sigma, gnorm, tuple(passes)


def kernel_sdr(sample, l: int, opts: SDROptions = SDROptions(), y=None) -> SDRProjection:
    """Estimate an ``l``-dimensional projection of the covariates.

    ``sample`` is a :class:`Sample` (respondents are used) or a covariate
    matrix with ``y`` given separately. Restarts draw random orthonormal
    starts from streams derived from ``opts.seed``; the best final objective
    wins. A result whose gradient norm stays above ``opts.grad_tol`` is
    returned with ``converged=False`` and a warning.
    """
    if isinstance(sample, Sample):
        X, yv = sample.X_resp, sample.y_resp
    else:
        X, yv = np.asarray(sample, dtype=float), np.asarray(y, dtype=float)
    n, d = X.shape
    if not 1 <= l <= d:
        raise ValueError(f"target dimension must be in 1..{d}, got {l}")
    obj = ConditionalCovariance(X, yv, opts.eps, opts.y_rank_tol)

    def run(r):
        rng = np.random.default_rng(np.random.SeedSequence(opts.seed, spawn_key=(r,)))
        W0 = _orthonormal_rows(rng.standard_normal((l, d)))
        return _optimize_from(obj, W0, opts)

    restarts = range(max(1, opts.restarts))
    if opts.threads and opts.threads > 1:
        with ThreadPoolExecutor(opts.threads) as pool:
            results = list(pool.map(run, restarts))
    else:
        results = [run(r) for r in restarts]
    W, f, sigma, gnorm, hist = min(results, key=lambda res: res[1])
    converged = gnorm < opts.grad_tol
    if not converged:
        warnings.warn(f"kernel SDR stopped with gradient norm {gnorm:.3g}")
    return SDRProjection(W, f, sigma, obj.sigma_y, opts.eps, converged, gnorm, hist)


def sdr_objective(X, y, W, eps: float = 1e-3, sigma=None) -> float:
    """Objective at ``W`` with the median bandwidth unless ``sigma`` is given."""
    W = np.atleast_2d(np.asarray(W, dtype=float))
    obj = ConditionalCovariance(X, y, eps)
    return obj.evaluate(W, median_bandwidth(obj.X @ W.T) if sigma is None else sigma)


def principal_angle(W, w0) -> float:
    """Largest principal angle (radians) between the row spaces of ``W`` and ``w0``."""
    A = _orthonormal_rows(np.atleast_2d(np.asarray(W, dtype=float)))
    B = _orthonormal_rows(np.atleast_2d(np.asarray(w0, dtype=float)))
    return float(np.max(linalg.subspace_angles(A.T, B.T)))
