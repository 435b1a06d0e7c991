"""Dense linear-algebra primitives used throughout the package.

Matrices are plain ``numpy.float64`` arrays. Token matrices keep tokens as
columns (shape ``d x N``); every routine that acts per token also accepts a
leading batch axis, i.e. ``(..., d, N)``.
"""
from __future__ import annotations

import numpy as np
from scipy import linalg as sla

from .errors import DimensionError, NotPositiveDefinite

SYMMETRY_TOL = 1e-10


# --- random streams -------------------------------------------------------

def make_rng(seed: int) -> np.random.Generator:
    """Deterministic 64-bit generator for ``seed``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))


def sub_rng(seed: int, *stream: int) -> np.random.Generator:
    """Independent generator for sub-stream ``stream`` of ``seed``.

    Used to give each Monte Carlo trial (or worker) its own stream so results
    do not depend on scheduling.
    """
    entropy = [int(seed)] + [int(s) for s in stream]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


# --- factorizations -------------------------------------------------------

def _check_square(M: np.ndarray) -> None:
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {M.shape}")


def logdet_psd(M: np.ndarray) -> float:
    """log det of a symmetric positive-definite matrix via Cholesky."""
    M = np.asarray(M, dtype=np.float64)
    _check_square(M)
    if M.shape[0] == 0:
        return 0.0
    if np.max(np.abs(M - M.T)) > SYMMETRY_TOL * max(1.0, np.max(np.abs(M))):
        raise NotPositiveDefinite("matrix is not symmetric")
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    diag = np.diagonal(L)
    if np.any(diag <= 0.0) or not np.all(np.isfinite(diag)):
        raise NotPositiveDefinite("non-positive pivot")
    return float(2.0 * np.sum(np.log(diag)))


def spd_solve_right(B: np.ndarray, M: np.ndarray) -> np.ndarray:
    """Return ``B @ inv(M)`` for symmetric positive-definite ``M``."""
    _check_square(M)
    if M.shape[0] == 0:
        return np.zeros_like(B)
    try:
        factor = sla.cho_factor(M, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    # B M^{-1} = (M^{-1} B^T)^T since M is symmetric
    return sla.cho_solve(factor, B.T, check_finite=False).T


def spd_inverse(M: np.ndarray) -> np.ndarray:
    return spd_solve_right(np.eye(M.shape[0]), M)


# --- norms ----------------------------------------------------------------

def operator_norm(M: np.ndarray, tol: float = 1e-10, max_iter: int = 10_000) -> float:
    """Largest singular value by power iteration on the Gram matrix.

    Iterates on whichever of ``M^T M`` / ``M M^T`` is smaller, starting from
    the normalized all-ones vector, until the Rayleigh quotient changes by
    less than ``tol`` relatively.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2:
        raise DimensionError(f"expected a matrix, got shape {M.shape}")
    if M.size == 0 or not np.any(M):
        return 0.0
    G = M.T @ M if M.shape[1] <= M.shape[0] else M @ M.T
    n = G.shape[0]
    v = np.full(n, 1.0 / np.sqrt(n))
    w = G @ v
    if not np.any(w):
        # start vector in the null space; fall back to the largest column
        v = np.zeros(n)
        v[int(np.argmax(np.diagonal(G)))] = 1.0
        w = G @ v
    lam = float(v @ w)
    for _ in range(max_iter):
        v = w / np.linalg.norm(w)
        w = G @ v
        lam_new = float(v @ w)
        if abs(lam_new - lam) <= tol * abs(lam_new):
            lam = lam_new
            break
        lam = lam_new
    return float(np.sqrt(max(lam, 0.0)))


def spectral_norm(M: np.ndarray) -> np.ndarray | float:
    """Exact operator norm through LAPACK; batched over leading axes."""
    M = np.asarray(M, dtype=np.float64)
    if M.ndim == 2:
        return float(np.linalg.norm(M, 2))
    return np.linalg.svd(M, compute_uv=False)[..., 0]


# --- elementwise / per-token maps ----------------------------------------

def softmax_columns(M: np.ndarray) -> np.ndarray:
    """Softmax over axis -2, so every column sums to one."""
    M = np.asarray(M, dtype=np.float64)
    shifted = M - np.max(M, axis=-2, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-2, keepdims=True)


def layer_norm(x: np.ndarray, gamma: np.ndarray | float = 1.0,
               beta: np.ndarray | float = 0.0, eps: float = 1e-5) -> np.ndarray:
    """Layer norm of a d-vector, or of every column of a ``(..., d, M)`` array."""
    x = np.asarray(x, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if x.ndim == 1:
        mu = x.mean()
        var = np.mean((x - mu) ** 2)
        return (x - mu) / np.sqrt(var + eps) * gamma + beta
    mu = x.mean(axis=-2, keepdims=True)
    var = np.mean((x - mu) ** 2, axis=-2, keepdims=True)
    if gamma.ndim == 1:
        gamma = gamma[:, None]
    if beta.ndim == 1:
        beta = beta[:, None]
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


# --- subspace families ----------------------------------------------------

def random_orthonormal_family(d: int, p: int, K: int, rng: np.random.Generator) -> np.ndarray:
    """K bases with pairwise-orthogonal column spaces, shape ``(K, d, p)``.

    ``U[k].T @ U[j]`` is the identity for ``k == j`` and zero otherwise.
    """
    if K * p > d:
        raise DimensionError(f"K*p = {K * p} exceeds d = {d}")
    G = rng.standard_normal((d, d))
    Q, R = np.linalg.qr(G)
    # sign-fix so the factorization is unique
    Q = Q * np.where(np.diagonal(R) < 0, -1.0, 1.0)
    return np.stack([Q[:, k * p:(k + 1) * p] for k in range(K)])
