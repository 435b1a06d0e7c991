"""Lossy coding rates, the sparse rate reduction and the compression gradient.

A subspace family ``U`` is an array of shape ``(K, d, p)`` holding the bases
``U_1, ..., U_K``; they need not be orthonormal.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .linalg import logdet_psd, spd_solve_right

ZERO_TOL = 1e-8


@dataclass(frozen=True)
class RateParams:
    """Quantization precision and problem sizes for the coding rates.

    ``lam`` is the weight on the l0 sparsity penalty.
    """
    epsilon: float
    d: int
    p: int
    N: int
    lam: float = 0.0

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")

    def alpha(self) -> float:
        return self.d / (self.N * self.epsilon ** 2)

    def beta(self) -> float:
        return self.p / (self.N * self.epsilon ** 2)

    @classmethod
    def from_beta(cls, beta: float, d: int, p: int, N: int, lam: float = 0.0) -> "RateParams":
        """Pick epsilon so that ``beta()`` equals ``beta``."""
        return cls(float(np.sqrt(p / (N * beta))), d, p, N, lam)


def _check_tokens(Z: np.ndarray, params: RateParams) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    if Z.shape != (params.d, params.N):
        raise DimensionError(f"Z has shape {Z.shape}, expected {(params.d, params.N)}")
    return Z


def _check_family(U: np.ndarray, params: RateParams) -> np.ndarray:
    U = np.asarray(U, dtype=np.float64)
    if U.ndim != 3 or U.shape[1:] != (params.d, params.p):
        raise DimensionError(f"U has shape {U.shape}, expected (K, {params.d}, {params.p})")
    return U


def coding_rate(Z: np.ndarray, params: RateParams) -> float:
    """``R(Z) = 1/2 logdet(I + alpha Z^T Z)``."""
    Z = _check_tokens(Z, params)
    return 0.5 * logdet_psd(np.eye(params.N) + params.alpha() * (Z.T @ Z))


def coding_rate_conditional(Z: np.ndarray, U: np.ndarray, params: RateParams) -> float:
    """``R^c(Z | U) = 1/2 sum_k logdet(I + beta (U_k^T Z)^T (U_k^T Z))``."""
    Z = _check_tokens(Z, params)
    U = _check_family(U, params)
    beta = params.beta()
    eye = np.eye(params.N)
    total = 0.0
    for Uk in U:
        W = Uk.T @ Z
        total += logdet_psd(eye + beta * (W.T @ W))
    return 0.5 * total


def l0_count(Z: np.ndarray, zero_tol: float = ZERO_TOL) -> int:
    return int(np.count_nonzero(np.abs(Z) > zero_tol))


def sparse_rate_reduction(Z: np.ndarray, U: np.ndarray, params: RateParams,
                          zero_tol: float = ZERO_TOL) -> float:
    """``R(Z) - R^c(Z | U) - lam * ||Z||_0``."""
    return (coding_rate(Z, params) - coding_rate_conditional(Z, U, params)
            - params.lam * l0_count(Z, zero_tol))


def grad_rc(Z: np.ndarray, U: np.ndarray, params: RateParams) -> np.ndarray:
    """Gradient of ``R^c`` in ``Z``.

    ``sum_k U_k U_k^T Z (beta^{-1} I + (U_k^T Z)^T U_k^T Z)^{-1}``, with each
    N x N inverse applied through a Cholesky solve.
    """
    Z = _check_tokens(Z, params)
    U = _check_family(U, params)
    inv_beta = 1.0 / params.beta()
    eye = np.eye(params.N)
    out = np.zeros_like(Z)
    for Uk in U:
        W = Uk.T @ Z
        out += Uk @ spd_solve_right(W, inv_beta * eye + W.T @ W)
    return out


def sparsity_measure(Z: np.ndarray, zero_tol: float = ZERO_TOL) -> float:
    """Fraction of entries with magnitude above ``zero_tol``."""
    Z = np.asarray(Z)
    if Z.size == 0:
        return 0.0
    return l0_count(Z, zero_tol) / Z.size
