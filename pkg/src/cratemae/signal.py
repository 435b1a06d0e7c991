"""Noisy Gaussian mixture on orthogonal subspaces, in vector and block form.

Tokens are ``z_i = U_{s_i} alpha_i + delta_i`` with ``alpha_i ~ N(0, I/p)`` and
``delta_i ~ N(0, sigma^2/d I)``. Sorting tokens by class gives the block form
``X_nat = [U_1 A_1, ..., U_K A_K] Pi``; ``Pi`` is kept as the index array
``order`` with ``X_nat[:, order] == [U_1 A_1, ..., U_K A_K]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError
from .linalg import spd_solve_right
from .rate import RateParams, grad_rc


@dataclass(frozen=True)
class SignalConfig:
    d: int
    p: int
    N: int
    K: int
    sigma: float
    params: RateParams

    def __post_init__(self):
        if self.K * self.p != self.d:
            raise DimensionError(f"K*p = {self.K * self.p} must equal d = {self.d}")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if (self.params.d, self.params.p, self.params.N) != (self.d, self.p, self.N):
            raise DimensionError("rate params disagree with signal dimensions")

    def check_theory_regime(self) -> None:
        """Structural size ordering ``d >= N >= p >= K >= 2``."""
        if not (self.d >= self.N >= self.p >= self.K >= 2):
            raise DimensionError(
                f"need d >= N >= p >= K >= 2, got d={self.d} N={self.N} p={self.p} K={self.K}")

    def with_sigma(self, sigma: float) -> "SignalConfig":
        return SignalConfig(self.d, self.p, self.N, self.K, sigma, self.params)

    @classmethod
    def build(cls, d: int, N: int, K: int, sigma: float, beta: float = 1.0,
              lam: float = 0.0) -> "SignalConfig":
        """Config with ``p = d/K`` and epsilon chosen to give ``beta``."""
        if d % K:
            raise DimensionError(f"K = {K} does not divide d = {d}")
        p = d // K
        return cls(d, p, N, K, sigma, RateParams.from_beta(beta, d, p, N, lam))


@dataclass
class SignalSample:
    Z: np.ndarray
    X_nat: np.ndarray
    Delta: np.ndarray
    assignments: np.ndarray
    order: np.ndarray
    blocks: list[np.ndarray]
    family: np.ndarray
    coeffs: np.ndarray = field(repr=False)

    @property
    def counts(self) -> np.ndarray:
        return np.array([A.shape[1] for A in self.blocks])

    def block_slices(self) -> list[slice]:
        edges = np.concatenate([[0], np.cumsum(self.counts)])
        return [slice(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]

    def to_blocks(self, M: np.ndarray) -> np.ndarray:
        """``M Pi^T``: columns regrouped by class."""
        return M[:, self.order]

    def from_blocks(self, B: np.ndarray) -> np.ndarray:
        """``B Pi``: inverse of :meth:`to_blocks`."""
        out = np.empty_like(B)
        out[:, self.order] = B
        return out


def assemble_sample(family: np.ndarray, assignments: np.ndarray, coeffs: np.ndarray,
                    Delta: np.ndarray) -> SignalSample:
    """Build a sample from explicit class labels, coefficients (p x N) and noise."""
    family = np.asarray(family, dtype=np.float64)
    K, d, p = family.shape
    assignments = np.asarray(assignments, dtype=np.int64)
    N = assignments.shape[0]
    if coeffs.shape != (p, N) or Delta.shape != (d, N):
        raise DimensionError("coefficient or noise shape mismatch")
    if np.any(assignments < 0) or np.any(assignments >= K):
        raise DimensionError("assignment out of range")
    # X_nat[:, i] = U_{s_i} alpha_i
    X_nat = np.einsum("idp,pi->di", family[assignments], coeffs)
    order = np.argsort(assignments, kind="stable")
    sorted_coeffs = coeffs[:, order]
    counts = np.bincount(assignments, minlength=K)
    edges = np.concatenate([[0], np.cumsum(counts)])
    blocks = [sorted_coeffs[:, edges[k]:edges[k + 1]] for k in range(K)]
    return SignalSample(X_nat + Delta, X_nat, Delta, assignments, order, blocks, family, coeffs)


def sample_tokens(cfg: SignalConfig, family: np.ndarray, rng: np.random.Generator) -> SignalSample:
    family = np.asarray(family, dtype=np.float64)
    if family.shape != (cfg.K, cfg.d, cfg.p):
        raise DimensionError(f"family shape {family.shape} != {(cfg.K, cfg.d, cfg.p)}")
    assignments = rng.integers(0, cfg.K, size=cfg.N)
    coeffs = rng.standard_normal((cfg.p, cfg.N)) / np.sqrt(cfg.p)
    Delta = rng.standard_normal((cfg.d, cfg.N)) * (cfg.sigma / np.sqrt(cfg.d))
    return assemble_sample(family, assignments, coeffs, Delta)


def _annihilators(sample: SignalSample, beta: float) -> list[np.ndarray]:
    """``I - A (beta^{-1} I + A^T A)^{-1} A^T`` for every class, each p x p."""
    out = []
    p = sample.family.shape[2]
    for A in sample.blocks:
        n = A.shape[1]
        if n == 0:
            out.append(np.eye(p))
            continue
        S = spd_solve_right(A, np.eye(n) / beta + A.T @ A)
        out.append(np.eye(p) - S @ A.T)
    return out


def projection_operators(sample: SignalSample, params: RateParams) -> np.ndarray:
    """The K matrices ``P_k`` (d x d), stacked as ``(K, d, d)``."""
    U = sample.family
    pieces = np.stack([Uk @ Q @ Uk.T for Uk, Q in zip(U, _annihilators(sample, params.beta()))])
    total = pieces.sum(axis=0)
    return total[None] - pieces


def nominal_projection_apply(sample: SignalSample, M: np.ndarray, params: RateParams) -> np.ndarray:
    """``P(M Pi^T) Pi``: apply ``P_k`` to the class-k columns of ``M``."""
    M = np.asarray(M, dtype=np.float64)
    if M.shape != sample.Z.shape:
        raise DimensionError(f"M has shape {M.shape}, expected {sample.Z.shape}")
    P = projection_operators(sample, params)
    B = sample.to_blocks(M)
    out = np.empty_like(B)
    for k, sl in enumerate(sample.block_slices()):
        out[:, sl] = P[k] @ B[:, sl]
    return sample.from_blocks(out)


def projection_limit(sample: SignalSample) -> np.ndarray:
    """Exact ``beta -> inf`` limit of :func:`projection_operators`.

    Uses ``U_k proj_{im(A_k)^perp} U_k^T`` with the projector built from a
    pseudoinverse.
    """
    U = sample.family
    p = U.shape[2]
    pieces = []
    for Uk, A in zip(U, sample.blocks):
        proj = np.eye(p) - A @ np.linalg.pinv(A) if A.shape[1] else np.eye(p)
        pieces.append(Uk @ proj @ Uk.T)
    pieces = np.stack(pieces)
    return pieces.sum(axis=0)[None] - pieces


def compression_step(sample: SignalSample, eta: float, params: RateParams) -> np.ndarray:
    """One gradient-descent step on ``R^c``: ``Z - eta * grad R^c(Z)``."""
    if eta < 0:
        raise ValueError("eta must be nonnegative")
    if eta == 0:
        return sample.Z.copy()
    return sample.Z - eta * grad_rc(sample.Z, sample.family, params)
