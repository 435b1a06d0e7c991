import numpy as np
import pytest
from scipy import stats

from cratemae.errors import DimensionError
from cratemae.linalg import make_rng, random_orthonormal_family
from cratemae.rate import RateParams, grad_rc
from cratemae.signal import (
    SignalConfig,
    assemble_sample,
    compression_step,
    nominal_projection_apply,
    projection_limit,
    projection_operators,
    sample_tokens,
)


def make(d=16, N=12, K=4, sigma=0.1, beta=1.0, seed=0):
    cfg = SignalConfig.build(d, N, K, sigma, beta=beta)
    rng = make_rng(seed)
    U = random_orthonormal_family(d, cfg.p, K, rng)
    return cfg, sample_tokens(cfg, U, rng)


def test_config_validation():
    with pytest.raises(DimensionError):
        SignalConfig(8, 3, 4, 2, 0.1, RateParams(1.0, 8, 3, 4))
    cfg = SignalConfig.build(8, 16, 2, 0.0)
    with pytest.raises(DimensionError):
        cfg.check_theory_regime()
    SignalConfig.build(16, 8, 2, 0.0).check_theory_regime()


def test_noise_free_tokens_lie_in_their_subspace():
    _, s = make(sigma=0.0)
    for i, k in enumerate(s.assignments):
        U = s.family[k]
        z = s.Z[:, i]
        assert np.linalg.norm(z - U @ (U.T @ z)) <= 1e-12


def test_exact_decomposition_and_block_form():
    _, s = make(sigma=0.3)
    assert np.array_equal(s.Z, s.X_nat + s.Delta)
    assert s.counts.sum() == s.Z.shape[1]
    blocked = s.to_blocks(s.X_nat)
    for k, sl in enumerate(s.block_slices()):
        np.testing.assert_allclose(blocked[:, sl], s.family[k] @ s.blocks[k], atol=1e-14)
    assert np.array_equal(s.from_blocks(s.to_blocks(s.Z)), s.Z)


def test_noise_and_signal_energy():
    d, K, N = 64, 4, 10_000
    cfg = SignalConfig(d, d // K, N, K, 0.1, RateParams(1.0, d, d // K, N))
    rng = make_rng(3)
    s = sample_tokens(cfg, random_orthonormal_family(d, d // K, K, rng), rng)
    assert np.mean(np.sum(s.Delta ** 2, axis=0)) == pytest.approx(0.01, rel=0.05)
    assert np.mean(np.sum(s.X_nat ** 2, axis=0)) == pytest.approx(1.0, rel=0.05)


def test_class_counts_are_binomial():
    N, K, draws = 20, 4, 10_000
    cfg = SignalConfig.build(16, N, K, 0.0)
    U = random_orthonormal_family(16, 4, K, make_rng(0))
    rng = make_rng(9)
    first = np.array([sample_tokens(cfg, U, rng).counts[0] for _ in range(draws)])
    pmf = stats.binom.pmf(np.arange(N + 1), N, 1 / K)
    # pool the sparse tails so every expected bin count is at least 5
    lo, hi = 1, 10
    observed = np.array([np.sum(first <= lo)] + [np.sum(first == c) for c in range(lo + 1, hi)]
                        + [np.sum(first >= hi)])
    expected = draws * np.concatenate([[pmf[:lo + 1].sum()], pmf[lo + 1:hi], [pmf[hi:].sum()]])
    assert expected.min() >= 5
    assert stats.chisquare(observed, expected).pvalue > 1e-3


def test_projection_zero_and_linearity():
    cfg, s = make()
    P = cfg.params
    assert np.array_equal(nominal_projection_apply(s, np.zeros_like(s.Z), P), np.zeros_like(s.Z))
    rng = make_rng(5)
    M1, M2 = rng.standard_normal(s.Z.shape), rng.standard_normal(s.Z.shape)
    lhs = nominal_projection_apply(s, 2.0 * M1 - 0.5 * M2, P)
    rhs = 2.0 * nominal_projection_apply(s, M1, P) - 0.5 * nominal_projection_apply(s, M2, P)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)
    with pytest.raises(DimensionError):
        nominal_projection_apply(s, np.zeros((3, 3)), P)


def test_projection_acts_per_token_class():
    cfg, s = make(seed=4)
    Pk = projection_operators(s, cfg.params)
    M = make_rng(6).standard_normal(s.Z.shape)
    out = nominal_projection_apply(s, M, cfg.params)
    for i, k in enumerate(s.assignments):
        np.testing.assert_allclose(out[:, i], Pk[k] @ M[:, i], atol=1e-12)


def test_projection_square_blocks_vanish_in_limit():
    # d=4, K=2, p=2: each class holds two tokens, so A_k is 2x2 and full rank
    d, p, K, N = 4, 2, 2, 4
    U = random_orthonormal_family(d, p, K, make_rng(1))
    assignments = np.array([0, 1, 0, 1])
    coeffs = np.array([[1.0, 0.5, 0.2, -1.0], [0.3, 1.0, 1.0, 0.4]])
    s = assemble_sample(U, assignments, coeffs, np.zeros((d, N)))
    params = RateParams.from_beta(1e9, d, p, N)
    M = np.stack([U[k] @ np.array([1.0, -2.0]) for k in assignments], axis=1)
    assert np.max(np.abs(nominal_projection_apply(s, M, params))) <= 1e-8


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_projection_limit_matches_pseudoinverse(seed):
    cfg, s = make(d=32, N=16, K=4, seed=seed)
    params = RateParams.from_beta(1e9, cfg.d, cfg.p, cfg.N)
    gap = projection_operators(s, params) - projection_limit(s)
    assert max(np.linalg.norm(g, 2) for g in gap) <= 1e-6


def test_compression_step():
    cfg, s = make(seed=8)
    assert np.array_equal(compression_step(s, 0.0, cfg.params), s.Z)
    expected = s.Z - 0.3 * grad_rc(s.Z, s.family, cfg.params)
    np.testing.assert_allclose(compression_step(s, 0.3, cfg.params), expected, atol=1e-14)
    zero = assemble_sample(s.family, s.assignments, np.zeros_like(s.coeffs), np.zeros_like(s.Z))
    assert np.array_equal(compression_step(zero, 0.3, cfg.params), np.zeros_like(s.Z))
