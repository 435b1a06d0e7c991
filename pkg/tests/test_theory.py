import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cratemae.errors import InsufficientTrials
from cratemae.linalg import make_rng, random_orthonormal_family
from cratemae.signal import SignalConfig, assemble_sample, sample_tokens
from cratemae.theory import (
    TheoryReport,
    binomial_interval,
    bound_shape,
    check_blockwise_pinv,
    grid_ratio_error,
    lemma_residual,
    make_time_grid,
    mc_binomial_concentration,
    mc_opnorm_concentration,
    posterior_mean,
    residual_sweep,
    sample_residual,
    tweedie_check,
)


def small_cfg(sigma=0.1, beta=1.0):
    return SignalConfig.build(32, 16, 4, sigma, beta=beta)


def test_degenerate_sample_has_zero_residual():
    cfg = small_cfg(sigma=0.0)
    U = random_orthonormal_family(cfg.d, cfg.p, cfg.K, make_rng(0))
    s = assemble_sample(U, np.arange(cfg.N) % cfg.K, np.zeros((cfg.p, cfg.N)),
                        np.zeros((cfg.d, cfg.N)))
    assert sample_residual(s, 1.0, cfg.params) == 0.0


def test_zero_step_residual_vanishes():
    cfg = small_cfg(sigma=0.2)
    rng = make_rng(1)
    s = sample_tokens(cfg, random_orthonormal_family(cfg.d, cfg.p, cfg.K, rng), rng)
    assert sample_residual(s, 0.0, cfg.params) <= 1e-12


def test_lemma_residual_is_finite_and_bounded_shape():
    cfg = small_cfg()
    res, b = lemma_residual(cfg, 1.0, make_rng(2))
    assert res >= 0 and np.isfinite(res)
    assert b == pytest.approx(bound_shape(cfg, 1.0))


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(0.01, 1.0), st.floats(0.1, 10.0), st.floats(0.01, 10.0))
def test_bound_shape_monotone(sigma, dsigma, beta, dbeta):
    eta = 0.5
    base = bound_shape(SignalConfig.build(32, 16, 4, sigma, beta=beta), eta)
    assert bound_shape(SignalConfig.build(32, 16, 4, sigma + dsigma, beta=beta), eta) > base
    if sigma >= 1e-3:
        assert bound_shape(SignalConfig.build(32, 16, 4, sigma, beta=beta + dbeta), eta) > base


def test_sweep_single_row_and_csv_round_trip():
    rep = residual_sweep([small_cfg()], [0.1], trials=1, seed=0, constant=1.0)
    assert rep.trials == 1
    rows = TheoryReport.rows_from_csv(rep.to_csv())
    assert rows == rep.rows


def test_sweep_reproducible_and_thread_invariant():
    a = residual_sweep([small_cfg()], [0.1, 0.05], trials=4, seed=3, calibration_trials=5)
    b = residual_sweep([small_cfg()], [0.1, 0.05], trials=4, seed=3, calibration_trials=5,
                       threads=3)
    assert a.to_csv() == b.to_csv()
    assert a.constant == b.constant


def test_blockwise_pinv_exact_cases():
    A = np.eye(6)[:, :3]
    assert max(check_blockwise_pinv(A, 2.0)) <= 1e-15
    beta = 3.0
    dev_I, dev_A = check_blockwise_pinv(np.zeros((6, 3)), beta)
    assert dev_I == pytest.approx(beta - 1 / (1 + 1 / beta), abs=1e-12)
    assert dev_A == 0.0


def test_blockwise_pinv_scales_like_sqrt_ratio():
    p, beta, draws = 64, 1.0, 200
    rng = make_rng(4)
    ns = [4, 8, 16]
    shrink = 1 / (1 + 1 / beta)
    means = []
    for n in ns:
        devs = [check_blockwise_pinv(rng.standard_normal((p, n)) / math.sqrt(p), beta)[0]
                for _ in range(draws)]
        means.append(np.mean(devs) / shrink)
    x = np.sqrt(np.array(ns) / p)
    slope = float(x @ np.array(means) / (x @ x))
    ratio = np.array(means) / (slope * x)
    assert np.all((ratio >= 0.5) & (ratio <= 2.0))


def test_concentration_requires_trials():
    cfg = small_cfg()
    with pytest.raises(InsufficientTrials):
        mc_opnorm_concentration("noise", cfg, 0, seed=0)


@pytest.mark.parametrize("kind", ["noise", "coeff", "gram"])
def test_concentration_at_reference_scale(kind):
    cfg = SignalConfig.build(256, 64, 4, 0.1)
    rep = mc_opnorm_concentration(kind, cfg, 500, seed=1, calibration_trials=500)
    assert 0.0 <= rep.frequency <= 0.05
    assert rep.passed
    again = mc_opnorm_concentration(kind, cfg, 500, seed=1, constant=rep.constant, threads=2)
    assert again.to_csv() == rep.to_csv()


def test_binomial_concentration():
    lo, hi = binomial_interval(100, 4)
    assert lo == pytest.approx(3.54, abs=0.01) and hi == pytest.approx(46.46, abs=0.01)
    rep = mc_binomial_concentration(100, 4, 10_000, seed=0)
    assert rep.frequency <= 1e-3 and rep.passed
    assert mc_binomial_concentration(12, 12, 2_000, seed=0).frequency == 0.0
    tiny = mc_binomial_concentration(2, 2, 100, seed=0)
    assert 0.0 <= tiny.frequency <= 1.0
    with pytest.raises(InsufficientTrials):
        mc_binomial_concentration(10, 2, 0, seed=0)


def test_time_grid():
    np.testing.assert_allclose(make_time_grid(8.0, 3, 0.5).times, [2.0, 4.0, 8.0], rtol=0, atol=1e-15)
    assert list(make_time_grid(3.5, 1, 0.2).times) == [3.5]
    for L in (1, 3, 12):
        g = make_time_grid(1.7, L, 0.3)
        assert g.times[-1] == 1.7
        assert grid_ratio_error(g) <= 1e-12
        assert np.all(np.diff(g.times) > 0)


def test_tweedie():
    for tau, t in [(1.0, 0.5), (2.0, 0.1), (0.3, 4.0)]:
        assert tweedie_check(tau, t, 1000, make_rng(0)) <= 1e-12
    np.testing.assert_allclose(posterior_mean(np.array([2.0, 0.0]), 1.0, 0.5), [1.0, 0.0])
    z = np.array([0.7, -1.2])
    np.testing.assert_allclose(posterior_mean(z, 1.0, 1e-14), z, atol=1e-12)
