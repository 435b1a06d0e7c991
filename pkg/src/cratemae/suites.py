"""Verification suites shared by the CLI and the acceptance tests.

Each suite returns a :class:`SuiteResult` holding named CSV tables and an
overall verdict.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diag import csv_text
from .linalg import random_orthonormal_family, sub_rng
from .net import ModelConfig, init_parameters
from .rate import RateParams, coding_rate_conditional, grad_rc
from .signal import SignalConfig, sample_tokens, projection_limit, projection_operators
from .theory import (
    MAX_EXCEEDANCE,
    REFERENCE,
    TheoryReport,
    grid_ratio_error,
    make_time_grid,
    mc_binomial_concentration,
    mc_opnorm_concentration,
    median_by_sigma,
    residual_sweep,
    tweedie_check,
)
from .train import draw_masks, gradient_check

SUITES = ("grad", "lemma", "concentration", "discretization", "tweedie")

GRAD_RC_SHAPE = (12, 8, 3, 4)  # (d, N, K, p)
GRAD_RC_TOL = 1e-6
FD_MODEL = ModelConfig(L=2, d=12, K=3, N=8, patch_h=1, patch_w=2, channels=3)
FD_MODEL_TOL = 1e-5
LEMMA_SIGMAS = (0.2, 0.1, 0.05, 0.02)
CONCENTRATION_SHAPE = (512, 128, 4, 128)
LIMIT_BETA = 1e9
LIMIT_TOL = 1e-6
GRID_LAYERS = (1, 3, 12)
TWEEDIE_CASES = ((1.0, 0.5), (2.0, 0.1))
TWEEDIE_TOL = 1e-12


@dataclass
class Table:
    header: list[str]
    rows: list[tuple] = field(default_factory=list)

    def csv(self) -> str:
        return csv_text(self.header, self.rows)


@dataclass
class SuiteResult:
    name: str
    passed: bool
    tables: dict[str, Table]
    summary: list[str]


def central_difference(f, Z: np.ndarray, h: float = 1e-6) -> np.ndarray:
    G = np.zeros_like(Z)
    for idx in np.ndindex(Z.shape):
        Zp, Zm = Z.copy(), Z.copy()
        Zp[idx] += h
        Zm[idx] -= h
        G[idx] = (f(Zp) - f(Zm)) / (2 * h)
    return G


def grad_suite(seed: int = 0, seeds: int = 10) -> SuiteResult:
    """``grad_rc`` and full-model backward against central differences."""
    t = Table(["check", "case", "tensor", "rel_error", "pass"])
    d, N, K, p = GRAD_RC_SHAPE
    ok_rc = True
    for s in range(seeds):
        rng = sub_rng(seed, 41, s)
        P = RateParams(1.0, d, p, N)
        U = random_orthonormal_family(d, p, K, rng)
        Z = rng.standard_normal((d, N))
        fd = central_difference(lambda M: coding_rate_conditional(M, U, P), Z)
        err = float(np.max(np.abs(grad_rc(Z, U, P) - fd)) / np.max(np.abs(fd)))
        ok_rc &= err <= GRAD_RC_TOL
        t.rows.append(("grad_rc", s, "Z", err, err <= GRAD_RC_TOL))
    cfg = FD_MODEL
    params = init_parameters(cfg, sub_rng(seed, 42))
    X = sub_rng(seed, 43).standard_normal((2, cfg.D, cfg.N))
    masks = draw_masks(2, cfg.N, 0.5, seed, 44)
    errs = gradient_check(X, masks, params, cfg)
    for name, err in errs.items():
        t.rows.append(("backward", 0, name, err, err <= FD_MODEL_TOL))
    worst_rc = max((r[3] for r in t.rows if r[0] == "grad_rc"), default=0.0)
    worst_bp = max(errs.values())
    ok = ok_rc and worst_bp <= FD_MODEL_TOL
    return SuiteResult("grad", ok, {"grad": t}, [
        f"grad_rc max rel error {worst_rc:.3e} over {seeds} seeds (tol {GRAD_RC_TOL:g})",
        f"backward max rel error {worst_bp:.3e} over {len(errs)} tensors (tol {FD_MODEL_TOL:g})",
    ])


def projection_limit_gap(seed: int = 0, shape=REFERENCE, beta: float = LIMIT_BETA) -> float:
    """Operator-norm gap between the nominal projections and their pinv limit."""
    d, N, K, _ = shape
    cfg = SignalConfig.build(d, N, K, 0.1, beta=beta)
    rng = sub_rng(seed, 45)
    sample = sample_tokens(cfg, random_orthonormal_family(d, cfg.p, K, rng), rng)
    gap = projection_operators(sample, cfg.params) - projection_limit(sample)
    return float(max(np.linalg.norm(g, 2) for g in gap))


def lemma_suite(seed: int = 0, trials: int = 20, threads: int = 1) -> SuiteResult:
    """Residual sweep over sigma at the reference shape plus the projection limit.

    The bound holds with high probability, so the sweep passes when the
    medians are nonincreasing as sigma shrinks and at most 5% of trials
    exceed the calibrated bound.
    """
    d, N, K, _ = REFERENCE
    cfg = SignalConfig.build(d, N, K, LEMMA_SIGMAS[0], beta=1.0)
    rep = residual_sweep([cfg], list(LEMMA_SIGMAS), trials, seed, threads=threads)
    med = median_by_sigma(rep)
    seq = [med[s] for s in LEMMA_SIGMAS]
    monotone = all(b <= a for a, b in zip(seq, seq[1:]))
    gap = projection_limit_gap(seed)
    summary = Table(["sigma", "median_residual"], [(s, med[s]) for s in LEMMA_SIGMAS])
    limit = Table(["beta", "gap", "pass"], [(LIMIT_BETA, gap, gap <= LIMIT_TOL)])
    within = rep.frequency <= MAX_EXCEEDANCE
    ok = within and monotone and gap <= LIMIT_TOL
    return SuiteResult("lemma", ok, {"lemma": _report_table(rep), "lemma_medians": summary,
                                     "projection_limit": limit}, [
        f"lemma constant {rep.constant:.4f}; medians {', '.join(f'{v:.4f}' for v in seq)}"
        f" ({'nonincreasing' if monotone else 'NOT monotone'}); exceedance {rep.frequency:.4f}",
        f"projection limit gap {gap:.3e} at beta {LIMIT_BETA:g} (tol {LIMIT_TOL:g})",
    ])


def _report_table(rep: TheoryReport) -> Table:
    t = Table(["config_id", "sigma", "beta", "residual", "bound_shape", "pass"])
    t.rows = [(r.config_id, r.sigma, r.beta, r.residual, r.bound_shape, r.passed)
              for r in rep.rows]
    return t


def concentration_suite(seed: int = 0, trials: int = 10_000, threads: int = 1) -> SuiteResult:
    """Three operator-norm checks and the binomial count check."""
    d, N, K, _ = CONCENTRATION_SHAPE
    cfg = SignalConfig.build(d, N, K, 0.1)
    t = Table(["kind", "shape", "constant", "frequency", "trials", "pass"])
    shape = "x".join(map(str, CONCENTRATION_SHAPE))
    for kind in ("noise", "coeff", "gram"):
        rep = mc_opnorm_concentration(kind, cfg, trials, seed, calibration_trials=trials,
                                      reference=REFERENCE, threads=threads)
        t.rows.append((kind, shape, rep.constant, rep.frequency, trials, rep.passed))
    rep = mc_binomial_concentration(N, K, trials, seed)
    t.rows.append(("binomial", f"{N}x{K}", rep.constant, rep.frequency, trials, rep.passed))
    ok = all(r[-1] for r in t.rows)
    return SuiteResult("concentration", ok, {"concentration": t},
                       [f"{r[0]}: exceedance {r[3]:.4f} (constant {r[2]:.4f})" for r in t.rows])


def discretization_suite(T: float = 1.0, kappa: float = 0.5) -> SuiteResult:
    t = Table(["L", "t_L", "ratio_error", "pass"])
    for L in GRID_LAYERS:
        g = make_time_grid(T, L, kappa)
        err = grid_ratio_error(g)
        t.rows.append((L, float(g.times[-1]), err, bool(g.times[-1] == T and err <= 1e-12)))
    ok = all(r[-1] for r in t.rows)
    worst = max(r[2] for r in t.rows)
    return SuiteResult("discretization", ok, {"discretization": t},
                       [f"t_L == T for every L; max ratio error {worst:.3e}" if ok
                        else "time grid check failed"])


def tweedie_suite(seed: int = 0, samples: int = 1000) -> SuiteResult:
    t = Table(["tau", "t", "deviation", "pass"])
    for tau, time in TWEEDIE_CASES:
        dev = tweedie_check(tau, time, samples, sub_rng(seed, 51))
        t.rows.append((tau, time, dev, dev <= TWEEDIE_TOL))
    ok = all(r[-1] for r in t.rows)
    return SuiteResult("tweedie", ok, {"tweedie": t},
                       [f"max deviation {max(r[2] for r in t.rows):.3e} (tol {TWEEDIE_TOL:g})"])


def run_suite(name: str, seed: int = 0, trials: int | None = None,
              threads: int = 1) -> SuiteResult:
    if name == "grad":
        return grad_suite(seed)
    if name == "lemma":
        return lemma_suite(seed, trials or 20, threads)
    if name == "concentration":
        return concentration_suite(seed, trials or 10_000, threads)
    if name == "discretization":
        return discretization_suite()
    if name == "tweedie":
        return tweedie_suite(seed)
    raise ValueError(f"unknown suite {name!r}; choose from {SUITES + ('all',)}")
