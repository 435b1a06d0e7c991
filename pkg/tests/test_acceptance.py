"""Acceptance criteria 1-12, each at its stated tolerance and time limit.

Run ``pytest tests/test_acceptance.py``; a summary section lists one
PASS/FAIL line per criterion.
"""
import time
from pathlib import Path

import numpy as np
import pytest

from cratemae.cli import main
from cratemae.data import synth_patches
from cratemae.diag import layerwise_curves
from cratemae.errors import FormatError
from cratemae.linalg import make_rng, sub_rng
from cratemae.net import (
    checkpoint_load,
    checkpoint_save,
    count_parameters,
    init_parameters,
    model_forward,
    preset,
)
from cratemae.suites import (
    FD_MODEL_TOL,
    GRAD_RC_TOL,
    LIMIT_TOL,
    concentration_suite,
    discretization_suite,
    grad_suite,
    lemma_suite,
    projection_limit_gap,
    tweedie_suite,
)
from cratemae.train import TrainHyper, draw_masks, masked_loss, train_loop


class Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start


def test_criterion_01_parameter_audit(acceptance):
    with Timer() as t:
        base, small = count_parameters(preset("base")), count_parameters(preset("small"))
    rb, rs = base / 44.6e6 - 1, small / 25.4e6 - 1
    ok = abs(rb) <= 0.02 and abs(rs) <= 0.02 and t.elapsed < 1
    acceptance(1, ok, f"base {base} ({rb:+.2%}), small {small} ({rs:+.2%}), {t.elapsed:.3f}s")
    assert ok


def test_criterion_02_grad_rc_oracle(acceptance):
    with Timer() as t:
        res = grad_suite(seed=0)
    errs = [r[3] for r in res.tables["grad"].rows if r[0] == "grad_rc"]
    ok = len(errs) == 10 and max(errs) <= GRAD_RC_TOL and t.elapsed < 10
    acceptance(2, ok, f"max rel error {max(errs):.2e} over {len(errs)} seeds, {t.elapsed:.1f}s")
    assert ok


def test_criterion_03_backprop_oracle(acceptance):
    with Timer() as t:
        res = grad_suite(seed=0, seeds=0)
    errs = {r[2]: r[3] for r in res.tables["grad"].rows if r[0] == "backward"}
    worst = max(errs.values())
    ok = len(errs) == 36 and worst <= FD_MODEL_TOL and t.elapsed < 120
    acceptance(3, ok, f"max rel error {worst:.2e} over {len(errs)} tensors, {t.elapsed:.1f}s")
    assert ok


def test_criterion_04_theorem_harness(acceptance):
    with Timer() as t:
        res = lemma_suite(seed=0, trials=20)
    med = [r[1] for r in res.tables["lemma_medians"].rows]
    monotone = all(b <= a for a, b in zip(med, med[1:]))
    within = all(r[-1] for r in res.tables["lemma"].rows)
    ok = monotone and within and t.elapsed < 300
    acceptance(4, ok, f"medians {[round(m, 4) for m in med]}, all within bound {within}, "
                      f"{t.elapsed:.1f}s")
    assert ok


def test_criterion_05_projection_limit(acceptance):
    with Timer() as t:
        gaps = [projection_limit_gap(seed) for seed in range(3)]
    ok = max(gaps) <= LIMIT_TOL and t.elapsed < 30
    acceptance(5, ok, f"max gap {max(gaps):.2e} at beta 1e9, {t.elapsed:.1f}s")
    assert ok


def test_criterion_06_concentration(acceptance):
    with Timer() as t:
        res = concentration_suite(seed=0, trials=10_000)
    rows = res.tables["concentration"].rows
    ok = res.passed and len(rows) == 4 and t.elapsed < 300
    acceptance(6, ok, ", ".join(f"{r[0]} {r[3]:.4f}" for r in rows) + f", {t.elapsed:.1f}s")
    assert ok


def test_criterion_07_discretization(acceptance):
    with Timer() as t:
        res = discretization_suite(T=1.7, kappa=0.3)
    ok = res.passed and t.elapsed < 1
    worst = max(r[2] for r in res.tables["discretization"].rows)
    acceptance(7, ok, f"t_L == T, max ratio error {worst:.1e}, {t.elapsed:.3f}s")
    assert ok


def test_criterion_08_tweedie(acceptance):
    with Timer() as t:
        res = tweedie_suite(seed=0)
    worst = max(r[2] for r in res.tables["tweedie"].rows)
    ok = res.passed and t.elapsed < 1
    acceptance(8, ok, f"max deviation {worst:.1e}, {t.elapsed:.3f}s")
    assert ok


@pytest.fixture(scope="module")
def toy_run():
    cfg = preset("toy")
    X = synth_patches(cfg.D, cfg.N, 512, seed=0).patches
    p0 = init_parameters(cfg, sub_rng(0, 21))
    eval_masks = draw_masks(512, cfg.N, 0.75, 0, 61)
    start = time.perf_counter()
    res = train_loop(X, cfg, TrainHyper(epochs=20, batch=16, lr=1e-3, mu=0.75, seed=0),
                     params=p0.copy())
    elapsed = time.perf_counter() - start
    before = masked_loss(X, eval_masks, p0, cfg)
    after = masked_loss(X, eval_masks, res.params, cfg)
    return cfg, X, res, before, after, elapsed


def test_criterion_09_toy_training(acceptance, toy_run):
    cfg, X, res, before, after, elapsed = toy_run
    zero_pred = float(np.mean(X ** 2))
    ok = after <= 0.5 * before and elapsed < 600
    acceptance(9, ok, f"masked loss {before:.4f} -> {after:.4f} (ratio {after / before:.3f}; "
                      f"zero predictor {zero_pred:.4f}), {elapsed:.1f}s")
    assert ok


def test_criterion_10_layerwise_trend(acceptance, toy_run):
    cfg, X, res, *_ = toy_run
    with Timer() as t:
        _, trace = model_forward(X, res.params, cfg)
        curve = layerwise_curves(trace, res.params, cfg)
        rho = curve.depth_correlation()
    ok = rho <= 0 and t.elapsed < 60
    acceptance(10, ok, f"R^c {np.round(curve.rc, 3).tolist()}, Spearman {rho:+.3f}, "
                       f"{t.elapsed:.1f}s")
    assert ok


def test_criterion_11_checkpoint(acceptance, tmp_path):
    with Timer() as t:
        cfg = preset("toy", num_classes=3)
        params = init_parameters(cfg, make_rng(0), with_head=True)
        f = tmp_path / "m.ckpt"
        checkpoint_save(params, cfg, f)
        back, cfg2 = checkpoint_load(f)
        exact = cfg2 == cfg and all(a.tobytes() == b.tobytes()
                                    for a, b in zip(params.tensors(), back.tensors()))
        data = f.read_bytes()
        corruptions = [data[:-1], b"XXXX" + data[4:], data[:4] + b"\x09" + data[5:],
                       data + b"\x00"]
        rejected = 0
        for i, blob in enumerate(corruptions):
            g = tmp_path / f"bad{i}.ckpt"
            g.write_bytes(blob)
            try:
                checkpoint_load(g)
            except FormatError:
                rejected += 1
    ok = exact and rejected == len(corruptions) and t.elapsed < 1
    acceptance(11, ok, f"bit-exact {exact}, rejected {rejected}/{len(corruptions)} corrupt files, "
                       f"{t.elapsed:.3f}s")
    assert ok


def _csv_outputs(out: Path) -> dict[str, bytes]:
    return {p.relative_to(out).as_posix(): p.read_bytes() for p in sorted(out.rglob("*.csv"))}


def test_criterion_12_cli_determinism(acceptance, tmp_path):
    small = ["--samples", "48"]
    commands = {
        "count-params": ["count-params", "--preset", "base"],
        "train": ["train", "--epochs", "2", *small],
        "reconstruct": ["reconstruct", *small],
        "diagnose": ["diagnose", *small],
        "verify": ["verify", "--suite", "all", "--trials", "200"],
        "probe": ["probe", "--samples", "200"],
    }
    model = tmp_path / "model.ckpt"
    failures = []
    for name, argv in commands.items():
        outputs = []
        for run, threads in enumerate(("1", "1", "3")):
            out = tmp_path / f"{name}{run}"
            extra = ["--model", str(model)] if name in ("reconstruct", "diagnose", "probe") else []
            code = main([*argv, "--seed", "5", "--threads", threads, "--out", str(out), *extra])
            if code != 0:
                failures.append(f"{name} exit {code}")
            outputs.append(_csv_outputs(out))
            if name == "train" and run == 0:
                model.write_bytes((out / "model.ckpt").read_bytes())
        if not outputs[0] or any(o != outputs[0] for o in outputs[1:]):
            failures.append(f"{name} csv differs")
    ok = not failures
    acceptance(12, ok, f"{len(commands)} subcommands x 3 runs (threads 1, 1, 3): "
                       + ("byte-identical CSV" if ok else "; ".join(failures)))
    assert ok
