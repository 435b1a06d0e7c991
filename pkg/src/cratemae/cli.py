"""Command-line entry point: ``cratemae <subcommand> [flags]``.

Exit codes: 0 on success, 1 on a runtime or verification failure, 2 on a
usage error. Every CSV output is a pure function of the flags and --seed.
"""
from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from .data import load_cifar10_bin, load_idx, synth_patches, unpatchify
from .diag import (
    attention_grid,
    attention_map,
    csv_text,
    emit_ppm,
    head_family,
    layerwise_curves,
    pca_token_visualization,
)
from .errors import CrateError
from .linalg import layer_norm, sub_rng
from .net import (
    PRESETS,
    ModelConfig,
    checkpoint_load,
    checkpoint_save,
    count_parameters,
    encode,
    init_parameters,
    model_forward,
    preset,
)
from .suites import SUITES, run_suite
from .train import TrainHyper, draw_masks, linear_probe, masked_loss, train_loop

_EVAL_MASK = 61


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --- configuration --------------------------------------------------------

_CFG_TYPES = {f.name: f.type for f in dataclasses.fields(ModelConfig)}


def read_config_file(path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "preset":
            out[key] = value
        elif key in _CFG_TYPES:
            out[key] = float(value) if _CFG_TYPES[key] in (float, "float") else int(value)
        else:
            raise UsageError(f"{path}:{n}: unknown key {key!r}")
    return out


def model_config(args) -> ModelConfig:
    values = read_config_file(args.config) if args.config else {}
    name = values.pop("preset", None) or args.preset
    return preset(name, **values)


# --- data -----------------------------------------------------------------

def load_patches(args, cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray | None, ModelConfig]:
    """Patches ``(n, D, N)``, labels, and ``cfg`` adapted to the image grid."""
    if args.format == "synth":
        ds = synth_patches(cfg.D, cfg.N, args.samples, args.seed)
        return ds.patches, ds.labels, cfg
    if not args.data:
        raise UsageError(f"--format {args.format} needs --data")
    if args.format == "idx":
        ds = load_idx(args.data, args.labels)
    else:
        ds = load_cifar10_bin(args.data)
    H, W, C = ds.shape
    cfg = dataclasses.replace(cfg, N=cfg.grid(H, W), channels=C)
    images = ds.images[:args.samples] if args.samples else ds.images
    labels = None if ds.labels is None else ds.labels[:len(images)]
    return ds.patches(cfg.patch_h, cfg.patch_w)[:len(images)], labels, cfg


def _image_side(cfg: ModelConfig) -> tuple[int, int]:
    side = int(round(np.sqrt(cfg.N)))
    if side * side == cfg.N:
        return side * cfg.patch_h, side * cfg.patch_w
    return cfg.patch_h, cfg.N * cfg.patch_w


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_model(args):
    if not args.model:
        raise UsageError("--model CHECKPOINT is required")
    return checkpoint_load(args.model)


# --- subcommands ----------------------------------------------------------

def cmd_count_params(args) -> int:
    cfg = model_config(args)
    n = count_parameters(cfg, include_head=True)
    print(n)
    if args.out:
        (_out_dir(args) / "params.csv").write_text(
            csv_text(["preset", "L", "d", "K", "N", "D", "params"],
                     [(args.preset, cfg.L, cfg.d, cfg.K, cfg.N, cfg.D, n)]))
    return 0


def cmd_train(args) -> int:
    cfg = model_config(args)
    X, _, cfg = load_patches(args, cfg)
    hyper = TrainHyper(args.epochs, args.batch, args.lr, args.wd, args.mask, args.seed,
                       args.threads)
    params0 = init_parameters(cfg, sub_rng(args.seed, 21))
    eval_masks = draw_masks(len(X), cfg.N, args.mask, args.seed, _EVAL_MASK)
    before = masked_loss(X, eval_masks, params0, cfg, args.threads)
    res = train_loop(X, cfg, hyper, params=params0.copy())
    after = masked_loss(X, eval_masks, res.params, cfg, args.threads)
    out = _out_dir(args)
    (out / "loss.csv").write_text(res.history_csv())
    (out / "eval.csv").write_text(csv_text(["stage", "masked_loss"],
                                           [("initial", before), ("final", after)]))
    checkpoint_save(res.params, cfg, out / "model.ckpt")
    print(f"trained {len(res.history)} steps; masked loss {before:.6g} -> {after:.6g}")
    return 0


def cmd_reconstruct(args) -> int:
    params, cfg = _load_model(args)
    X, _, _ = load_patches(args, cfg)
    masks = draw_masks(len(X), cfg.N, args.mask, args.seed, _EVAL_MASK)
    Xin = np.where(masks[:, None, :], 0.0, X)
    X_hat, _ = model_forward(Xin, params, cfg)
    rows = [(i, masked_loss(X[i:i + 1], masks[i:i + 1], params, cfg)) for i in range(len(X))]
    out = _out_dir(args)
    (out / "reconstruct.csv").write_text(csv_text(["sample", "masked_loss"], rows))
    H, W = _image_side(cfg)
    for i in range(min(len(X), args.images)):
        panels = [unpatchify(M[i], H, W, cfg.patch_h, cfg.patch_w, cfg.channels)
                  for M in (X, Xin, X_hat)]
        strip = np.concatenate(panels, axis=1)
        lo, hi = strip.min(), strip.max()
        strip = (strip - lo) / (hi - lo) if hi > lo else np.zeros_like(strip)
        emit_ppm(strip if cfg.channels == 3 else strip[..., 0], out / f"reconstruct_{i}.ppm")
    print(f"mean masked loss {np.mean([r[1] for r in rows]):.6g} over {len(rows)} samples")
    return 0


def cmd_diagnose(args) -> int:
    params, cfg = _load_model(args)
    X, _, _ = load_patches(args, cfg)
    _, trace = model_forward(X, params, cfg)
    out = _out_dir(args)
    curve = layerwise_curves(trace, params, cfg)
    (out / "layers.csv").write_text(curve.to_csv())
    if params.enc:
        layer = params.enc[-1]
        Z = trace.enc_in[-1]
        Z = Z if Z.ndim == 3 else Z[None]
        rows = []
        for k in range(cfg.K):
            a = attention_map(layer_norm(Z[0], layer.ln1_g, layer.ln1_b, cfg.ln_eps),
                              layer.W_qkv, k, cfg.K)
            rows += [(k, i, float(v)) for i, v in enumerate(a)]
            g = attention_grid(a)
            emit_ppm(g / g.max(), out / f"attention_head{k}.ppm")
        (out / "attention.csv").write_text(csv_text(["head", "token", "weight"], rows))
        feats = trace.features if trace.features.ndim == 3 else trace.features[None]
        if len(feats) >= 2:
            vis = pca_token_visualization(feats[:, :, 1:], head_family(layer.W_qkv, cfg.K))
            side = int(round(np.sqrt(cfg.N)))
            shape = (side, side) if side * side == cfg.N else (1, cfg.N)
            for j in range(min(len(feats), args.images)):
                emit_ppm(vis.rgb[j].reshape(*shape, 3), out / f"pca_{j}.ppm")
    print(f"layer R^c: {', '.join(f'{v:.4f}' for v in curve.rc)}; "
          f"depth correlation {curve.depth_correlation():.3f}")
    return 0


def cmd_verify(args) -> int:
    names = SUITES if args.suite == "all" else (args.suite,)
    out = _out_dir(args) if args.out else None
    ok = True
    for name in names:
        res = run_suite(name, args.seed, args.trials, args.threads)
        ok &= res.passed
        print(f"[{'PASS' if res.passed else 'FAIL'}] {name}")
        for line in res.summary:
            print(f"    {line}")
        if out:
            for tname, table in res.tables.items():
                (out / f"{tname}.csv").write_text(table.csv())
    return 0 if ok else 1


def cmd_probe(args) -> int:
    params, cfg = _load_model(args)
    X, labels, _ = load_patches(args, cfg)
    if labels is None:
        raise UsageError("probing needs labels (use --labels with --format idx)")
    feats = encode(X, params, cfg)[..., 0]
    classes = int(labels.max()) + 1
    grid = [10.0 ** e for e in range(6)] if args.grid else [1.0]
    rows = []
    for C in grid:
        _, acc = linear_probe(feats, labels, classes, C=C, seed=args.seed)
        rows.append((C, acc))
    if args.out:
        (_out_dir(args) / "probe.csv").write_text(csv_text(["C", "accuracy"], rows))
    for C, acc in rows:
        print(f"C={C:g}: held-out accuracy {acc:.4f}")
    return 0


# --- parser ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--preset", choices=sorted(PRESETS), default="toy")
    common.add_argument("--config", help="flat key = value file overriding the preset")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--out", help="output directory")

    data = _Parser(add_help=False)
    data.add_argument("--data", help="image file (IDX images or CIFAR-10 batch)")
    data.add_argument("--labels", help="IDX labels file")
    data.add_argument("--format", choices=("idx", "cifar", "synth"), default="synth")
    data.add_argument("--samples", type=int, default=512,
                      help="synthetic sample count, or a cap on loaded images")
    data.add_argument("--mask", type=float, default=0.75, help="masked token fraction")

    model = _Parser(add_help=False)
    model.add_argument("--model", help="checkpoint written by train")
    model.add_argument("--images", type=int, default=4, help="PPM images to emit")

    p = _Parser(prog="cratemae", description="White-box masked autoencoder toolkit.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.add_parser("count-params", parents=[common], help="print the trainable parameter count")
    t = sub.add_parser("train", parents=[common, data], help="masked-autoencoder training")
    t.add_argument("--epochs", type=int, default=20)
    t.add_argument("--batch", type=int, default=16)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--wd", type=float, default=0.0)
    sub.add_parser("reconstruct", parents=[common, data, model],
                   help="masked reconstructions from a checkpoint")
    sub.add_parser("diagnose", parents=[common, data, model],
                   help="layer curves, attention maps and PCA images")
    v = sub.add_parser("verify", parents=[common], help="numerical verification suites")
    v.add_argument("--suite", choices=SUITES + ("all",), default="all")
    v.add_argument("--trials", type=int, help="Monte Carlo trials (suite default if omitted)")
    pr = sub.add_parser("probe", parents=[common, data, model],
                        help="linear probe on class-token features")
    pr.add_argument("--grid", action="store_true", help="sweep C over 1e0..1e5")
    return p


_COMMANDS = {
    "count-params": cmd_count_params,
    "train": cmd_train,
    "reconstruct": cmd_reconstruct,
    "diagnose": cmd_diagnose,
    "verify": cmd_verify,
    "probe": cmd_probe,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 2
        if getattr(args, "threads", 1) < 1:
            raise UsageError("--threads must be >= 1")
        return _COMMANDS[args.command](args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(e, file=sys.stderr)
        return 2
    except (CrateError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
