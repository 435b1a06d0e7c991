"""Layer-wise diagnostics, attention maps and PCA token colouring."""
from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from .errors import DimensionError
from .linalg import softmax_columns
from .net import ModelConfig, ModelParams, Trace
from .rate import RateParams, coding_rate_conditional, sparsity_measure


def head_family(W_qkv: np.ndarray, K: int) -> np.ndarray:
    """Subspace bases ``U_k`` (``K x d x p``): transposed row blocks of ``W_qkv``."""
    d = W_qkv.shape[1]
    if W_qkv.shape[0] != d or d % K:
        raise DimensionError(f"W_qkv {W_qkv.shape} cannot split into {K} heads")
    return W_qkv.reshape(K, d // K, d).transpose(0, 2, 1)


# --- layer-wise curves ----------------------------------------------------

@dataclass
class LayerCurve:
    rc: np.ndarray  # R^c(Z^{l+1/2} | U^l) per layer
    sparsity: np.ndarray  # nonzero fraction of Z^{l+1} per layer

    def __len__(self) -> int:
        return len(self.rc)

    def rows(self) -> list[tuple[int, float, float]]:
        return [(l, float(r), float(s)) for l, (r, s) in enumerate(zip(self.rc, self.sparsity))]

    def to_csv(self) -> str:
        return csv_text(["layer", "rc", "sparsity"], self.rows())

    def depth_correlation(self) -> float:
        """Spearman rank correlation of ``rc`` with layer index (0 if constant)."""
        if len(self.rc) < 2 or np.ptp(self.rc) == 0:
            return 0.0
        return float(spearmanr(np.arange(len(self.rc)), self.rc)[0])


def layerwise_curves(trace: Trace, params: ModelParams, cfg: ModelConfig,
                     rate: RateParams | None = None) -> LayerCurve:
    """Compression and sparsity per encoder layer, averaged over the batch."""
    L = len(params.enc)
    if len(trace.enc_half) != L or len(trace.enc_out) != L:
        raise DimensionError(f"trace has {len(trace.enc_half)} layers, params have {L}")
    rate = rate or RateParams(1.0, cfg.d, cfg.p, cfg.N + 1)
    rc, sp = np.zeros(L), np.zeros(L)
    for l, layer in enumerate(params.enc):
        U = head_family(layer.W_qkv, cfg.K)
        half, out = trace.enc_half[l], trace.enc_out[l]
        half = half if half.ndim == 3 else half[None]
        out = out if out.ndim == 3 else out[None]
        rc[l] = np.mean([coding_rate_conditional(Z, U, rate) for Z in half])
        sp[l] = np.mean([sparsity_measure(Z) for Z in out])
    return LayerCurve(rc, sp)


# --- attention maps -------------------------------------------------------

def attention_map(Z: np.ndarray, W_qkv: np.ndarray, head: int, K: int) -> np.ndarray:
    """Class-token attention over image tokens for one head.

    ``A_i = softmax_i <U_k^T z_i, U_k^T z_cls>`` with column 0 of ``Z`` the
    class token; returns an ``N``-vector.
    """
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[1] < 2:
        raise DimensionError("need a d x (N+1) token matrix with a class token")
    U = head_family(W_qkv, K)
    if not 0 <= head < K:
        raise DimensionError(f"head {head} outside [0, {K})")
    W = U[head].T @ Z
    return softmax_columns((W[:, 1:].T @ W[:, :1]))[:, 0]


def attention_grid(a: np.ndarray) -> np.ndarray:
    """Reshape an ``N``-vector to ``sqrt(N) x sqrt(N)``, else a ``1 x N`` strip."""
    a = np.asarray(a)
    side = math.isqrt(a.size)
    if side * side == a.size:
        return a.reshape(side, side)
    warnings.warn(f"N = {a.size} is not square; emitting a 1 x {a.size} strip")
    return a.reshape(1, -1)


# --- PCA visualization ----------------------------------------------------

@dataclass
class PCAVisualization:
    rgb: np.ndarray  # (J, N, 3) in [0, 1]; background tokens are black
    foreground: np.ndarray  # (J, N) bool
    first: np.ndarray  # (d,) first principal direction
    components: np.ndarray  # (c, d) foreground principal directions, c <= 3
    lam: float


def _principal(F: np.ndarray, count: int) -> np.ndarray:
    """Top ``count`` principal directions of the centred rows of ``F``."""
    C = F - F.mean(axis=0)
    w, V = np.linalg.eigh(C.T @ C)
    return V[:, ::-1][:, :count].T


def pca_token_visualization(tokens: np.ndarray, family: np.ndarray,
                            lam: float | None = None) -> PCAVisualization:
    """Colour tokens by their top three foreground principal components.

    ``tokens`` is ``(J, d, N)``. Features are the stacked head projections
    ``[U_1^T z; ...; U_K^T z]``. Tokens whose first-component projection has
    magnitude at most ``lam`` are background. Each RGB channel is min-max
    normalized over the foreground.
    """
    T = np.asarray(tokens, dtype=np.float64)
    if T.ndim != 3 or T.shape[0] < 2:
        raise DimensionError("need a (J, d, N) stack with J >= 2 images")
    J, d, N = T.shape
    U = np.asarray(family, dtype=np.float64)
    F = np.einsum("kdp,jdn->jnkp", U, T).reshape(J * N, -1)
    first = _principal(F, 1)[0]
    proj = np.abs((F - F.mean(axis=0)) @ first)
    if lam is None:
        lam = float(np.percentile(proj, 60))
    fg = proj > lam
    rgb = np.zeros((J * N, 3))
    comps = np.zeros((0, F.shape[1]))
    if fg.any():
        comps = _principal(F[fg], min(3, F.shape[1]))
        P = (F[fg] - F[fg].mean(axis=0)) @ comps.T
        lo, span = P.min(axis=0), np.ptp(P, axis=0)
        P = np.where(span > 0, (P - lo) / np.where(span > 0, span, 1.0), 0.0)
        rgb[fg, :P.shape[1]] = P
    return PCAVisualization(rgb.reshape(J, N, 3), fg.reshape(J, N), first, comps, lam)


# --- output ---------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    return str(v)


def csv_text(header: list[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def emit_csv(header: list[str], rows, path) -> None:
    Path(path).write_text(csv_text(header, rows))


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    return rows[0], rows[1:]


def ppm_bytes(grid: np.ndarray) -> bytes:
    """Binary P6 image of an ``(H, W, 3)`` or grey ``(H, W)`` grid in [0, 1]."""
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim == 2:
        g = np.repeat(g[..., None], 3, axis=2)
    if g.ndim != 3 or g.shape[2] != 3:
        raise DimensionError(f"pixel grid {g.shape} is not (H, W, 3)")
    pix = np.round(np.clip(g, 0.0, 1.0) * 255).astype(np.uint8)
    H, W = g.shape[:2]
    return f"P6\n{W} {H}\n255\n".encode() + pix.tobytes()


def emit_ppm(grid: np.ndarray, path) -> None:
    Path(path).write_bytes(ppm_bytes(grid))
