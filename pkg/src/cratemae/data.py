"""Image datasets, patch extraction and the synthetic token dataset.

Patch layout: non-overlapping patches in raster order; inside a patch the
values are flattened row-major over ``(h, w)`` with channels innermost. A
patch matrix has one patch per column, shape ``(D, N)``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError
from .linalg import random_orthonormal_family, sub_rng
from .signal import SignalConfig


@dataclass
class ImageDataset:
    images: np.ndarray  # (n, H, W, C), values in [0, 1]
    labels: np.ndarray | None = None

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DimensionError("images must have shape (n, H, W, C)")
        if self.labels is not None and len(self.labels) != len(self.images):
            raise DimensionError("label count differs from image count")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def patches(self, patch_h: int, patch_w: int) -> np.ndarray:
        """All images as patch matrices, ``(n, D, N)``."""
        return patchify(self.images, patch_h, patch_w)


@dataclass
class TokenDataset:
    """Patch matrices drawn from the signal model, plus their latent tokens."""
    patches: np.ndarray  # (n, D, N)
    labels: np.ndarray
    latents: np.ndarray  # (n, d, N)
    lift: np.ndarray  # (D, d)

    def __len__(self) -> int:
        return self.patches.shape[0]


# --- binary formats -------------------------------------------------------

_IDX_IMAGES, _IDX_LABELS = 0x00000803, 0x00000801


def _read_idx(path, magic: int, ndim: int) -> np.ndarray:
    data = Path(path).read_bytes()
    header = 4 + 4 * ndim
    if len(data) < header:
        raise FormatError(f"{path}: truncated header")
    (found,) = struct.unpack(">I", data[:4])
    if found != magic:
        raise FormatError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    size = int(np.prod(dims))
    if len(data) != header + size:
        raise FormatError(f"{path}: payload has {len(data) - header} bytes, expected {size}")
    return np.frombuffer(data, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path=None) -> ImageDataset:
    """MNIST-style IDX files (unsigned bytes) scaled to [0, 1]."""
    raw = _read_idx(images_path, _IDX_IMAGES, 3)
    labels = None
    if labels_path is not None:
        labels = _read_idx(labels_path, _IDX_LABELS, 1).astype(np.int64)
        if len(labels) != len(raw):
            raise FormatError(f"{len(raw)} images but {len(labels)} labels")
    return ImageDataset(raw[..., None].astype(np.float64) / 255.0, labels)


_CIFAR_RECORD = 1 + 3 * 32 * 32


def load_cifar10_bin(path) -> ImageDataset:
    """CIFAR-10 binary batch: a label byte then R, G, B planes of 32x32."""
    data = Path(path).read_bytes()
    if len(data) % _CIFAR_RECORD:
        raise FormatError(f"{path}: size {len(data)} is not a multiple of {_CIFAR_RECORD}")
    rec = np.frombuffer(data, dtype=np.uint8).reshape(-1, _CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    planes = rec[:, 1:].reshape(-1, 3, 32, 32)
    images = planes.transpose(0, 2, 3, 1).astype(np.float64) / 255.0
    return ImageDataset(images, labels)


# --- patches --------------------------------------------------------------

def patchify(image: np.ndarray, patch_h: int, patch_w: int) -> np.ndarray:
    """``(H, W[, C])`` -> ``(D, N)``, or ``(n, H, W, C)`` -> ``(n, D, N)``."""
    image = np.asarray(image, dtype=np.float64)
    single = image.ndim <= 3
    if image.ndim == 2:
        image = image[..., None]
    if single:
        image = image[None]
    n, H, W, C = image.shape
    if H % patch_h or W % patch_w:
        raise DimensionError(f"{H}x{W} image is not divisible into {patch_h}x{patch_w} patches")
    gh, gw = H // patch_h, W // patch_w
    blocks = image.reshape(n, gh, patch_h, gw, patch_w, C).transpose(0, 1, 3, 2, 4, 5)
    out = blocks.reshape(n, gh * gw, patch_h * patch_w * C).transpose(0, 2, 1)
    return out[0] if single else out


def unpatchify(X: np.ndarray, H: int, W: int, patch_h: int, patch_w: int,
               channels: int = 1) -> np.ndarray:
    """Inverse of :func:`patchify`; returns ``(H, W, C)`` or ``(n, H, W, C)``."""
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 2
    if single:
        X = X[None]
    if H % patch_h or W % patch_w:
        raise DimensionError(f"{H}x{W} image is not divisible into {patch_h}x{patch_w} patches")
    gh, gw = H // patch_h, W // patch_w
    n, D, N = X.shape
    if D != patch_h * patch_w * channels or N != gh * gw:
        raise DimensionError(f"patch matrix {X.shape[1:]} does not fit a {H}x{W}x{channels} image")
    blocks = X.transpose(0, 2, 1).reshape(n, gh, gw, patch_h, patch_w, channels)
    out = blocks.transpose(0, 1, 3, 2, 4, 5).reshape(n, H, W, channels)
    return out[0] if single else out


# --- synthetic data -------------------------------------------------------

def synth_dataset(cfg: SignalConfig, family: np.ndarray, count: int, rng: np.random.Generator,
                  D: int | None = None, correlation: float = 0.8,
                  lift: np.ndarray | None = None, gain: float | None = None) -> TokenDataset:
    """Patch matrices whose tokens follow the subspace signal model.

    Each sample picks one class ``c``; all of its tokens lie in ``U_c`` with
    coefficients ``sqrt(rho) a + sqrt(1 - rho) xi_i`` that share the per-sample
    draw ``a`` (each coefficient is still ``N(0, I/p)``), plus isotropic noise
    of level ``sigma``. Sharing ``a`` makes hidden tokens predictable from
    visible ones. Tokens are mapped to ``D``-dim patches by a fixed lift equal
    to ``gain`` times a matrix with orthonormal columns. The default gain
    ``sqrt(D)`` gives patch entries unit variance.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if not 0.0 <= correlation <= 1.0:
        raise ValueError("correlation must lie in [0, 1]")
    family = np.asarray(family, dtype=np.float64)
    K, d, p, N = cfg.K, cfg.d, cfg.p, cfg.N
    if family.shape != (K, d, p):
        raise DimensionError(f"family shape {family.shape} != {(K, d, p)}")
    D = d if D is None else D
    if lift is None:
        if D < d:
            raise DimensionError(f"cannot lift d = {d} tokens into D = {D} < d")
        gain = np.sqrt(D) if gain is None else gain
        lift = gain * random_orthonormal_family(D, d, 1, rng)[0]
    labels = rng.integers(0, K, size=count)
    shared = rng.standard_normal((count, p, 1))
    own = rng.standard_normal((count, p, N))
    coeffs = (np.sqrt(correlation) * shared + np.sqrt(1 - correlation) * own) / np.sqrt(p)
    latents = family[labels] @ coeffs
    latents = latents + rng.standard_normal((count, d, N)) * (cfg.sigma / np.sqrt(d))
    return TokenDataset(lift @ latents, labels, latents, lift)


_SYNTH_STREAM = 31


def synth_patches(D: int, N: int, count: int, seed: int, d: int = 8, K: int = 4,
                  sigma: float = 0.05, correlation: float = 0.9) -> TokenDataset:
    """Seeded :func:`synth_dataset` with a fresh subspace family and lift."""
    rng = sub_rng(seed, _SYNTH_STREAM)
    cfg = SignalConfig.build(d, N, K, sigma)
    family = random_orthonormal_family(d, cfg.p, K, rng)
    return synth_dataset(cfg, family, count, rng, D=D, correlation=correlation)
