"""The masked-autoencoding white-box transformer.

Tokens are columns. Every op accepts a single token matrix ``(d, M)`` or a
batch ``(B, d, M)``; parameters are shared across the batch.

Each forward op has a ``*_fwd`` variant that also returns a cache, and a
matching ``*_bwd`` that maps the output cotangent to input and parameter
cotangents. Parameter cotangents are summed over the batch.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError
from .linalg import softmax_columns


# --- configuration --------------------------------------------------------

@dataclass(frozen=True)
class ModelConfig:
    L: int
    d: int
    K: int
    N: int
    patch_h: int
    patch_w: int
    channels: int
    eta: float = 0.1
    lam: float = 0.5
    ln_eps: float = 1e-5
    num_classes: int = 0

    def __post_init__(self):
        if self.K < 1 or self.d % self.K:
            raise DimensionError(f"K = {self.K} must divide d = {self.d}")
        if min(self.d, self.N, self.patch_h, self.patch_w, self.channels) < 1 or self.L < 0:
            raise DimensionError("sizes must be positive")

    @property
    def p(self) -> int:
        return self.d // self.K

    @property
    def D(self) -> int:
        return self.patch_h * self.patch_w * self.channels

    def grid(self, image_h: int, image_w: int) -> int:
        """Token count for an ``image_h x image_w`` image."""
        if image_h % self.patch_h or image_w % self.patch_w:
            raise DimensionError("image size not divisible by patch size")
        return (image_h // self.patch_h) * (image_w // self.patch_w)


PRESETS = {
    "base": ModelConfig(L=12, d=768, K=12, N=196, patch_h=16, patch_w=16, channels=3),
    "small": ModelConfig(L=12, d=576, K=12, N=196, patch_h=16, patch_w=16, channels=3),
    "toy": ModelConfig(L=4, d=64, K=8, N=16, patch_h=4, patch_w=4, channels=1),
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(cfg, **overrides) if overrides else cfg


# --- parameters -----------------------------------------------------------

class _Tensors:
    """Mixin: ``named_tensors`` in declared field order."""

    def named_tensors(self, prefix: str = ""):
        for f in fields(self):
            yield prefix + f.name, getattr(self, f.name)


@dataclass
class EncoderLayerParams(_Tensors):
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    W_qkv: np.ndarray
    W_out: np.ndarray
    b_out: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    D_dict: np.ndarray


@dataclass
class DecoderLayerParams(_Tensors):
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    E_dict: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    W_qkv: np.ndarray
    W_out: np.ndarray
    b_out: np.ndarray


@dataclass
class HeadParams(_Tensors):
    ln_g: np.ndarray
    ln_b: np.ndarray
    W_head: np.ndarray


@dataclass
class ModelParams:
    W_pre: np.ndarray
    E_pos: np.ndarray
    z_cls: np.ndarray
    enc: list[EncoderLayerParams]
    dec: list[DecoderLayerParams]
    W_post: np.ndarray
    head: HeadParams | None = None

    def named_tensors(self):
        """All trainable tensors in the canonical (checkpoint) order."""
        yield "W_pre", self.W_pre
        yield "E_pos", self.E_pos
        yield "z_cls", self.z_cls
        for i, layer in enumerate(self.enc):
            yield from layer.named_tensors(f"enc{i}.")
        for i, layer in enumerate(self.dec):
            yield from layer.named_tensors(f"dec{i}.")
        yield "W_post", self.W_post
        if self.head is not None:
            yield from self.head.named_tensors("head.")

    def tensors(self) -> list[np.ndarray]:
        return [t for _, t in self.named_tensors()]

    def map(self, fn) -> "ModelParams":
        """New params with ``fn`` applied to every tensor."""
        return ModelParams(
            fn(self.W_pre), fn(self.E_pos), fn(self.z_cls),
            [EncoderLayerParams(*(fn(t) for _, t in l.named_tensors())) for l in self.enc],
            [DecoderLayerParams(*(fn(t) for _, t in l.named_tensors())) for l in self.dec],
            fn(self.W_post),
            None if self.head is None else HeadParams(*(fn(t) for _, t in self.head.named_tensors())),
        )

    def zeros_like(self) -> "ModelParams":
        return self.map(np.zeros_like)

    def copy(self) -> "ModelParams":
        return self.map(np.array)

    def size(self) -> int:
        return sum(t.size for t in self.tensors())


def count_parameters(cfg: ModelConfig, include_head: bool = False) -> int:
    d, D, N, L = cfg.d, cfg.D, cfg.N, cfg.L
    pre = d * D + d * (N + 1) + d
    enc_layer = 4 * d + 3 * d * d + d
    dec_layer = 4 * d + 3 * d * d + d
    post = D * d
    total = pre + L * (enc_layer + dec_layer) + post
    if include_head and cfg.num_classes:
        total += 2 * d + cfg.num_classes * d
    return total


def _kaiming(rng, rows, cols):
    bound = np.sqrt(6.0 / cols)
    return rng.uniform(-bound, bound, size=(rows, cols))


def init_parameters(cfg: ModelConfig, rng: np.random.Generator,
                    with_head: bool = False) -> ModelParams:
    d = cfg.d
    ones, zeros = (lambda: np.ones(d)), (lambda: np.zeros(d))
    W_pre = _kaiming(rng, d, cfg.D)
    E_pos = 0.02 * rng.standard_normal((d, cfg.N + 1))
    z_cls = 0.02 * rng.standard_normal(d)
    enc = [EncoderLayerParams(ones(), zeros(), _kaiming(rng, d, d), _kaiming(rng, d, d), zeros(),
                              ones(), zeros(), _kaiming(rng, d, d)) for _ in range(cfg.L)]
    dec = [DecoderLayerParams(ones(), zeros(), _kaiming(rng, d, d), ones(), zeros(),
                              _kaiming(rng, d, d), _kaiming(rng, d, d), zeros())
           for _ in range(cfg.L)]
    W_post = _kaiming(rng, cfg.D, d)
    head = None
    if with_head:
        if cfg.num_classes < 1:
            raise DimensionError("head requested but num_classes is 0")
        head = HeadParams(ones(), zeros(), _kaiming(rng, cfg.num_classes, d))
    return ModelParams(W_pre, E_pos, z_cls, enc, dec, W_post, head)


# --- primitive ops --------------------------------------------------------

def _col(v):
    return v[:, None]


def _matmul_grad(dy, x):
    """Parameter cotangent of ``y = W x``: ``sum_b dy x^T``."""
    if dy.ndim == 2:
        return dy @ x.T
    return np.einsum("bim,bjm->ij", dy, x)


def ln_fwd(x, g, b, eps):
    mu = x.mean(axis=-2, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt(np.mean(xc * xc, axis=-2, keepdims=True) + eps)
    xhat = xc * rstd
    return xhat * _col(g) + _col(b), (xhat, rstd, g)


def ln_bwd(dy, cache):
    xhat, rstd, g = cache
    dg = np.sum(dy * xhat, axis=tuple(range(dy.ndim - 2)) + (-1,))
    db = np.sum(dy, axis=tuple(range(dy.ndim - 2)) + (-1,))
    dxhat = dy * _col(g)
    dx = rstd * (dxhat - dxhat.mean(axis=-2, keepdims=True)
                 - xhat * np.mean(dxhat * xhat, axis=-2, keepdims=True))
    return dx, dg, db


def _split_heads(w, K):
    *lead, d, M = w.shape
    return w.reshape(*lead, K, d // K, M)


def _merge_heads(h):
    *lead, K, p, M = h.shape
    return h.reshape(*lead, K * p, M)


def mssa_fwd(Z, W_qkv, W_out, b_out, K, mode="network", beta=1.0):
    d = Z.shape[-2]
    if d % K or W_qkv.shape != (d, d):
        raise DimensionError(f"bad MSSA shapes: Z {Z.shape}, W_qkv {W_qkv.shape}, K={K}")
    w = W_qkv @ Z
    wk = _split_heads(w, K)
    p = d // K
    scale = p ** -0.5 if mode == "network" else 1.0
    S = scale * np.swapaxes(wk, -1, -2) @ wk
    # column j of A is the attention of query j over all keys; dots are symmetric
    A = softmax_columns(S)
    O = _merge_heads(wk @ A)
    if mode == "network":
        out = W_out @ O + _col(b_out)
    elif mode == "math":
        out = beta * (W_qkv.T @ O)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return out, (Z, wk, A, O, scale)


def mssa_forward(Z, W_qkv, W_out=None, b_out=None, K=1, mode="network", beta=1.0):
    """Multi-head subspace self-attention.

    ``network``: per-head attention scaled by ``p^-1/2`` followed by the
    output projection ``W_out`` and bias.
    ``math``: ``beta * [U_1..U_K] [U_k^T Z softmax((U_k^T Z)^T U_k^T Z)]_k`` with
    ``U_k`` the transpose of the k-th row block of ``W_qkv``.
    """
    return mssa_fwd(np.asarray(Z, dtype=np.float64), W_qkv, W_out, b_out, K, mode, beta)[0]


def mssa_bwd(dout, cache, W_qkv, W_out):
    """Network-mode backward: returns ``dZ, dW_qkv, dW_out, db_out``."""
    Z, wk, A, O, scale = cache
    dW_out = _matmul_grad(dout, O)
    db_out = np.sum(dout, axis=tuple(range(dout.ndim - 2)) + (-1,))
    dwk = _split_heads(W_out.T @ dout, wk.shape[-3])
    dA = np.swapaxes(wk, -1, -2) @ dwk
    dwk = dwk @ np.swapaxes(A, -1, -2)
    # softmax over axis -2
    dS = A * (dA - np.sum(dA * A, axis=-2, keepdims=True))
    dwk = dwk + scale * wk @ (dS + np.swapaxes(dS, -1, -2))
    dw = _merge_heads(dwk)
    return W_qkv.T @ dw, _matmul_grad(dw, Z), dW_out, db_out


def ista_fwd(Z, D_dict, eta, lam):
    if D_dict.shape != (Z.shape[-2], Z.shape[-2]):
        raise DimensionError(f"dictionary {D_dict.shape} does not match d = {Z.shape[-2]}")
    pre = Z - eta * (D_dict.T @ (D_dict @ Z - Z)) - eta * lam
    return np.maximum(pre, 0.0), (Z, pre)


def ista_forward(Z, D_dict, eta, lam):
    """``ReLU(Z - eta D^T (D Z - Z) - eta lam)``."""
    return ista_fwd(np.asarray(Z, dtype=np.float64), D_dict, eta, lam)[0]


def ista_bwd(dout, cache, D_dict, eta):
    Z, pre = cache
    G = dout * (pre > 0)
    DG = D_dict @ G
    dZ = G + eta * DG - eta * (D_dict.T @ DG)
    DZ = D_dict @ Z
    dD = eta * (_matmul_grad(Z, G) - _matmul_grad(DZ, G) - _matmul_grad(DG, Z))
    return dZ, dD


# --- layers ---------------------------------------------------------------

def encoder_fwd(Z, layer: EncoderLayerParams, cfg: ModelConfig):
    u, c_ln1 = ln_fwd(Z, layer.ln1_g, layer.ln1_b, cfg.ln_eps)
    m, c_attn = mssa_fwd(u, layer.W_qkv, layer.W_out, layer.b_out, cfg.K)
    Zh = Z + m
    v, c_ln2 = ln_fwd(Zh, layer.ln2_g, layer.ln2_b, cfg.ln_eps)
    out, c_ista = ista_fwd(v, layer.D_dict, cfg.eta, cfg.lam)
    return out, Zh, (c_ln1, c_attn, c_ln2, c_ista)


def encoder_layer(Z, layer: EncoderLayerParams, cfg: ModelConfig):
    """``Zh = Z + MSSA(LN1 Z)``, then ``ISTA(LN2 Zh)`` (no second residual)."""
    return encoder_fwd(_check_tokens(Z, cfg), layer, cfg)[0]


def encoder_bwd(dout, cache, layer: EncoderLayerParams, cfg: ModelConfig):
    c_ln1, c_attn, c_ln2, c_ista = cache
    dv, dD = ista_bwd(dout, c_ista, layer.D_dict, cfg.eta)
    dZh, dg2, db2 = ln_bwd(dv, c_ln2)
    du, dWqkv, dWout, dbout = mssa_bwd(dZh, c_attn, layer.W_qkv, layer.W_out)
    dZ, dg1, db1 = ln_bwd(du, c_ln1)
    return dZ + dZh, EncoderLayerParams(dg1, db1, dWqkv, dWout, dbout, dg2, db2, dD)


def decoder_fwd(Y, layer: DecoderLayerParams, cfg: ModelConfig):
    a, c_ln1 = ln_fwd(Y, layer.ln1_g, layer.ln1_b, cfg.ln_eps)
    Yh = layer.E_dict @ a
    u, c_ln2 = ln_fwd(Yh, layer.ln2_g, layer.ln2_b, cfg.ln_eps)
    m, c_attn = mssa_fwd(u, layer.W_qkv, layer.W_out, layer.b_out, cfg.K)
    return u - m, Yh, (c_ln1, a, c_ln2, c_attn)


def decoder_layer(Y, layer: DecoderLayerParams, cfg: ModelConfig):
    """``Yh = E LN1(Y)``, then ``LN2(Yh) - MSSA(LN2(Yh))``."""
    return decoder_fwd(_check_tokens(Y, cfg), layer, cfg)[0]


def decoder_bwd(dout, cache, layer: DecoderLayerParams, cfg: ModelConfig):
    c_ln1, a, c_ln2, c_attn = cache
    du_attn, dWqkv, dWout, dbout = mssa_bwd(-dout, c_attn, layer.W_qkv, layer.W_out)
    dYh, dg2, db2 = ln_bwd(dout + du_attn, c_ln2)
    dE = _matmul_grad(dYh, a)
    dY, dg1, db1 = ln_bwd(layer.E_dict.T @ dYh, c_ln1)
    return dY, DecoderLayerParams(dg1, db1, dE, dg2, db2, dWqkv, dWout, dbout)


# --- pre/post maps ---------------------------------------------------------

def preprocess(X, params: ModelParams):
    """``[z_cls, W_pre X] + E_pos``; column 0 is the class token."""
    X = np.asarray(X, dtype=np.float64)
    D, N = params.W_pre.shape[1], params.E_pos.shape[1] - 1
    if X.shape[-2:] != (D, N):
        raise DimensionError(f"patches have shape {X.shape[-2:]}, expected {(D, N)}")
    body = params.W_pre @ X
    cls = np.broadcast_to(_col(params.z_cls), body.shape[:-1] + (1,))
    return np.concatenate([cls, body], axis=-1) + params.E_pos


def postprocess(Y, params: ModelParams):
    """``W_post`` applied to the image-token columns (class token dropped)."""
    Y = np.asarray(Y, dtype=np.float64)
    if Y.shape[-2:] != params.E_pos.shape:
        raise DimensionError(f"tokens have shape {Y.shape[-2:]}, expected {params.E_pos.shape}")
    return params.W_post @ Y[..., 1:]


def _check_tokens(Z, cfg: ModelConfig):
    Z = np.asarray(Z, dtype=np.float64)
    if Z.shape[-2:] != (cfg.d, cfg.N + 1):
        raise DimensionError(f"tokens have shape {Z.shape[-2:]}, expected {(cfg.d, cfg.N + 1)}")
    return Z


# --- full model -----------------------------------------------------------

@dataclass
class Trace:
    """Intermediate representations, one entry per layer.

    ``enc_in[l]`` is ``Z^l``, ``enc_half[l]`` is ``Z^{l+1/2}`` and
    ``enc_out[l]`` is ``Z^{l+1}``; ``dec_in`` / ``dec_out`` likewise for ``Y``.
    """
    enc_in: list[np.ndarray] = field(default_factory=list)
    enc_half: list[np.ndarray] = field(default_factory=list)
    enc_out: list[np.ndarray] = field(default_factory=list)
    dec_in: list[np.ndarray] = field(default_factory=list)
    dec_half: list[np.ndarray] = field(default_factory=list)
    dec_out: list[np.ndarray] = field(default_factory=list)

    @property
    def features(self) -> np.ndarray:
        """Encoder output ``Z^L``."""
        return self.enc_out[-1] if self.enc_out else self.enc_in[0]


def _forward(X, params: ModelParams, cfg: ModelConfig, keep_cache: bool):
    Z = preprocess(X, params)
    trace, caches = Trace(), []
    for layer in params.enc:
        trace.enc_in.append(Z)
        Z, Zh, c = encoder_fwd(Z, layer, cfg)
        trace.enc_half.append(Zh)
        trace.enc_out.append(Z)
        if keep_cache:
            caches.append(c)
    if not params.enc:
        trace.enc_in.append(Z)
    Y = Z
    for layer in params.dec:
        trace.dec_in.append(Y)
        Y, Yh, c = decoder_fwd(Y, layer, cfg)
        trace.dec_half.append(Yh)
        trace.dec_out.append(Y)
        if keep_cache:
            caches.append(c)
    return postprocess(Y, params), trace, (X, Y, caches)


def model_forward(X, params: ModelParams, cfg: ModelConfig):
    """Reconstruct patches ``X`` (``D x N`` or ``B x D x N``); returns ``(X_hat, trace)``."""
    X_hat, trace, _ = _forward(X, params, cfg, keep_cache=False)
    return X_hat, trace


def encode(X, params: ModelParams, cfg: ModelConfig):
    """Encoder output ``Z^L`` only."""
    Z = preprocess(X, params)
    for layer in params.enc:
        Z = encoder_fwd(Z, layer, cfg)[0]
    return Z


def model_forward_cached(X, params: ModelParams, cfg: ModelConfig):
    X_hat, _, cache = _forward(X, params, cfg, keep_cache=True)
    return X_hat, cache


def model_backward(dX_hat, cache, params: ModelParams, cfg: ModelConfig) -> ModelParams:
    """Parameter cotangents of ``<dX_hat, X_hat>``, summed over the batch."""
    X, Y, caches = cache
    L = len(params.enc)
    dW_post = _matmul_grad(dX_hat, Y[..., 1:])
    dY = np.zeros_like(Y)
    dY[..., 1:] = params.W_post.T @ dX_hat
    dec_grads = [None] * len(params.dec)
    for i in reversed(range(len(params.dec))):
        dY, dec_grads[i] = decoder_bwd(dY, caches[L + i], params.dec[i], cfg)
    enc_grads = [None] * L
    dZ = dY
    for i in reversed(range(L)):
        dZ, enc_grads[i] = encoder_bwd(dZ, caches[i], params.enc[i], cfg)
    dZ = dZ if dZ.ndim == 3 else dZ[None]
    Xb = X if X.ndim == 3 else X[None]
    dE_pos = dZ.sum(axis=0)
    dz_cls = dE_pos[:, 0].copy()
    dW_pre = _matmul_grad(dZ[..., 1:], Xb)
    head = None
    if params.head is not None:
        head = HeadParams(*(np.zeros_like(t) for _, t in params.head.named_tensors()))
    return ModelParams(dW_pre, dE_pos, dz_cls, enc_grads, dec_grads, dW_post, head)


# --- checkpoints ------------------------------------------------------------

MAGIC = b"CMAE"
VERSION = 1
_HEADER = struct.Struct("<4sI9I3d")


def checkpoint_save(params: ModelParams, cfg: ModelConfig, path) -> None:
    parts = [_HEADER.pack(MAGIC, VERSION, cfg.L, cfg.d, cfg.K, cfg.p, cfg.N, cfg.D,
                          cfg.patch_h, cfg.patch_w, cfg.channels, cfg.eta, cfg.lam, cfg.ln_eps)]
    body = [t for name, t in params.named_tensors() if not name.startswith("head.")]
    for t in body:
        parts.append(struct.pack("<Q", t.size))
        parts.append(np.ascontiguousarray(t, dtype="<f8").tobytes())
    parts.append(struct.pack("<B", 0 if params.head is None else 1))
    if params.head is not None:
        for _, t in params.head.named_tensors():
            parts.append(struct.pack("<Q", t.size))
            parts.append(np.ascontiguousarray(t, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("truncated checkpoint")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def tensor(self, shape) -> np.ndarray:
        (count,) = struct.unpack("<Q", self.take(8))
        expected = int(np.prod(shape))
        if count != expected:
            raise FormatError(f"tensor has {count} elements, expected {expected}")
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)


def checkpoint_load(path) -> tuple[ModelParams, ModelConfig]:
    r = _Reader(Path(path).read_bytes())
    magic, version, L, d, K, p, N, D, ph, pw, C, eta, lam, ln_eps = _HEADER.unpack(
        r.take(_HEADER.size))
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    try:
        cfg = ModelConfig(L, d, K, N, ph, pw, C, eta, lam, ln_eps)
    except DimensionError as exc:
        raise FormatError(str(exc)) from None
    if cfg.p != p or cfg.D != D:
        raise FormatError("inconsistent derived sizes in header")
    vec, mat = (d,), (d, d)
    W_pre = r.tensor((d, D))
    E_pos = r.tensor((d, N + 1))
    z_cls = r.tensor(vec)
    enc = [EncoderLayerParams(r.tensor(vec), r.tensor(vec), r.tensor(mat), r.tensor(mat),
                              r.tensor(vec), r.tensor(vec), r.tensor(vec), r.tensor(mat))
           for _ in range(L)]
    dec = [DecoderLayerParams(r.tensor(vec), r.tensor(vec), r.tensor(mat), r.tensor(vec),
                              r.tensor(vec), r.tensor(mat), r.tensor(mat), r.tensor(vec))
           for _ in range(L)]
    W_post = r.tensor((D, d))
    (flag,) = struct.unpack("<B", r.take(1))
    head = None
    if flag == 1:
        g, b = r.tensor(vec), r.tensor(vec)
        (count,) = struct.unpack("<Q", r.take(8))
        if count == 0 or count % d:
            raise FormatError("head weight size is not a multiple of d")
        W_head = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64).reshape(-1, d)
        head = HeadParams(g, b, W_head)
        cfg = replace(cfg, num_classes=W_head.shape[0])
    elif flag != 0:
        raise FormatError(f"bad head flag {flag}")
    if r.pos != len(r.data):
        raise FormatError("trailing bytes after checkpoint payload")
    return ModelParams(W_pre, E_pos, z_cls, enc, dec, W_post, head), cfg
