"""Masked-autoencoder training: masking, loss, gradients, AdamW and probing."""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.special import log_softmax

from ._parallel import indexed_map
from .errors import DegenerateLabels, DimensionError, MaskError
from .linalg import layer_norm, sub_rng
from .net import ModelConfig, ModelParams, init_parameters, model_backward, model_forward_cached

# Gradient buffers share the parameter container.
GradBuffer = ModelParams

# Samples per gradient chunk. Fixed so the summation order never depends on threads.
CHUNK = 8


# --- masking and loss -----------------------------------------------------

def masked_count(N: int, mu: float) -> int:
    """``round(mu N)`` with halves rounded up."""
    if not 0.0 <= mu <= 1.0:
        raise ValueError(f"mask fraction {mu} outside [0, 1]")
    return min(N, int(math.floor(mu * N + 0.5)))


@dataclass(frozen=True)
class MaskSpec:
    mu: float
    seed: int
    masked_indices: tuple[int, ...]

    @classmethod
    def draw(cls, N: int, mu: float, seed: int, *stream) -> "MaskSpec":
        """Uniformly random ``round(mu N)``-subset of the ``N`` image tokens."""
        rng = sub_rng(seed, *stream)
        idx = rng.choice(N, size=masked_count(N, mu), replace=False)
        return cls(mu, seed, tuple(sorted(int(i) for i in idx)))

    def as_bool(self, N: int) -> np.ndarray:
        if any(i < 0 or i >= N for i in self.masked_indices):
            raise MaskError(f"mask index outside [0, {N})")
        m = np.zeros(N, dtype=bool)
        m[list(self.masked_indices)] = True
        return m


def mask_tokens(X: np.ndarray, spec: MaskSpec) -> np.ndarray:
    """Copy of ``X`` with the masked image-token columns set to zero."""
    X = np.array(X, dtype=np.float64)
    X[..., spec.as_bool(X.shape[-1])] = 0.0
    return X


def mae_loss(X_hat: np.ndarray, X: np.ndarray, spec: MaskSpec) -> float:
    """Mean squared error over the entries of masked columns (0 if none)."""
    X_hat, X = np.asarray(X_hat, dtype=np.float64), np.asarray(X, dtype=np.float64)
    if X_hat.shape != X.shape or X.ndim != 2:
        raise DimensionError(f"shapes {X_hat.shape} and {X.shape} must match and be D x N")
    m = spec.as_bool(X.shape[1])
    if not m.any():
        return 0.0
    return float(np.mean((X_hat[:, m] - X[:, m]) ** 2))


def _chunk_loss_grad(X, masks, params, cfg):
    """Summed per-sample losses and gradients for a ``(B, D, N)`` chunk."""
    Xin = np.where(masks[:, None, :], 0.0, X)
    X_hat, cache = model_forward_cached(Xin, params, cfg)
    counts = masks.sum(axis=1) * X.shape[1]
    scale = np.where(counts > 0, 1.0 / np.maximum(counts, 1), 0.0)[:, None, None]
    diff = (X_hat - X) * masks[:, None, :]
    loss = float(np.sum(np.sum(diff ** 2, axis=(1, 2)) * scale[:, 0, 0]))
    return loss, model_backward(2.0 * scale * diff, cache, params, cfg)


def batch_loss_grad(X: np.ndarray, masks: np.ndarray, params: ModelParams, cfg: ModelConfig,
                    threads: int = 1) -> tuple[float, GradBuffer]:
    """Mean masked loss over a ``(B, D, N)`` batch and its gradient.

    ``masks`` is a ``(B, N)`` boolean array. Chunks are reduced in index order.
    """
    X = np.asarray(X, dtype=np.float64)
    masks = np.asarray(masks, dtype=bool)
    if X.ndim != 3 or masks.shape != (X.shape[0], X.shape[2]):
        raise DimensionError(f"batch {X.shape} and masks {masks.shape} disagree")
    B = X.shape[0]
    starts = range(0, B, CHUNK)
    parts = indexed_map(lambda i: _chunk_loss_grad(X[starts[i]:starts[i] + CHUNK],
                                                   masks[starts[i]:starts[i] + CHUNK],
                                                   params, cfg),
                        len(starts), threads)
    loss, grads = parts[0]
    for l, g in parts[1:]:
        loss += l
        for acc, t in zip(grads.tensors(), g.tensors()):
            acc += t
    for t in grads.tensors():
        t /= B
    return loss / B, grads


def backward(X: np.ndarray, spec: MaskSpec, params: ModelParams,
             cfg: ModelConfig) -> tuple[float, GradBuffer]:
    """Loss and exact gradient of ``mae_loss(model(mask(X)), X)`` for one sample."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise DimensionError("backward takes a single D x N sample")
    return batch_loss_grad(X[None], spec.as_bool(X.shape[1])[None], params, cfg)


def masked_loss(X: np.ndarray, masks: np.ndarray, params: ModelParams, cfg: ModelConfig,
                threads: int = 1) -> float:
    """Mean masked loss without gradients."""
    return batch_loss_grad(X, masks, params, cfg, threads)[0]


# --- gradient check -------------------------------------------------------

def _relu_pattern(cache, layers: int) -> list[np.ndarray]:
    """Sign pattern of every encoder ISTA pre-activation."""
    return [c[3][1] > 0 for c in cache[2][:layers]]


def gradient_check(X: np.ndarray, masks: np.ndarray, params: ModelParams, cfg: ModelConfig,
                   h: float = 1e-6) -> dict[str, float]:
    """Relative error of the analytic gradient against central differences.

    Per tensor: ``max |g - fd| / max |fd|`` over entries whose perturbation
    leaves every ReLU activation pattern unchanged (kinks excluded).
    """
    X = np.asarray(X, dtype=np.float64)
    masks = np.asarray(masks, dtype=bool)
    _, grads = batch_loss_grad(X, masks, params, cfg)
    Xin = np.where(masks[:, None, :], 0.0, X)

    def probe():
        _, cache = model_forward_cached(Xin, params, cfg)
        return masked_loss(X, masks, params, cfg), _relu_pattern(cache, len(params.enc))

    out = {}
    for (name, t), (_, g) in zip(params.named_tensors(), grads.named_tensors()):
        fd = np.zeros_like(t)
        keep = np.ones(t.shape, dtype=bool)
        for idx in np.ndindex(t.shape):
            old = t[idx]
            t[idx] = old + h
            lp, pp = probe()
            t[idx] = old - h
            lm, pm = probe()
            t[idx] = old
            fd[idx] = (lp - lm) / (2 * h)
            keep[idx] = all(np.array_equal(a, b) for a, b in zip(pp, pm))
        scale = np.max(np.abs(fd[keep])) if keep.any() else 0.0
        err = np.max(np.abs(g[keep] - fd[keep])) if keep.any() else 0.0
        out[name] = float(err / scale) if scale > 0 else float(err)
    return out


# --- optimizer ------------------------------------------------------------

@dataclass
class AdamState:
    m: ModelParams
    v: ModelParams
    lr: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0

    @classmethod
    def create(cls, params: ModelParams, lr: float, weight_decay: float = 0.0,
               **kw) -> "AdamState":
        return cls(params.zeros_like(), params.zeros_like(), lr, weight_decay, **kw)


def adamw_step(params: ModelParams, grads: GradBuffer,
               state: AdamState) -> tuple[ModelParams, AdamState]:
    """Bias-corrected Adam with decoupled weight decay; updates in place."""
    P, G, M, V = params.tensors(), grads.tensors(), state.m.tensors(), state.v.tensors()
    if len({len(P), len(G), len(M), len(V)}) != 1:
        raise DimensionError("params, grads and moments hold different tensor counts")
    for p, g, m, v in zip(P, G, M, V):
        if not p.shape == g.shape == m.shape == v.shape:
            raise DimensionError(f"shape mismatch {p.shape}, {g.shape}, {m.shape}, {v.shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1 - b1 ** state.t, 1 - b2 ** state.t
    for p, g, m, v in zip(P, G, M, V):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= state.lr * ((m / c1) / (np.sqrt(v / c2) + state.eps) + state.weight_decay * p)
    return params, state


# --- training loop --------------------------------------------------------

@dataclass
class TrainHyper:
    epochs: int = 20
    batch: int = 32
    lr: float = 1e-3
    wd: float = 0.0
    mu: float = 0.75
    seed: int = 0
    threads: int = 1


@dataclass
class TrainResult:
    params: ModelParams
    history: list[tuple[int, int, float]] = field(default_factory=list)

    def history_csv(self) -> str:
        buf = io.StringIO()
        buf.write("epoch,step,loss\n")
        for e, s, l in self.history:
            buf.write(f"{e},{s},{l!r}\n")
        return buf.getvalue()


_INIT, _SHUFFLE, _MASK = 21, 22, 23


def draw_masks(count: int, N: int, mu: float, seed: int, *stream) -> np.ndarray:
    """``(count, N)`` boolean masks, one independent subset per sample."""
    rng = sub_rng(seed, *stream)
    k = masked_count(N, mu)
    masks = np.zeros((count, N), dtype=bool)
    for i in range(count):
        masks[i, rng.choice(N, size=k, replace=False)] = True
    return masks


def train_loop(patches: np.ndarray, cfg: ModelConfig, hyper: TrainHyper,
               params: ModelParams | None = None) -> TrainResult:
    """Minibatch AdamW on the masked loss; one history row per step.

    Every epoch reshuffles the samples and draws fresh masks for each.
    """
    X = np.asarray(patches, dtype=np.float64)
    if X.ndim != 3 or X.shape[0] == 0:
        raise DimensionError("dataset must be a nonempty (n, D, N) array")
    if params is None:
        params = init_parameters(cfg, sub_rng(hyper.seed, _INIT))
    state = AdamState.create(params, hyper.lr, hyper.wd)
    n, N = X.shape[0], X.shape[2]
    result = TrainResult(params)
    step = 0
    for epoch in range(hyper.epochs):
        order = sub_rng(hyper.seed, _SHUFFLE, epoch).permutation(n)
        masks = draw_masks(n, N, hyper.mu, hyper.seed, _MASK, epoch)
        for start in range(0, n, hyper.batch):
            idx = order[start:start + hyper.batch]
            loss, grads = batch_loss_grad(X[idx], masks[idx], params, cfg, hyper.threads)
            adamw_step(params, grads, state)
            result.history.append((epoch, step, loss))
            step += 1
    return result


# --- linear probe ---------------------------------------------------------

def linear_probe(features: np.ndarray, labels: np.ndarray, classes: int, C: float = 1.0,
                 test_fraction: float = 0.2, seed: int = 0,
                 ln_eps: float = 1e-5) -> tuple[np.ndarray, float]:
    """Multinomial logistic regression on layer-normalized class-token features.

    Minimizes ``0.5 |W|^2 + C sum_i CE(W LN(z_i), y_i)`` on a seeded training
    split; returns ``W_head`` (``classes x d``) and held-out accuracy.
    """
    F = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if F.ndim != 2 or y.shape != (F.shape[0],):
        raise DimensionError("features must be (n, d) with one label per row")
    if classes < 2 or len(np.unique(y)) < 2:
        raise DegenerateLabels("probing needs at least two classes")
    if y.min() < 0 or y.max() >= classes:
        raise DimensionError("labels outside [0, classes)")
    n, d = F.shape
    Fn = layer_norm(F.T, np.ones(d), np.zeros(d), ln_eps).T
    perm = sub_rng(seed).permutation(n)
    n_test = int(round(test_fraction * n)) if n > 1 else 0
    test, fit = perm[:n_test], perm[n_test:]
    Y = np.eye(classes)[y[fit]]
    A = Fn[fit]

    def objective(w):
        W = w.reshape(classes, d)
        logp = log_softmax(A @ W.T, axis=1)
        P = np.exp(logp)
        f = 0.5 * w @ w - C * np.sum(Y * logp)
        g = W + C * (P - Y).T @ A
        return f, g.ravel()

    sol = minimize(objective, np.zeros(classes * d), jac=True, method="L-BFGS-B",
                   options={"maxiter": 1000})
    W = sol.x.reshape(classes, d)
    eval_idx = test if len(test) else fit
    acc = float(np.mean(np.argmax(Fn[eval_idx] @ W.T, axis=1) == y[eval_idx]))
    return W, acc
