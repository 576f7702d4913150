"""Attention-only causal transformer with scalar readout.

Each layer updates the residual stream as

    x_t <- x_t + sum_h  softmax_causal(s * q_h,t . K_h) V_h  W_O,h

with queries, keys and values linear in the incoming stream, and the
prediction is ``w . x_T + b`` on the final (query) token.  There is no MLP and
no normalization.  Forward and reverse passes are written out by hand in
float64; ``train.backward`` is the public entry to the gradient.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from ._validation import check_positive_int, check_tokens
from .numerics import masked_row_softmax

PARAM_NAMES = ("W_Q", "W_K", "W_V", "W_O", "w_out", "b_out")


@dataclass(frozen=True)
class ArchConfig:
    token_dim: int
    n_layers: int = 2
    n_heads: int = 8
    head_dim: int | None = None
    scale_attention: bool = False
    max_len: int | None = None

    def __post_init__(self):
        check_positive_int(self.token_dim, "token_dim")
        check_positive_int(self.n_layers, "n_layers")
        check_positive_int(self.n_heads, "n_heads")
        if self.head_dim is None:
            object.__setattr__(self, "head_dim", max(1, self.token_dim // self.n_heads))
        check_positive_int(self.head_dim, "head_dim")

    @property
    def attn_scale(self) -> float:
        return 1.0 / np.sqrt(self.head_dim) if self.scale_attention else 1.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ModelParams:
    """Per-layer, per-head projections stacked as (n_layers, n_heads, ...) arrays."""

    W_Q: np.ndarray  # (L, H, d, dh)
    W_K: np.ndarray  # (L, H, d, dh)
    W_V: np.ndarray  # (L, H, d, dh)
    W_O: np.ndarray  # (L, H, dh, d)
    w_out: np.ndarray  # (d,)
    b_out: np.ndarray = field(default_factory=lambda: np.zeros(()))

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, n) for n in PARAM_NAMES]

    def copy(self) -> "ModelParams":
        return ModelParams(*(np.array(a, copy=True) for a in self.arrays()))

    def flatten(self) -> np.ndarray:
        return np.concatenate([np.ravel(a) for a in self.arrays()])

    @classmethod
    def unflatten(cls, flat: np.ndarray, like: "ModelParams") -> "ModelParams":
        out, k = [], 0
        for a in like.arrays():
            out.append(np.array(flat[k : k + a.size]).reshape(a.shape))
            k += a.size
        return cls(*out)

    def map(self, fn, *others: "ModelParams") -> "ModelParams":
        return ModelParams(*(fn(*xs) for xs in zip(self.arrays(), *(o.arrays() for o in others))))

    def equal(self, other: "ModelParams") -> bool:
        return all(np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))

    @property
    def n_layers(self) -> int:
        return self.W_Q.shape[0]

    @property
    def n_heads(self) -> int:
        return self.W_Q.shape[1]

    @property
    def token_dim(self) -> int:
        return self.W_Q.shape[2]


def init_params(cfg: ArchConfig, rng: np.random.Generator) -> ModelParams:
    """Fan-in uniform init U(-1/sqrt(fan_in), 1/sqrt(fan_in)); zero readout bias."""
    L, H, d, dh = cfg.n_layers, cfg.n_heads, cfg.token_dim, cfg.head_dim

    def u(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    return ModelParams(
        W_Q=u((L, H, d, dh), d),
        W_K=u((L, H, d, dh), d),
        W_V=u((L, H, d, dh), d),
        W_O=u((L, H, dh, d), dh),
        w_out=u((d,), d),
        b_out=np.zeros(()),
    )


def ablation_mask(ablation, n_layers: int, n_heads: int) -> np.ndarray:
    """Convert an ablation spec to a (L, H) 0/1 mask.

    ``ablation`` may be None, an iterable of ``(layer, head)`` pairs, or a
    ready-made boolean/0-1 array where 1 means *keep*.
    """
    mask = np.ones((n_layers, n_heads))
    if ablation is None:
        return mask
    if isinstance(ablation, np.ndarray):
        if ablation.shape != (n_layers, n_heads):
            raise ValueError(f"ablation mask must have shape {(n_layers, n_heads)}")
        return ablation.astype(np.float64)
    for layer, head in ablation:
        if not (0 <= layer < n_layers and 0 <= head < n_heads):
            raise IndexError(f"head ({layer}, {head}) is outside {n_layers} layers x {n_heads} heads")
        mask[layer, head] = 0.0
    return mask


def keep_only(layer: int, heads, n_layers: int, n_heads: int) -> set[tuple[int, int]]:
    """Ablation set that removes every head of ``layer`` except ``heads``."""
    heads = set(heads)
    for h in heads:
        if not 0 <= h < n_heads:
            raise IndexError(f"head {h} out of range for {n_heads} heads")
    return {(layer, h) for h in range(n_heads) if h not in heads}


@dataclass
class AttentionTrace:
    """Attention weights (L, B, H, T, T) and residual stream after each layer (L, B, T, d)."""

    attention: np.ndarray
    residuals: np.ndarray

    def for_sequence(self, b: int) -> "AttentionTrace":
        return AttentionTrace(self.attention[:, b], self.residuals[:, b])


def _fused(params: ModelParams, layer: int) -> tuple[np.ndarray, np.ndarray]:
    """Head-concatenated (d, 3*H*dh) input and (H*dh, d) output projections."""
    L, H, d, dh = params.W_Q.shape
    w_in = np.concatenate(
        [w[layer].transpose(1, 0, 2).reshape(d, H * dh) for w in (params.W_Q, params.W_K, params.W_V)],
        axis=1,
    )
    return w_in, params.W_O[layer].reshape(H * dh, d)


def _split_heads(a: np.ndarray, B: int, T: int, H: int) -> np.ndarray:
    return a.reshape(B, T, H, -1).transpose(0, 2, 1, 3)


def _rowdot(a: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``a @ w`` for a (B, k) operand, evaluated row by row.

    BLAS switches to gemv when B == 1, which rounds differently from gemm; an
    elementwise product reduced along a contiguous axis gives the same bits
    for a row whatever the batch size.
    """
    return (a[:, None, :] * np.ascontiguousarray(w.T)[None]).sum(axis=-1)


def _forward(params: ModelParams, X: np.ndarray, mask: np.ndarray, scale: float,
             keep: bool = False, full: bool = False):
    """Shared forward pass.

    Hidden layers run on every token.  The last layer only feeds the readout
    through the query (final) token, so by default only that row is computed;
    ``full=True`` also fills in the other rows of the last layer for traces.
    Returns ``(pred, residual_after_last_layer, cache)``.
    """
    B, T, d = X.shape
    L, H, _, dh = params.W_Q.shape
    hd = H * dh
    cache = []
    x = X
    for layer in range(L):
        w_in, w_o = _fused(params, layer)
        m = mask[layer][None, :, None, None]
        x2 = x.reshape(B * T, d)
        if layer < L - 1 or full:
            qkv = x2 @ w_in
            Q = _split_heads(qkv[:, :hd], B, T, H)
            K = _split_heads(qkv[:, hd : 2 * hd], B, T, H)
            V = _split_heads(qkv[:, 2 * hd :], B, T, H)
        else:
            kv = x2 @ w_in[:, hd:]
            K = _split_heads(kv[:, :hd], B, T, H)
            V = _split_heads(kv[:, hd:], B, T, H)
        if layer < L - 1:
            A = masked_row_softmax((Q @ K.swapaxes(-1, -2)) * scale)
            Z = (A @ V) * m
            z2 = Z.transpose(0, 2, 1, 3).reshape(B * T, hd)
            out = x + (z2 @ w_o).reshape(B, T, d)
            cache.append(dict(x2=x2, w_in=w_in, w_o=w_o, Q=Q, K=K, V=V, A=A, z2=z2, out=out))
            x = out
            continue
        q = _rowdot(x[:, -1], w_in[:, :hd]).reshape(B, H, 1, dh)
        s = (q @ K.swapaxes(-1, -2)) * scale
        s = s - s.max(axis=-1, keepdims=True)
        e = np.exp(s)
        a = e / e.sum(axis=-1, keepdims=True)
        z = ((a @ V) * m).reshape(B, hd)
        last = x[:, -1] + _rowdot(z, w_o)
        entry = dict(x2=x2, w_in=w_in, w_o=w_o, q=q, K=K, V=V, a=a, z=z, x_last=x[:, -1])
        if full:
            A = masked_row_softmax((Q @ K.swapaxes(-1, -2)) * scale)
            A[:, :, -1, :] = a[:, :, 0, :]
            z2 = ((A @ V) * m).transpose(0, 2, 1, 3).reshape(B * T, hd)
            out = x + (z2 @ w_o).reshape(B, T, d)
            out[:, -1] = last
            entry.update(A=A, out=out)
        else:
            out = None
        cache.append(entry)
        x_last = last
    pred = (x_last * params.w_out).sum(axis=-1) + params.b_out
    return pred, x_last, cache


def batched_forward(params: ModelParams, X, ablation=None, scale: float | None = None,
                    return_trace: bool = False):
    """Predictions for a batch (n, T, d); optionally an :class:`AttentionTrace`.

    ``scale`` multiplies the attention logits (1.0 for the unscaled rule).
    Each sequence's prediction is bit-identical to a single-sequence call.
    """
    X = check_tokens(X, params.token_dim)
    mask = ablation_mask(ablation, params.n_layers, params.n_heads)
    s = 1.0 if scale is None else scale
    pred, _, cache = _forward(params, X, mask, s, full=return_trace)
    if not return_trace:
        return pred
    trace = AttentionTrace(np.stack([c["A"] for c in cache]), np.stack([c["out"] for c in cache]))
    return pred, trace


def forward(params: ModelParams, tokens, ablation=None, scale: float | None = None):
    """Single-sequence forward pass returning ``(prediction, trace)``."""
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2:
        raise ValueError("forward takes one (T, d) token matrix")
    pred, trace = batched_forward(params, tokens[None], ablation, scale, return_trace=True)
    return float(pred[0]), trace.for_sequence(0)


def final_residual(params: ModelParams, X, ablation=None, scale: float | None = None) -> np.ndarray:
    """Final-layer residual stream of the last token, shape (n, d)."""
    X = check_tokens(X, params.token_dim)
    mask = ablation_mask(ablation, params.n_layers, params.n_heads)
    _, x_last, _ = _forward(params, X, mask, 1.0 if scale is None else scale)
    return x_last


def _softmax_back(A: np.ndarray, dA: np.ndarray, scale: float) -> np.ndarray:
    return A * (dA - np.sum(dA * A, axis=-1, keepdims=True)) * scale


def loss_and_grad(params: ModelParams, X, y, ablation=None, scale: float = 1.0,
                  loss_weight: float = 1.0) -> tuple[float, ModelParams]:
    """Mean-squared error on the query prediction and its exact gradient."""
    mask = ablation_mask(ablation, params.n_layers, params.n_heads)
    pred, x_last, cache = _forward(params, X, mask, scale)
    B, T, d = X.shape
    L, H, _, dh = params.W_Q.shape
    hd = H * dh
    err = pred - y
    loss = loss_weight * float(np.mean(err * err))
    dpred = loss_weight * 2.0 * err / B

    g_wout = dpred @ x_last
    g_bout = np.asarray(dpred.sum())
    gQ, gK, gV, gO = (np.zeros_like(a) for a in (params.W_Q, params.W_K, params.W_V, params.W_O))

    # last layer: only the query row carries gradient
    c = cache[-1]
    m = mask[-1][None, :, None, None]
    d_last = dpred[:, None] * params.w_out  # (B, d)
    gO[-1] = (c["z"].T @ d_last).reshape(H, dh, d)
    dz = (d_last @ c["w_o"].T).reshape(B, H, 1, dh) * m
    da = dz @ c["V"].swapaxes(-1, -2)  # (B, H, 1, T)
    dV = c["a"].swapaxes(-1, -2) @ dz  # (B, H, T, dh)
    ds = _softmax_back(c["a"], da, scale)
    dq = (ds @ c["K"]).reshape(B, hd)
    dK = ds.swapaxes(-1, -2) @ c["q"]
    dkv = np.concatenate([g.transpose(0, 2, 1, 3).reshape(B * T, hd) for g in (dK, dV)], axis=1)
    g_q = c["x_last"].T @ dq
    g_kv = c["x2"].T @ dkv
    gQ[-1] = g_q.reshape(d, H, dh).transpose(1, 0, 2)
    gK[-1] = g_kv[:, :hd].reshape(d, H, dh).transpose(1, 0, 2)
    gV[-1] = g_kv[:, hd:].reshape(d, H, dh).transpose(1, 0, 2)
    dx = (dkv @ c["w_in"][:, hd:].T).reshape(B, T, d)
    dx[:, -1] += d_last + dq @ c["w_in"][:, :hd].T

    for layer in reversed(range(L - 1)):
        c = cache[layer]
        m = mask[layer][None, :, None, None]
        dout = dx.reshape(B * T, d)
        gO[layer] = (c["z2"].T @ dout).reshape(H, dh, d)
        dZ = _split_heads(dout @ c["w_o"].T, B, T, H) * m
        dA = dZ @ c["V"].swapaxes(-1, -2)
        dV = c["A"].swapaxes(-1, -2) @ dZ
        dS = _softmax_back(c["A"], dA, scale)
        dQ = dS @ c["K"]
        dK = dS.swapaxes(-1, -2) @ c["Q"]
        dqkv = np.concatenate([g.transpose(0, 2, 1, 3).reshape(B * T, hd) for g in (dQ, dK, dV)], axis=1)
        g_in = c["x2"].T @ dqkv
        for k, g in enumerate((gQ, gK, gV)):
            g[layer] = g_in[:, k * hd : (k + 1) * hd].reshape(d, H, dh).transpose(1, 0, 2)
        dx = dx + (dqkv @ c["w_in"].T).reshape(B, T, d)
    return loss, ModelParams(gQ, gK, gV, gO, g_wout, g_bout)


def classify(prediction):
    """Sign with the tie-break sign(0) = +1; works on scalars and arrays."""
    out = np.where(np.asarray(prediction) >= 0, 1, -1)
    return int(out) if out.ndim == 0 else out
