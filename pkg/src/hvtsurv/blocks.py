"""Attention building blocks.

* piecewise bucketing of Manhattan distances into a small index range,
* a learnable relative-position bias table indexed by those buckets,
* windowed multi-head self-attention (pre-norm, residual, gelu MLP),
* a deterministic stride shuffle that mixes rows across windows,
* gated attention pooling of a variable-length feature set.

Forward functions optionally return a state object which the matching
``*_backward`` consumes; parameter gradients come back as dicts keyed
like the parameter dataclass fields.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .errors import ShapeError, ValidationError
from .numerics import (
    gelu,
    gelu_backward,
    layer_norm,
    layer_norm_backward,
    linear,
    linear_backward,
    softmax_rows,
    softmax_rows_backward,
    tanh,
    tanh_backward,
)


@dataclass
class BucketParams:
    """Hyperparameters of the piecewise distance-to-bucket map."""

    alpha: float = 1.9
    beta: float = 7.6
    gamma: float = 11.4
    lam: int = 7

    def __post_init__(self):
        if not 0 < self.alpha < self.beta:
            raise ValidationError(f"need 0 < alpha < beta, got {self.alpha}, {self.beta}")
        if self.gamma <= self.alpha:
            raise ValidationError(f"need gamma > alpha, got {self.gamma} <= {self.alpha}")
        if self.lam < 1:
            raise ValidationError(f"need lam >= 1, got {self.lam}")
        if int(np.floor(self.alpha + 0.5)) > self.lam:
            raise ValidationError("round(alpha) must not exceed lam or buckets overflow")

    @property
    def table_rows(self) -> int:
        return 2 * self.lam + 1


def bucket_distances(x, p: BucketParams) -> np.ndarray:
    """Vectorized bucket map; even in x, non-decreasing in |x|, capped at lam.

    Distances up to alpha keep their rounded value; beyond that the bucket
    grows logarithmically. Rounding is half-away-from-zero.
    """
    ax = np.abs(np.asarray(x, dtype=np.float64))
    near = np.floor(ax + 0.5)
    safe = np.maximum(ax, 1e-300)
    inner = p.alpha + np.log(safe / p.alpha) / np.log(p.gamma / p.alpha) * (p.beta - 2 * p.alpha)
    far = np.minimum(float(p.lam), np.floor(inner + 0.5))
    return np.where(ax <= p.alpha, near, far).astype(np.int64)


def bucket_distance(x: float, p: BucketParams) -> int:
    return int(bucket_distances(np.asarray(x), p))


@dataclass
class RelPosBiasTable:
    """Learnable (2*lam+1, n_heads) bias table addressed by bucket index."""

    table: np.ndarray

    @classmethod
    def init(cls, p: BucketParams, n_heads: int, rng: np.random.Generator):
        return cls(table=rng.normal(scale=0.02, size=(p.table_rows, n_heads)))


def manhattan_bucket_index(coords: np.ndarray, p: BucketParams) -> np.ndarray:
    """(w, w) bucket indices of pairwise Manhattan distances on the grid."""
    c = np.asarray(coords, dtype=np.int64)
    m = np.abs(c[:, None, 0] - c[None, :, 0]) + np.abs(c[:, None, 1] - c[None, :, 1])
    return bucket_distances(m, p)


def manhattan_bias(coords: np.ndarray, table: RelPosBiasTable, p: BucketParams) -> np.ndarray:
    """Per-head (n_heads, w, w) additive bias for one window's coordinates."""
    idx = manhattan_bucket_index(coords, p)
    return table.table[idx].transpose(2, 0, 1)


def manhattan_bias_backward(gbias: np.ndarray, idx: np.ndarray, table_shape) -> np.ndarray:
    """Scatter per-head bias gradients back onto the table rows."""
    g = np.zeros(table_shape)
    heads = gbias.shape[0]
    for h in range(heads):
        np.add.at(g[:, h], idx.reshape(-1), gbias[h].reshape(-1))
    return g


@dataclass
class WindowBlockParams:
    """Weights of one pre-norm attention block (shared across windows)."""

    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray
    ffn_w1: np.ndarray
    ffn_b1: np.ndarray
    ffn_w2: np.ndarray
    ffn_b2: np.ndarray
    n_heads: int

    @classmethod
    def init(cls, dim: int, n_heads: int, rng: np.random.Generator, ffn_ratio: int = 4):
        if dim % n_heads:
            raise ValidationError(f"dim {dim} not divisible by {n_heads} heads")
        hidden = ffn_ratio * dim
        w = lambda *s: rng.normal(scale=0.02, size=s)
        return cls(
            ln1_gamma=np.ones(dim), ln1_beta=np.zeros(dim),
            wq=w(dim, dim), wk=w(dim, dim), wv=w(dim, dim), wo=w(dim, dim),
            ln2_gamma=np.ones(dim), ln2_beta=np.zeros(dim),
            ffn_w1=w(dim, hidden), ffn_b1=np.zeros(hidden),
            ffn_w2=w(hidden, dim), ffn_b2=np.zeros(dim),
            n_heads=n_heads,
        )

    def array_fields(self) -> list[str]:
        return [f.name for f in fields(self) if f.name != "n_heads"]

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {name: np.zeros_like(getattr(self, name)) for name in self.array_fields()}


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    w, d = x.shape
    return x.reshape(w, n_heads, d // n_heads).transpose(1, 0, 2)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    h, w, dh = x.shape
    return x.transpose(1, 0, 2).reshape(w, h * dh)


def local_window_attention(x: np.ndarray, params: WindowBlockParams, bias=None,
                           return_state: bool = False):
    """One window through the attention block.

    Per head the attention is softmax((Q K^T + B) / sqrt(d_head)) with B
    the per-head additive bias (omitted when ``bias`` is None), followed
    by the output projection, residual, and the pre-norm gelu MLP.
    """
    w, d = x.shape
    if d % params.n_heads:
        raise ShapeError(f"dim {d} not divisible by {params.n_heads} heads")
    if bias is not None and bias.shape != (params.n_heads, w, w):
        raise ShapeError(f"bias shape {bias.shape}, expected {(params.n_heads, w, w)}")
    d_head = d // params.n_heads
    scale = 1.0 / np.sqrt(d_head)

    u, ln1_state = layer_norm(x, params.ln1_gamma, params.ln1_beta)
    qh = _split_heads(u @ params.wq, params.n_heads)
    kh = _split_heads(u @ params.wk, params.n_heads)
    vh = _split_heads(u @ params.wv, params.n_heads)
    scores = qh @ kh.transpose(0, 2, 1)
    if bias is not None:
        scores = scores + bias
    attn = softmax_rows(scores * scale)
    ctx = _merge_heads(attn @ vh)
    y = x + ctx @ params.wo

    u2, ln2_state = layer_norm(y, params.ln2_gamma, params.ln2_beta)
    h1 = linear(u2, params.ffn_w1, params.ffn_b1)
    a1 = gelu(h1)
    out = y + linear(a1, params.ffn_w2, params.ffn_b2)

    if not return_state:
        return out
    state = dict(
        u=u, ln1_state=ln1_state, qh=qh, kh=kh, vh=vh, attn=attn, ctx=ctx,
        ln2_state=ln2_state, u2=u2, h1=h1, a1=a1, scale=scale, has_bias=bias is not None,
    )
    return out, state


def local_window_attention_backward(grad: np.ndarray, state: dict,
                                    params: WindowBlockParams):
    """Gradients of one window block: returns (gx, param grads, bias grad)."""
    gy = grad.copy()
    ga1, g_ffn_w2, g_ffn_b2 = linear_backward(grad, state["a1"], params.ffn_w2)
    gh1 = gelu_backward(ga1, state["h1"])
    gu2, g_ffn_w1, g_ffn_b1 = linear_backward(gh1, state["u2"], params.ffn_w1)
    gy_ln, g_ln2_gamma, g_ln2_beta = layer_norm_backward(gu2, state["ln2_state"],
                                                         params.ln2_gamma)
    gy += gy_ln

    gctx = gy @ params.wo.T
    g_wo = state["ctx"].T @ gy
    gctx_h = _split_heads(gctx, params.n_heads)
    g_attn = gctx_h @ state["vh"].transpose(0, 2, 1)
    g_vh = state["attn"].transpose(0, 2, 1) @ gctx_h
    g_scaled = softmax_rows_backward(g_attn, state["attn"])
    g_scores = g_scaled * state["scale"]
    g_bias = g_scores if state["has_bias"] else None
    g_qh = g_scores @ state["kh"]
    g_kh = g_scores.transpose(0, 2, 1) @ state["qh"]

    gq, gk, gv = _merge_heads(g_qh), _merge_heads(g_kh), _merge_heads(g_vh)
    u = state["u"]
    gu = gq @ params.wq.T + gk @ params.wk.T + gv @ params.wv.T
    g_wq, g_wk, g_wv = u.T @ gq, u.T @ gk, u.T @ gv
    gx_ln, g_ln1_gamma, g_ln1_beta = layer_norm_backward(gu, state["ln1_state"],
                                                         params.ln1_gamma)
    gx = gy + gx_ln

    grads = dict(
        ln1_gamma=g_ln1_gamma, ln1_beta=g_ln1_beta,
        wq=g_wq, wk=g_wk, wv=g_wv, wo=g_wo,
        ln2_gamma=g_ln2_gamma, ln2_beta=g_ln2_beta,
        ffn_w1=g_ffn_w1, ffn_b1=g_ffn_b1, ffn_w2=g_ffn_w2, ffn_b2=g_ffn_b2,
    )
    return gx, grads, g_bias


def spatial_shuffle(length: int, w: int) -> np.ndarray:
    """Deterministic stride-shuffle permutation.

    Viewing the sequence as an (length/w, w) grid in row-major order, the
    permutation reads it out column-major, so when length = w**2 every new
    window holds exactly one element of each old window.
    """
    if length % w:
        raise ShapeError(f"window size {w} does not divide length {length}")
    return np.arange(length).reshape(length // w, w).T.ravel()


def inverse_permutation(perm: np.ndarray) -> np.ndarray:
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    return inv


def shuffle_window_attention(x: np.ndarray, params: WindowBlockParams, w: int,
                             return_state: bool = False):
    """Stride-shuffle the rows, run bias-free window attention, restore order."""
    length = x.shape[0]
    perm = spatial_shuffle(length, w)
    inv = inverse_permutation(perm)
    xs = x[perm]
    out_s = np.empty_like(xs)
    states = []
    for k in range(length // w):
        sl = slice(k * w, (k + 1) * w)
        if return_state:
            out_s[sl], st = local_window_attention(xs[sl], params, None, return_state=True)
            states.append(st)
        else:
            out_s[sl] = local_window_attention(xs[sl], params, None)
    out = out_s[inv]
    if not return_state:
        return out
    return out, dict(perm=perm, inv=inv, states=states, w=w)


def shuffle_window_attention_backward(grad: np.ndarray, state: dict,
                                      params: WindowBlockParams):
    """Gradients through the shuffled window pass: (gx, summed param grads)."""
    perm, inv, w = state["perm"], state["inv"], state["w"]
    g_out_s = np.empty_like(grad)
    g_out_s[inv] = grad
    gxs = np.empty_like(grad)
    total = params.zero_grads()
    for k, st in enumerate(state["states"]):
        sl = slice(k * w, (k + 1) * w)
        gxs[sl], grads, _ = local_window_attention_backward(g_out_s[sl], st, params)
        for name, g in grads.items():
            total[name] += g
    gx = np.empty_like(grad)
    gx[perm] = gxs
    return gx, total


@dataclass
class AttnPoolParams:
    """Gated pooling weights: U scores the tanh(V h) gate per row."""

    U: np.ndarray
    V: np.ndarray

    @classmethod
    def init(cls, dim: int, hidden: int, rng: np.random.Generator):
        return cls(U=rng.normal(scale=0.02, size=(1, hidden)),
                   V=rng.normal(scale=0.02, size=(hidden, dim)))

    def array_fields(self) -> list[str]:
        return ["U", "V"]


def attn_pool(h: np.ndarray, params: AttnPoolParams, return_state: bool = False):
    """Softmax-weighted sum of rows; returns (pooled (d,), weights (G,))."""
    if h.ndim != 2 or h.shape[0] < 1:
        raise ShapeError(f"attn_pool expects (G, d) with G >= 1, got {h.shape}")
    t = tanh(h @ params.V.T)
    scores = (t @ params.U.T).ravel()
    weights = softmax_rows(scores[None, :])[0]
    pooled = weights @ h
    if not return_state:
        return pooled, weights
    return pooled, weights, dict(t=t, weights=weights, h=h)


def attn_pool_backward(g_pooled: np.ndarray, state: dict, params: AttnPoolParams):
    """Gradients of pooled output w.r.t. rows and pooling weights."""
    t, weights, h = state["t"], state["weights"], state["h"]
    g_weights = h @ g_pooled
    gh = np.outer(weights, g_pooled)
    g_scores = softmax_rows_backward(g_weights[None, :], weights[None, :])[0]
    g_U = (g_scores[:, None] * t).sum(axis=0, keepdims=True)
    g_t = np.outer(g_scores, params.U[0])
    g_pre = tanh_backward(g_t, t)
    g_V = g_pre.T @ h
    gh += g_pre @ params.V
    return gh, dict(U=g_U, V=g_V)
