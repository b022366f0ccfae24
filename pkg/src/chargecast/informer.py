"""Temporal core: sparse multi-head attention encoder/decoder stack.

Queries are ranked by a max-minus-mean sparsity measurement over a sampled
key subset; only the top-u queries get exact softmax attention rows, the
rest fall back to the mean of V over their attendable positions (running
mean under a causal mask). With u and sample size at their maxima the
result coincides with exact attention, which the tests exploit as an
oracle. Residual connections wrap the attention and the conv pair in each
block; sequence length is never halved between blocks.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import ConvLayer, LinearLayer
from .tensor import Parameter, Tensor

NEG_INF_FILL = -1e30  # additive mask value; survives checked-mode NaN scans


def _check_qkv(q, k, v, mask):
    if q.data.ndim != 2 or k.data.ndim != 2 or v.data.ndim != 2:
        raise ValueError("attention expects 2-d Q, K, V")
    if q.data.shape[1] != k.data.shape[1]:
        raise ValueError(
            f"Q/K width mismatch: {q.data.shape} vs {k.data.shape}")
    if k.data.shape[0] != v.data.shape[0]:
        raise ValueError(
            f"K/V length mismatch: {k.data.shape} vs {v.data.shape}")
    if mask not in (None, "causal"):
        raise ValueError(f"mask must be None or 'causal', got {mask!r}")
    if mask == "causal" and q.data.shape[0] != k.data.shape[0]:
        raise ValueError("causal mask needs L_Q == L_K")


def _causal_fill(positions: np.ndarray, l_k: int) -> np.ndarray:
    """Additive mask rows for global query positions: 0 when j <= pos."""
    cols = np.arange(l_k)
    return np.where(cols[None, :] <= positions[:, None], 0.0, NEG_INF_FILL)


def _attention_rows(q: Tensor, k: Tensor, v: Tensor,
                    positions: np.ndarray | None) -> Tensor:
    """Exact softmax attention for the given query rows."""
    d_k = q.data.shape[1]
    logits = T.scale(T.matmul(q, T.transpose2d(k)), 1.0 / math.sqrt(d_k))
    if positions is not None:
        fill = _causal_fill(positions, k.data.shape[0]).astype(
            logits.data.dtype, copy=False)
        logits = T.add(logits, fill)
    return T.matmul(T.softmax_lastdim(logits), v)


def full_attention(q: Tensor, k: Tensor, v: Tensor, mask: str | None = None) -> Tensor:
    """softmax(Q K^T / sqrt(d_k)) V, optionally causal. The oracle path."""
    _check_qkv(q, k, v, mask)
    pos = np.arange(q.data.shape[0]) if mask == "causal" else None
    return _attention_rows(q, k, v, pos)


@dataclass
class SparsityScores:
    scores: np.ndarray  # [L_Q] max-minus-mean measurement
    selected: np.ndarray  # ascending indices of the u best queries
    sampled_keys: np.ndarray  # key subset the measurement used


def sparsity_scores(q, k, sample_size: int, u: int, mask: str | None = None,
                    rng: np.random.Generator | None = None) -> SparsityScores:
    """Rank queries by peakedness of their (sampled) key interactions.

    Ties break toward the lower index. Under a causal mask each query only
    sees the sampled keys in its own prefix; a query with none scores -inf.
    """
    qd = q.data if isinstance(q, Tensor) else np.asarray(q)
    kd = k.data if isinstance(k, Tensor) else np.asarray(k)
    l_q, d_k = qd.shape
    l_k = kd.shape[0]
    if not 1 <= u <= l_q:
        raise ValueError(f"u must be in [1, {l_q}], got {u}")
    if not 1 <= sample_size <= l_k:
        raise ValueError(f"sample_size must be in [1, {l_k}], got {sample_size}")
    if sample_size < l_k:
        if rng is None:
            raise ValueError("key sampling requires an rng")
        idx = np.sort(rng.choice(l_k, size=sample_size, replace=False))
    else:
        idx = np.arange(l_k)
    dots = qd @ kd[idx].T / math.sqrt(d_k)
    if mask == "causal":
        valid = idx[None, :] <= np.arange(l_q)[:, None]
        count = valid.sum(axis=1)
        peak = np.where(valid, dots, -np.inf).max(axis=1)
        mean = np.where(valid, dots, 0.0).sum(axis=1) / np.maximum(count, 1)
        scores = np.where(count > 0, peak - mean, -np.inf)
    else:
        scores = dots.max(axis=1) - dots.mean(axis=1)
    order = np.argsort(-scores, kind="stable")
    return SparsityScores(scores, np.sort(order[:u]), idx)


def probsparse_attention(q: Tensor, k: Tensor, v: Tensor, u: int,
                         sample_size: int, mask: str | None = None,
                         rng: np.random.Generator | None = None) -> Tensor:
    """Exact attention for the top-u queries, attendable-mean V for the rest."""
    _check_qkv(q, k, v, mask)
    l_q = q.data.shape[0]
    sel = sparsity_scores(q, k, sample_size, u, mask, rng).selected
    if mask == "causal":
        base = T.cummean_rows(v)
    else:
        base = T.broadcast_rows(T.mean_rows(v), l_q)
    if sel.size == l_q:
        rows = _attention_rows(q, k, v, sel if mask == "causal" else None)
        return rows
    q_sel = T.gather_rows(q, sel)
    rows = _attention_rows(q_sel, k, v, sel if mask == "causal" else None)
    return T.scatter_rows(base, sel, rows)


def attention_budget(length: int, factor: float) -> int:
    """u = sample = ceil(factor * ln L), clamped to [1, L]."""
    if length <= 1:
        return max(1, length)
    return min(length, max(1, math.ceil(factor * math.log(length))))


class MultiHeadAttention:
    """Per-head [d, d_k] projections, shared attention fn, output proj."""

    def __init__(self, name: str, d: int, n_heads: int, rng: np.random.Generator):
        if d % n_heads != 0:
            raise ValueError(f"model width {d} not divisible by {n_heads} heads")
        self.name = name
        self.d, self.n_heads = d, n_heads
        self.d_k = d // n_heads
        limit = math.sqrt(6.0 / (d + self.d_k))
        self.heads = []
        for h in range(n_heads):
            mk = lambda tag: Parameter(
                Tensor(rng.uniform(-limit, limit, size=(d, self.d_k))),
                f"{name}.head{h}.{tag}")
            self.heads.append({"W_Q": mk("W_Q"), "W_K": mk("W_K"), "W_V": mk("W_V")})
        self.out = LinearLayer(f"{name}.out", d, d, rng)

    def forward(self, x_q: Tensor, x_kv: Tensor, attn_fn) -> Tensor:
        outs = []
        for head in self.heads:
            hq = T.matmul(x_q, head["W_Q"].tensor)
            hk = T.matmul(x_kv, head["W_K"].tensor)
            hv = T.matmul(x_kv, head["W_V"].tensor)
            outs.append(attn_fn(hq, hk, hv))
        return self.out(T.concat_cols(outs))

    def params(self) -> list:
        out = []
        for head in self.heads:
            out.extend(head.values())
        out.extend(self.out.params())
        return out


@dataclass
class InformerConfig:
    d: int
    n_heads: int = 8
    r: int = 2
    d_ff: int | None = None  # defaults to 8*d, the 256 -> 2048 ratio
    factor: float = 5.0
    conv_kernel: int = 1

    def __post_init__(self):
        if self.d <= 0:
            raise ValueError("model width must be positive")
        if self.r < 1:
            raise ValueError("need at least one encoder/decoder block")
        if self.d % self.n_heads != 0:
            raise ValueError(
                f"model width {self.d} not divisible by {self.n_heads} heads")
        if self.d_ff is None:
            self.d_ff = 8 * self.d
        if self.conv_kernel % 2 == 0:
            raise ValueError("conv kernel must be odd for same padding")


class _ConvPair:
    def __init__(self, name: str, cfg: InformerConfig, rng):
        self.conv1 = ConvLayer(f"{name}.conv1", cfg.conv_kernel, cfg.d, cfg.d_ff, rng)
        self.conv2 = ConvLayer(f"{name}.conv2", cfg.conv_kernel, cfg.d_ff, cfg.d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv2(T.relu(self.conv1(x)))

    def params(self):
        return self.conv1.params() + self.conv2.params()


class EncoderBlock:
    def __init__(self, name: str, cfg: InformerConfig, rng):
        self.cfg = cfg
        self.attn = MultiHeadAttention(f"{name}.attn", cfg.d, cfg.n_heads, rng)
        self.ff = _ConvPair(name, cfg, rng)

    def forward(self, x: Tensor, rng=None) -> Tensor:
        length = x.data.shape[0]
        budget = attention_budget(length, self.cfg.factor)
        fn = lambda q, k, v: probsparse_attention(q, k, v, budget, budget,
                                                  None, rng)
        x = T.add(x, self.attn.forward(x, x, fn))
        return T.add(x, self.ff(x))

    def params(self):
        return self.attn.params() + self.ff.params()


class DecoderBlock:
    """Masked sparse self-attention, exact cross-attention, conv pair."""

    def __init__(self, name: str, cfg: InformerConfig, rng):
        self.cfg = cfg
        self.self_attn = MultiHeadAttention(f"{name}.self_attn", cfg.d,
                                            cfg.n_heads, rng)
        self.cross_attn = MultiHeadAttention(f"{name}.cross_attn", cfg.d,
                                             cfg.n_heads, rng)
        self.ff = _ConvPair(name, cfg, rng)

    def forward(self, x: Tensor, enc_out: Tensor, rng=None) -> Tensor:
        length = x.data.shape[0]
        budget = attention_budget(length, self.cfg.factor)
        self_fn = lambda q, k, v: probsparse_attention(q, k, v, budget, budget,
                                                       "causal", rng)
        x = T.add(x, self.self_attn.forward(x, x, self_fn))
        x = T.add(x, self.cross_attn.forward(x, enc_out, full_attention))
        return T.add(x, self.ff(x))

    def params(self):
        return (self.self_attn.params() + self.cross_attn.params()
                + self.ff.params())


class InformerCore:
    """r encoder blocks over the fused input, r decoder blocks over the
    token sequence; the output head downstream is the final projection."""

    def __init__(self, cfg: InformerConfig, rng: np.random.Generator,
                 name: str = "informer"):
        self.cfg = cfg
        self.encoders = [EncoderBlock(f"{name}.enc{i}", cfg, rng)
                         for i in range(cfg.r)]
        self.decoders = [DecoderBlock(f"{name}.dec{i}", cfg, rng)
                         for i in range(cfg.r)]

    def encoder_forward(self, x: Tensor, rng=None) -> Tensor:
        for blk in self.encoders:
            x = blk.forward(x, rng)
        return x

    def decoder_forward(self, token: Tensor, enc_out: Tensor, rng=None) -> Tensor:
        x = token
        for blk in self.decoders:
            x = blk.forward(x, enc_out, rng)
        return x

    def params(self) -> list:
        out = []
        for blk in self.encoders:
            out.extend(blk.params())
        for blk in self.decoders:
            out.extend(blk.params())
        return out


def sinusoidal_pe(n: int, d: int, offset: int = 0) -> np.ndarray:
    """Classic sin/cos position code for rows offset..offset+n-1."""
    pos = (offset + np.arange(n, dtype=np.float64))[:, None]
    i = np.arange(d, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * np.floor(i / 2.0) / d)
    pe = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return pe
