"""Dense-tensor numerics with reverse-mode automatic differentiation.

Define-by-run: every forward op records onto the active :class:`Graph`
(a flat tape, rebuilt per forward pass) and ``Graph.backward`` replays the
tape in exact reverse order, accumulating gradients on leaf tensors.
Arrays are contiguous row-major numpy buffers, float64 by default.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_ACTIVE: "Graph | None" = None
_CHECKED = True


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf while checked mode was on."""


class Tensor:
    """Contiguous row-major array, optionally participating in a graph.

    ``grad`` is populated (accumulated, ``+=``) by ``Graph.backward`` for
    tensors that enter the graph as leaves; callers zero it between steps.
    """

    __slots__ = ("data", "grad")

    def __init__(self, data, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype.kind == "f" else DEFAULT_DTYPE
        arr = np.asarray(arr, dtype=dtype)
        # ascontiguousarray would promote 0-d scalars to 1-d; keep rank
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


@dataclass
class Parameter:
    """Named trainable tensor; ``name`` is a dotted path unique per model."""

    tensor: Tensor
    name: str
    trainable: bool = True

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> np.ndarray | None:
        return self.tensor.grad


@dataclass
class _Record:
    op: str
    out: Tensor
    inputs: tuple
    backward: Callable


class Graph:
    """Append-only tape of op records, topologically ordered by construction."""

    def __init__(self):
        self._records: list[_Record] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Graph":
        global _ACTIVE
        if _ACTIVE is not None:
            raise RuntimeError("a Graph is already active")
        _ACTIVE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE
        _ACTIVE = None

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into every leaf tensor's ``grad``."""
        if loss.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
        if id(loss) not in self._produced:
            raise ValueError("loss tensor was not produced on this graph")
        flows: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self._records):
            gout = flows.pop(id(rec.out), None)
            if gout is None:
                continue
            grads = rec.backward(gout)
            for t, g in zip(rec.inputs, grads):
                if g is None or not isinstance(t, Tensor):
                    continue
                if id(t) in self._produced:
                    prev = flows.get(id(t))
                    flows[id(t)] = g if prev is None else prev + g
                else:
                    if t.grad is None:
                        t.grad = np.zeros_like(t.data)
                    t.grad += g


def record(op: str, out: Tensor, inputs: Sequence, backward: Callable) -> Tensor:
    """Register one op on the active graph (no-op when no graph is active).

    ``backward`` maps the output gradient to per-input gradients (None for
    inputs that take no gradient). Exposed so model modules can define
    fused ops with hand-written backward rules.
    """
    if _CHECKED and not np.all(np.isfinite(out.data)):
        raise NonFiniteError(f"op '{op}' produced non-finite values")
    g = _ACTIVE
    if g is not None:
        g._records.append(_Record(op, out, tuple(inputs), backward))
        g._produced.add(id(out))
    return out


class checked:
    """Context manager toggling the NaN/Inf forward check."""

    def __init__(self, enabled: bool):
        self.enabled = enabled

    def __enter__(self):
        global _CHECKED
        self._saved = _CHECKED
        _CHECKED = self.enabled

    def __exit__(self, *exc):
        global _CHECKED
        _CHECKED = self._saved


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


# ---------------------------------------------------------------------------
# forward ops


def add(a: Tensor, b) -> Tensor:
    """Elementwise sum; ``b`` may be a plain array treated as a constant."""
    bd = _as_array(b)
    if a.data.shape != bd.shape:
        raise ValueError(f"add shape mismatch: {a.data.shape} vs {bd.shape}")
    out = Tensor(a.data + bd)

    def backward(g):
        return g, g if isinstance(b, Tensor) else None

    return record("add", out, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(x.data * c)
    return record("scale", out, (x,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2 or ad.shape[1] != bd.shape[0]:
        raise ValueError(f"matmul shape mismatch: {ad.shape} @ {bd.shape}")
    out = Tensor(ad @ bd)

    def backward(g):
        return g @ bd.T, ad.T @ g

    return record("matmul", out, (a, b), backward)


def transpose2d(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ValueError(f"transpose2d needs a 2-d tensor, got shape {x.data.shape}")
    out = Tensor(np.ascontiguousarray(x.data.T))
    return record("transpose2d", out, (x,), lambda g: (np.ascontiguousarray(g.T),))


def reshape(x: Tensor, shape: tuple) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    orig = x.data.shape
    return record("reshape", out, (x,), lambda g: (g.reshape(orig),))


def linear(x: Tensor, w: Tensor, b: "Tensor | None") -> Tensor:
    """y = x @ w.T + b with ``w`` stored [out, in]; x is 1-d or [batch, in]."""
    xd, wd = x.data, w.data
    if wd.ndim != 2 or xd.shape[-1] != wd.shape[1]:
        raise ValueError(f"linear shape mismatch: x {xd.shape} vs W {wd.shape}")
    if b is not None and b.data.shape != (wd.shape[0],):
        raise ValueError(f"linear bias shape {b.data.shape} does not match W {wd.shape}")
    y = xd @ wd.T
    if b is not None:
        y = y + b.data
    out = Tensor(y)

    def backward(g):
        if xd.ndim == 1:
            dw = np.outer(g, xd)
            db = None if b is None else g.copy()
        else:
            dw = g.T @ xd
            db = None if b is None else g.sum(axis=0)
        return g @ wd, dw, db

    return record("linear", out, (x, w, b), backward)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))
    mask = x.data > 0.0
    return record("relu", out, (x,), lambda g: (g * mask,))


def softmax_lastdim(x: Tensor) -> Tensor:
    """Row-stable softmax along the last axis."""
    xd = x.data
    shifted = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def backward(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - inner),)

    return record("softmax", out, (x,), backward)


def dropout(x: Tensor, rate: float, mode: str, rng: "np.random.Generator | None" = None) -> Tensor:
    """Inverted dropout: kept units scaled by 1/(1-rate) so E[y] = x."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise ValueError(f"dropout mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or rate == 0.0:
        out = Tensor(x.data)
        return record("dropout", out, (x,), lambda g: (g,))
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = rng.random(x.data.shape) >= rate
    scale_ = 1.0 / (1.0 - rate)
    out = Tensor(x.data * keep * scale_)
    return record("dropout", out, (x,), lambda g: (g * keep * scale_,))


def conv1d_time(x: Tensor, kernel: Tensor, bias: "Tensor | None" = None) -> Tensor:
    """Same-padded cross-correlation along the time axis.

    x: [L, C_in], kernel: [k, C_in, C_out] with odd k.
    """
    xd, kd = x.data, kernel.data
    if xd.ndim != 2 or kd.ndim != 3 or xd.shape[1] != kd.shape[1]:
        raise ValueError(f"conv1d_time shape mismatch: x {xd.shape} vs kernel {kd.shape}")
    k = kd.shape[0]
    if k % 2 == 0:
        raise ValueError(f"conv1d_time kernel width must be odd, got {k}")
    if bias is not None and bias.data.shape != (kd.shape[2],):
        raise ValueError(f"conv1d_time bias shape {bias.data.shape} vs kernel {kd.shape}")
    big_l, c_in = xd.shape
    pad = (k - 1) // 2
    xp = np.zeros((big_l + k - 1, c_in), dtype=xd.dtype)
    xp[pad:pad + big_l] = xd
    y = np.zeros((big_l, kd.shape[2]), dtype=xd.dtype)
    for tau in range(k):
        y += xp[tau:tau + big_l] @ kd[tau]
    if bias is not None:
        y = y + bias.data
    out = Tensor(y)

    def backward(g):
        dk = np.zeros_like(kd)
        dxp = np.zeros_like(xp)
        for tau in range(k):
            dk[tau] = xp[tau:tau + big_l].T @ g
            dxp[tau:tau + big_l] += g @ kd[tau].T
        db = None if bias is None else g.sum(axis=0)
        return dxp[pad:pad + big_l], dk, db

    return record("conv1d_time", out, (x, kernel, bias), backward)


def mse_loss(pred: Tensor, target) -> Tensor:
    td = _as_array(target)
    if pred.data.shape != td.shape:
        raise ValueError(f"mse_loss shape mismatch: {pred.data.shape} vs {td.shape}")
    diff = pred.data - td
    n = diff.size
    out = Tensor(np.array(np.mean(diff * diff)))
    return record("mse_loss", out, (pred,), lambda g: (g * 2.0 * diff / n,))


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.array(x.data.sum()))
    shp = x.data.shape
    return record("sum_all", out, (x,), lambda g: (np.broadcast_to(g, shp).copy(),))


def mean_rows(x: Tensor) -> Tensor:
    """Mean over axis 0: [L, C] -> [C]."""
    n = x.data.shape[0]
    out = Tensor(x.data.mean(axis=0))
    return record("mean_rows", out, (x,), lambda g: (np.tile(g / n, (n, 1)),))


def broadcast_rows(v: Tensor, n: int) -> Tensor:
    """[C] -> [n, C] by repetition."""
    out = Tensor(np.tile(v.data, (n, 1)))
    return record("broadcast_rows", out, (v,), lambda g: (g.sum(axis=0),))


def cummean_rows(x: Tensor) -> Tensor:
    """Running mean along axis 0: out[t] = mean(x[:t+1])."""
    n = x.data.shape[0]
    counts = np.arange(1, n + 1, dtype=x.data.dtype)[:, None]
    out = Tensor(np.cumsum(x.data, axis=0) / counts)

    def backward(g):
        w = g / counts
        return (np.flip(np.cumsum(np.flip(w, axis=0), axis=0), axis=0),)

    return record("cummean_rows", out, (x,), backward)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)
    out = Tensor(x.data[idx])
    n = x.data.shape[0]

    def backward(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, idx, g)
        return (dx,)

    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ValueError(f"gather_rows index out of range for {n} rows")
    return record("gather_rows", out, (x,), backward)


def scatter_rows(base: Tensor, idx: np.ndarray, rows: Tensor) -> Tensor:
    """Copy of ``base`` with ``rows`` written at positions ``idx``."""
    idx = np.asarray(idx, dtype=np.intp)
    if rows.data.shape[0] != idx.shape[0]:
        raise ValueError(f"scatter_rows got {idx.shape[0]} indices for {rows.data.shape[0]} rows")
    yd = base.data.copy()
    yd[idx] = rows.data
    out = Tensor(yd)

    def backward(g):
        dbase = g.copy()
        dbase[idx] = 0.0
        return dbase, g[idx]

    return record("scatter_rows", out, (base, rows), backward)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    out = Tensor(x.data[start:stop])

    def backward(g):
        dx = np.zeros_like(x.data)
        dx[start:stop] = g
        return (dx,)

    return record("slice_rows", out, (x,), backward)


def concat_rows(parts: Sequence) -> Tensor:
    """Stack along axis 0; plain arrays are constants."""
    arrays = [_as_array(p) for p in parts]
    out = Tensor(np.concatenate(arrays, axis=0))
    sizes = [a.shape[0] for a in arrays]

    def backward(g):
        grads = []
        off = 0
        for p, n in zip(parts, sizes):
            grads.append(g[off:off + n] if isinstance(p, Tensor) else None)
            off += n
        return grads

    return record("concat_rows", out, tuple(parts), backward)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    arrays = [p.data for p in parts]
    out = Tensor(np.concatenate(arrays, axis=-1))
    sizes = [a.shape[-1] for a in arrays]

    def backward(g):
        grads = []
        off = 0
        for n in sizes:
            grads.append(np.ascontiguousarray(g[..., off:off + n]))
            off += n
        return grads

    return record("concat_cols", out, tuple(parts), backward)


def layernorm_lastdim(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize each row to zero mean, unit variance (no learned affine)."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (xd - mu) * inv
    out = Tensor(y)
    n = xd.shape[-1]

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gym),)

    return record("layernorm", out, (x,), backward)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
               floor: float = 1e-3) -> float:
    """Max relative error between autodiff and central finite differences.

    ``f`` must be deterministic (run dropout in eval mode) and return a
    scalar Tensor. The finite-difference side never touches the tape, so
    the two gradients are independent.
    """
    x.grad = None
    with Graph() as g:
        loss = f(x)
        g.backward(loss)
    ad = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)

    flat = x.data.reshape(-1)
    fd = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(x).data)
        flat[i] = orig - eps
        lo = float(f(x).data)
        flat[i] = orig
        fd[i] = (hi - lo) / (2.0 * eps)
    fd = fd.reshape(x.data.shape)

    denom = np.maximum(np.maximum(np.abs(ad), np.abs(fd)), floor)
    return float(np.max(np.abs(ad - fd) / denom))
