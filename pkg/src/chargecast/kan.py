"""Spline-edge output head: each edge carries a learnable B-spline function
plus a linear base term, nodes sum incoming edges.

Grids are uniform over [-3, 3] (inputs arrive standardized) with knots
extended k intervals beyond each end, so all G + k basis functions of
degree k are complete inside the range. Out-of-range inputs are clamped
for the spline term (counted in ``clamp_count``); the linear base term
always sees the raw input, which keeps edge functions continuous and
gradients alive everywhere.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import xavier_uniform
from .tensor import Parameter, Tensor, record


@dataclass
class SplineGrid:
    """Uniformly spaced strictly increasing knots, G interior intervals."""

    G: int = 8
    k: int = 3
    g_min: float = -3.0
    g_max: float = 3.0
    knots: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.G < 1:
            raise ValueError("grid needs at least one interior interval")
        if self.k < 0:
            raise ValueError("spline degree must be >= 0")
        if not self.g_min < self.g_max:
            raise ValueError("grid range is empty")
        h = (self.g_max - self.g_min) / self.G
        self.knots = self.g_min + h * np.arange(-self.k, self.G + self.k + 1,
                                                dtype=np.float64)

    @property
    def spacing(self) -> float:
        return (self.g_max - self.g_min) / self.G

    @property
    def n_basis(self) -> int:
        return self.G + self.k


def _intervals(x: np.ndarray, grid: SplineGrid) -> np.ndarray:
    """Knot-span index per point; x == g_max folds into the last interval."""
    raw = np.floor((x - grid.g_min) / grid.spacing).astype(np.intp)
    return grid.k + np.clip(raw, 0, grid.G - 1)


def _local_basis(x: np.ndarray, grid: SplineGrid, degree: int):
    """Nonzero basis values [N, degree+1] at each point's span (Cox-de Boor)."""
    t = grid.knots
    i = _intervals(x, grid)
    n = x.shape[0]
    vals = np.zeros((n, degree + 1))
    vals[:, 0] = 1.0
    left = np.zeros((n, degree + 1))
    right = np.zeros((n, degree + 1))
    for j in range(1, degree + 1):
        left[:, j] = x - t[i + 1 - j]
        right[:, j] = t[i + j] - x
        saved = np.zeros(n)
        for r in range(j):
            tmp = vals[:, r] / (right[:, r + 1] + left[:, j - r])
            vals[:, r] = saved + right[:, r + 1] * tmp
            saved = left[:, j - r] * tmp
        vals[:, j] = saved
    return i, vals


def _scatter(i: np.ndarray, vals: np.ndarray, degree: int, width: int) -> np.ndarray:
    n = vals.shape[0]
    out = np.zeros((n, width))
    cols = i[:, None] - degree + np.arange(degree + 1)
    out[np.arange(n)[:, None], cols] = vals
    return out


def basis_matrix(x: np.ndarray, grid: SplineGrid) -> np.ndarray:
    """[N, G + k] degree-k basis values; x is clamped to the grid range."""
    xc = np.clip(np.asarray(x, dtype=np.float64).reshape(-1),
                 grid.g_min, grid.g_max)
    i, vals = _local_basis(xc, grid, grid.k)
    return _scatter(i, vals, grid.k, grid.n_basis)


def basis_deriv_matrix(x: np.ndarray, grid: SplineGrid) -> np.ndarray:
    """d/dx of each degree-k basis function, via the degree-(k-1) identity."""
    if grid.k == 0:
        return np.zeros((np.asarray(x).size, grid.n_basis))
    xc = np.clip(np.asarray(x, dtype=np.float64).reshape(-1),
                 grid.g_min, grid.g_max)
    i, vals = _local_basis(xc, grid, grid.k - 1)
    lower = _scatter(i, vals, grid.k - 1, grid.n_basis + 1)
    # uniform knots: t[m+k] - t[m] = k*h for every m
    return (lower[:, :grid.n_basis] - lower[:, 1:]) / grid.spacing


def bspline_basis(x: float, grid: SplineGrid) -> np.ndarray:
    """Basis vector at one point."""
    return basis_matrix(np.array([x]), grid)[0]


def edge_eval(x: float, c: np.ndarray, w_b: float, grid: SplineGrid) -> float:
    """f(x) = c . basis(clamp(x)) + w_b * x."""
    return float(np.dot(np.asarray(c, dtype=np.float64), bspline_basis(x, grid))
                 + w_b * x)


class KanLayer:
    """Dense [n_in x n_out] grid of spline edges sharing one SplineGrid.

    Edge parameters are named views into stacked master arrays, so the
    vectorized forward touches two buffers while checkpoints still see one
    tensor per edge.
    """

    def __init__(self, name: str, n_in: int, n_out: int, grid: SplineGrid,
                 rng: np.random.Generator):
        self.name = name
        self.n_in, self.n_out = n_in, n_out
        self.grid = grid
        nb = grid.n_basis
        self._C = rng.normal(0.0, 0.02, size=(n_in, n_out, nb))
        self._Wb = np.ascontiguousarray(xavier_uniform(rng, n_out, n_in).T)
        self.c_params = [
            Parameter(Tensor(self._C[i, j]), f"{name}.edge{i}_{j}.c")
            for i in range(n_in) for j in range(n_out)]
        self.wb_params = [
            Parameter(Tensor(self._Wb[i:i + 1, j]), f"{name}.edge{i}_{j}.w_b")
            for i in range(n_in) for j in range(n_out)]
        self.clamp_count = 0

    def forward(self, x: Tensor) -> Tensor:
        xd = x.data
        squeeze = xd.ndim == 1
        if squeeze:
            xd = xd[None, :]
        if xd.shape[1] != self.n_in:
            raise ValueError(
                f"{self.name} expects width {self.n_in}, got {xd.shape[1]}")
        b = xd.shape[0]
        self.clamp_count += int(np.count_nonzero(
            (xd < self.grid.g_min) | (xd > self.grid.g_max)))
        bas = basis_matrix(xd, self.grid).reshape(b, self.n_in, -1) \
            .astype(xd.dtype, copy=False)
        yd = np.einsum("ijm,bim->bj", self._C, bas) + xd @ self._Wb
        out = Tensor(yd[0] if squeeze else yd)

        big_c, big_wb, grid = self._C, self._Wb, self.grid
        n_in, n_out = self.n_in, self.n_out

        def backward(g):
            if squeeze:
                g = g[None, :]
            d_c = np.einsum("bj,bim->ijm", g, bas)
            d_wb = xd.T @ g
            deriv = basis_deriv_matrix(xd, grid).reshape(b, n_in, -1) \
                .astype(xd.dtype, copy=False)
            inside = ((xd >= grid.g_min) & (xd <= grid.g_max)).astype(np.float64)
            dx = (np.einsum("ijm,bj->bim", big_c, g) * deriv).sum(-1) * inside
            dx = dx + g @ big_wb.T
            if squeeze:
                dx = dx[0]
            grads = [dx]
            grads.extend(d_c[i, j]
                         for i in range(n_in) for j in range(n_out))
            grads.extend(d_wb[i:i + 1, j]
                         for i in range(n_in) for j in range(n_out))
            return grads

        inputs = [x] + [p.tensor for p in self.c_params] \
                     + [p.tensor for p in self.wb_params]
        return record("kan_layer", out, inputs, backward)

    def astype(self, dtype) -> None:
        """Cast the master arrays, re-pointing every edge view at them."""
        self._C = self._C.astype(dtype)
        self._Wb = np.ascontiguousarray(self._Wb.astype(dtype))
        idx = 0
        for i in range(self.n_in):
            for j in range(self.n_out):
                self.c_params[idx].tensor.data = self._C[i, j]
                self.wb_params[idx].tensor.data = self._Wb[i:i + 1, j]
                idx += 1

    def sparsity_penalty(self, lam: float) -> Tensor:
        """lam * mean over edges of mean |c|; differentiable into c."""
        if lam < 0:
            raise ValueError("sparsity weight must be >= 0")
        big_c = self._C
        out = Tensor(np.array(lam * np.mean(np.abs(big_c))))

        def backward(g):
            d = float(g) * lam * np.sign(big_c) / big_c.size
            return [d[i, j] for i in range(self.n_in) for j in range(self.n_out)]

        return record("kan_sparsity", out, [p.tensor for p in self.c_params],
                      backward)

    def params(self) -> list:
        return self.c_params + self.wb_params


class KanHead:
    """Two KAN layers d -> hidden -> 1, applied per row with shared weights."""

    def __init__(self, d: int, hidden: int = 16, grid: SplineGrid | None = None,
                 rng: np.random.Generator | None = None, name: str = "kan"):
        self.grid = grid or SplineGrid()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.layers = [
            KanLayer(f"{name}.layer0", d, hidden, self.grid, rng),
            KanLayer(f"{name}.layer1", hidden, 1, self.grid, rng),
        ]

    def forward(self, z: Tensor) -> Tensor:
        """[H, d] decoder rows -> [H] forecast."""
        h = self.layers[0].forward(z)
        y = self.layers[1].forward(h)
        return T.reshape(y, (y.data.shape[0],))

    def sparsity_penalty(self, lam: float) -> Tensor:
        return T.add(self.layers[0].sparsity_penalty(lam),
                     self.layers[1].sparsity_penalty(lam))

    @property
    def clamp_count(self) -> int:
        return sum(l.clamp_count for l in self.layers)

    def params(self) -> list:
        out = []
        for l in self.layers:
            out.extend(l.params())
        return out

    def dump_edges_csv(self, path, n_samples: int = 65) -> None:
        """Write each learned edge function sampled over the grid range."""
        import csv
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "edge_in", "edge_out", "x", "f"])
            for li, layer in enumerate(self.layers):
                xs = np.linspace(layer.grid.g_min, layer.grid.g_max, n_samples)
                bas = basis_matrix(xs, layer.grid)
                for i in range(layer.n_in):
                    for j in range(layer.n_out):
                        f = bas @ layer._C[i, j] + layer._Wb[i, j] * xs
                        for xv, fv in zip(xs, f):
                            w.writerow([li, i, j, repr(float(xv)), repr(float(fv))])
