"""Parameter-holding building blocks shared by the model components."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor


def xavier_uniform(rng: np.random.Generator, n_out: int, n_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-limit, limit, size=(n_out, n_in))


class LinearLayer:
    """y = x W^T + b with W stored [n_out, n_in], Xavier-uniform init."""

    def __init__(self, name: str, n_in: int, n_out: int, rng: np.random.Generator,
                 bias: bool = True):
        self.name = name
        self.n_in, self.n_out = n_in, n_out
        self.W = Parameter(Tensor(xavier_uniform(rng, n_out, n_in)), f"{name}.W")
        self.b = Parameter(Tensor(np.zeros(n_out)), f"{name}.b") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.W.tensor, self.b.tensor if self.b else None)

    def params(self) -> list:
        return [self.W] + ([self.b] if self.b else [])


class ConvLayer:
    """Same-padded time-axis convolution; kernel stored [k, c_in, c_out]."""

    def __init__(self, name: str, k: int, c_in: int, c_out: int,
                 rng: np.random.Generator):
        self.name = name
        limit = np.sqrt(6.0 / (k * c_in + k * c_out))
        kernel = rng.uniform(-limit, limit, size=(k, c_in, c_out))
        self.K = Parameter(Tensor(kernel), f"{name}.K")
        self.b = Parameter(Tensor(np.zeros(c_out)), f"{name}.b")

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv1d_time(x, self.K.tensor, self.b.tensor)

    def params(self) -> list:
        return [self.K, self.b]
