"""Feature fusion via stacked temporal-mix / channel-mix residual blocks.

Each block computes ``X + f_C(X + f_T(X))`` on an [L, C] panel: f_T mixes
along the time axis (independently per channel, via transpose), f_C along
the channel axis (independently per time step). Both are
linear -> ReLU -> linear -> dropout. No normalization sits inside the
block by default; an optional pre-norm flag exists for experimentation.
The stack ends with a projection from C channels to model width d.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import LinearLayer
from .tensor import Tensor


@dataclass
class MixerConfig:
    L: int  # input window length
    C: int  # input channel count
    d: int  # output model width
    n_blocks: int = 2
    hidden_t: int | None = None  # defaults to 2L
    hidden_c: int | None = None  # defaults to 2C
    dropout: float = 0.1
    prenorm: bool = False

    def __post_init__(self):
        if self.L <= 0 or self.C <= 0 or self.d <= 0:
            raise ValueError("L, C, d must be positive")
        if self.n_blocks < 1:
            raise ValueError("mixer needs at least one block")
        if self.hidden_t is None:
            self.hidden_t = 2 * self.L
        if self.hidden_c is None:
            self.hidden_c = 2 * self.C


class STBlock:
    def __init__(self, name: str, cfg: MixerConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.t_lin1 = LinearLayer(f"{name}.f_T.lin1", cfg.L, cfg.hidden_t, rng)
        self.t_lin2 = LinearLayer(f"{name}.f_T.lin2", cfg.hidden_t, cfg.L, rng)
        self.c_lin1 = LinearLayer(f"{name}.f_C.lin1", cfg.C, cfg.hidden_c, rng)
        self.c_lin2 = LinearLayer(f"{name}.f_C.lin2", cfg.hidden_c, cfg.C, rng)

    def temporal_mix(self, x: Tensor, mode: str, rng=None) -> Tensor:
        if x.data.shape != (self.cfg.L, self.cfg.C):
            raise ValueError(
                f"temporal_mix expects [{self.cfg.L}, {self.cfg.C}], got {x.data.shape}")
        xt = T.transpose2d(x)  # [C, L]
        if self.cfg.prenorm:
            xt = T.layernorm_lastdim(xt)
        h = T.relu(self.t_lin1(xt))
        y = T.dropout(self.t_lin2(h), self.cfg.dropout, mode, rng)
        return T.transpose2d(y)

    def channel_mix(self, x: Tensor, mode: str, rng=None) -> Tensor:
        if x.data.shape != (self.cfg.L, self.cfg.C):
            raise ValueError(
                f"channel_mix expects [{self.cfg.L}, {self.cfg.C}], got {x.data.shape}")
        xin = T.layernorm_lastdim(x) if self.cfg.prenorm else x
        h = T.relu(self.c_lin1(xin))
        return T.dropout(self.c_lin2(h), self.cfg.dropout, mode, rng)

    def forward(self, x: Tensor, mode: str, rng=None) -> Tensor:
        inner = T.add(x, self.temporal_mix(x, mode, rng))
        return T.add(x, self.channel_mix(inner, mode, rng))

    def params(self) -> list:
        out = []
        for lin in (self.t_lin1, self.t_lin2, self.c_lin1, self.c_lin2):
            out.extend(lin.params())
        return out


class MixerStack:
    """Block sequence plus the final channel-to-width projection."""

    def __init__(self, cfg: MixerConfig, rng: np.random.Generator,
                 name: str = "mixer"):
        self.cfg = cfg
        self.blocks = [STBlock(f"{name}.block{i}", cfg, rng)
                       for i in range(cfg.n_blocks)]
        self.out_proj = LinearLayer(f"{name}.out_proj", cfg.C, cfg.d, rng)

    def forward(self, x: Tensor, mode: str = "eval", rng=None) -> Tensor:
        for blk in self.blocks:
            x = blk.forward(x, mode, rng)
        return self.out_proj(x)

    def params(self) -> list:
        out = []
        for blk in self.blocks:
            out.extend(blk.params())
        out.extend(self.out_proj.params())
        return out
