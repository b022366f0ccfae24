"""Model assembly: fusion stack -> positional encoding -> attention core ->
spline head, with a flat name-to-parameter registry.

The decoder consumes the last ``label_len`` rows of the fused input plus H
zero placeholders (one-shot generative decoding); its positional code is
offset so placeholder rows continue the encoder's absolute positions.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .informer import InformerConfig, InformerCore, sinusoidal_pe
from .kan import KanHead, SplineGrid
from .layers import LinearLayer
from .mixer import MixerConfig, MixerStack
from .rng import RngHub, stream
from .tensor import Parameter, Tensor

VARIANTS = ("full", "no_mixer", "no_kan")


@dataclass
class ModelConfig:
    L_x: int
    H: int
    C: int
    d: int = 256
    n_heads: int = 8
    r: int = 2
    d_ff: int | None = None  # defaults to 8*d (the 256 -> 2048 shape)
    conv_kernel: int = 1
    dropout: float = 0.1
    label_len: int | None = None  # defaults to L_x // 2
    mixer_blocks: int = 2
    mixer_hidden_t: int | None = None
    mixer_hidden_c: int | None = None
    prenorm: bool = False
    kan_grid: int = 8
    kan_degree: int = 3
    kan_hidden: int = 16
    sparsity_lambda: float = 0.0
    factor: float = 5.0
    precision: str = "f64"
    variant: str = "full"

    def __post_init__(self):
        if self.d_ff is None and self.d > 0:
            self.d_ff = 8 * self.d
        if self.label_len is None and self.L_x > 0:
            self.label_len = self.L_x // 2
        problems = self.validate()
        if problems:
            raise ValueError("invalid model config: " + "; ".join(problems))

    def validate(self) -> list:
        p = []
        for field_name in ("L_x", "H", "C", "d", "n_heads", "r", "d_ff",
                           "mixer_blocks", "kan_grid", "kan_hidden"):
            if getattr(self, field_name) is None or getattr(self, field_name) < 1:
                p.append(f"{field_name} must be >= 1")
        if self.d >= 1 and self.n_heads >= 1 and self.d % self.n_heads != 0:
            p.append(f"d={self.d} not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            p.append(f"dropout must be in [0, 1), got {self.dropout}")
        if self.label_len is not None and not 0 <= self.label_len <= self.L_x:
            p.append(f"label_len={self.label_len} must be in [0, L_x={self.L_x}]")
        if self.kan_degree < 0:
            p.append("kan_degree must be >= 0")
        if self.sparsity_lambda < 0:
            p.append("sparsity_lambda must be >= 0")
        if self.factor <= 0:
            p.append("factor must be > 0")
        if self.conv_kernel % 2 == 0:
            p.append("conv_kernel must be odd")
        if self.precision not in ("f64", "f32"):
            p.append(f"precision must be f64 or f32, got {self.precision!r}")
        if self.variant not in VARIANTS:
            p.append(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        return p


def ablation_variant(config: ModelConfig, drop: str):
    """Return (modified config, pretrain flag) for one removed component."""
    if drop == "mixer":
        return replace(config, variant="no_mixer"), True
    if drop == "kan":
        return replace(config, variant="no_kan"), True
    if drop == "transfer":
        return replace(config), False
    raise ValueError(f"unknown ablation component {drop!r}; "
                     "expected mixer, kan, or transfer")


class MixerInformerKan:
    """The assembled forecaster. Construct through ``build_model``."""

    def __init__(self, config: ModelConfig, seed: int):
        self.config = config
        self.seed = int(seed)
        self.dtype = np.float64 if config.precision == "f64" else np.float32
        hub = RngHub(seed)

        if config.variant == "no_mixer":
            rng = hub.stream("init/embed")
            self.embed = LinearLayer("embed", config.C, config.d, rng)
            self.embed.W.data[...] = rng.normal(0.0, 0.02,
                                                size=(config.d, config.C))
            self.mixer = None
        else:
            mix_cfg = MixerConfig(
                L=config.L_x, C=config.C, d=config.d,
                n_blocks=config.mixer_blocks, hidden_t=config.mixer_hidden_t,
                hidden_c=config.mixer_hidden_c, dropout=config.dropout,
                prenorm=config.prenorm)
            self.mixer = MixerStack(mix_cfg, hub.stream("init/mixer"))
            self.embed = None

        inf_cfg = InformerConfig(
            d=config.d, n_heads=config.n_heads, r=config.r, d_ff=config.d_ff,
            factor=config.factor, conv_kernel=config.conv_kernel)
        self.informer = InformerCore(inf_cfg, hub.stream("init/informer"))

        if config.variant == "no_kan":
            self.head = None
            self.head_linear = LinearLayer("head", config.d, 1,
                                           hub.stream("init/head"))
        else:
            grid = SplineGrid(G=config.kan_grid, k=config.kan_degree)
            self.head = KanHead(config.d, hidden=config.kan_hidden, grid=grid,
                                rng=hub.stream("init/kan"))
            self.head_linear = None

        if self.dtype is np.float32:
            if self.head is not None:
                for layer in self.head.layers:
                    layer.astype(np.float32)
            for p in self._collect_params():
                if p.tensor.data.dtype != np.float32:
                    p.tensor.data = p.tensor.data.astype(np.float32)

        self.registry: dict = {}
        for p in self._collect_params():
            if p.name in self.registry:
                raise ValueError(f"duplicate parameter name {p.name}")
            self.registry[p.name] = p

        # positional codes are fixed, not learned
        self._pe_enc = sinusoidal_pe(config.L_x, config.d).astype(self.dtype)
        token_len = config.label_len + config.H
        self._pe_dec = sinusoidal_pe(
            token_len, config.d,
            offset=config.L_x - config.label_len).astype(self.dtype)

    def _collect_params(self) -> list:
        out = []
        if self.mixer is not None:
            out.extend(self.mixer.params())
        if self.embed is not None:
            out.extend(self.embed.params())
        out.extend(self.informer.params())
        if self.head is not None:
            out.extend(self.head.params())
        if self.head_linear is not None:
            out.extend(self.head_linear.params())
        return out

    def params(self) -> list:
        return list(self.registry.values())

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params())

    def fuse(self, x: Tensor, mode: str, rng) -> Tensor:
        if self.mixer is not None:
            return self.mixer.forward(x, mode, rng)
        return self.embed(x)

    def forward(self, x, mode: str = "eval", rng=None) -> Tensor:
        """[L_x, C] standardized input -> [H] standardized forecast."""
        cfg = self.config
        xd = np.asarray(x.data if isinstance(x, Tensor) else x)
        if xd.shape != (cfg.L_x, cfg.C):
            raise ValueError(
                f"model input expects shape [{cfg.L_x}, {cfg.C}], got {list(xd.shape)}")
        if isinstance(x, Tensor) and x.data.dtype == self.dtype:
            xt = x  # keep the caller's leaf so gradients reach it
        else:
            xt = Tensor(xd, dtype=self.dtype)
        if rng is None:
            # frozen stream: key subsampling stays deterministic and
            # independent of evaluation order
            rng = stream(0, "eval/keys")

        fused = self.fuse(xt, mode, rng)  # [L_x, d]
        enc_in = T.add(fused, self._pe_enc)
        enc_out = self.informer.encoder_forward(enc_in, rng)

        parts = []
        if cfg.label_len > 0:
            parts.append(T.slice_rows(fused, cfg.L_x - cfg.label_len, cfg.L_x))
        parts.append(np.zeros((cfg.H, cfg.d), dtype=self.dtype))
        token = T.concat_rows(parts)
        token = T.add(token, self._pe_dec)

        dec_out = self.informer.decoder_forward(token, enc_out, rng)
        z = T.slice_rows(dec_out, cfg.label_len, cfg.label_len + cfg.H)
        if self.head is not None:
            return self.head.forward(z)
        return T.reshape(self.head_linear(z), (cfg.H,))

    def sparsity_penalty(self) -> "Tensor | None":
        if self.head is None or self.config.sparsity_lambda == 0.0:
            return None
        return self.head.sparsity_penalty(self.config.sparsity_lambda)


def build_model(config: ModelConfig, seed: int) -> MixerInformerKan:
    """Deterministic for a fixed (config, seed) pair."""
    return MixerInformerKan(config, seed)
