"""Run configuration: one INI file with sections, flag overrides on top.

Sections: [run] (out, seed), [data], [model], [pretrain], [finetune].
Every key is validated against a known-key table; anything unrecognised
is an error, so typos fail loudly before work starts. The config path
comes from --config or the CHARGECAST_CONFIG environment variable.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields

from .training import TrainPlan, finetune_plan, pretrain_plan

ENV_CONFIG = "CHARGECAST_CONFIG"

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in _TRUE:
        return True
    if low in _FALSE:
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _int_or_none(text: str):
    return None if text.strip().lower() == "none" else int(text)


def _float_or_none(text: str):
    return None if text.strip().lower() == "none" else float(text)


def _str_tuple(text: str) -> tuple:
    return tuple(s.strip() for s in text.split(",") if s.strip())


@dataclass
class DataConfig:
    sessions: "str | None" = None  # session CSV path; None with synth=true
    synth: bool = False
    synth_stations: int = 26
    synth_days: int = 90
    synth_start: str = "2022-11-01T00:00:00Z"
    granularity: int = 3600
    L_x: int = 96
    H: int = 24
    stride: int = 1
    calendar: bool = True
    n_source: int = 21
    cutoff: str = "2023-01-01T00:00:00Z"
    column_station: "str | None" = None
    column_start: "str | None" = None
    column_duration: "str | None" = None
    column_energy: "str | None" = None

    def column_map(self) -> "dict | None":
        out = {}
        for key, col in (("station", self.column_station),
                         ("start", self.column_start),
                         ("duration", self.column_duration),
                         ("energy", self.column_energy)):
            if col is not None:
                out[key] = col
        return out or None


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: dict = field(default_factory=dict)  # ModelConfig overrides
    pretrain: TrainPlan = field(default_factory=pretrain_plan)
    finetune: TrainPlan = field(default_factory=finetune_plan)
    out: str = "runs/out"
    seed: int = 0
    # converted per-section key/value maps, kept so callers can tell an
    # explicit setting apart from a dataclass default
    raw: dict = field(default_factory=dict)

    def explicitly_set(self, section: str, key: str) -> bool:
        return key in self.raw.get(section, {})


_DATA_KEYS = {
    "sessions": str, "synth": _parse_bool, "synth_stations": int,
    "synth_days": int, "synth_start": str, "granularity": int,
    "L_x": int, "H": int, "stride": int, "calendar": _parse_bool,
    "n_source": int, "cutoff": str, "column_station": str,
    "column_start": str, "column_duration": str, "column_energy": str,
}

# L_x, H, C come from the data section / prepared dataset, not from here
_MODEL_KEYS = {
    "d": int, "n_heads": int, "r": int, "d_ff": int, "conv_kernel": int,
    "dropout": float, "label_len": int, "mixer_blocks": int,
    "mixer_hidden_t": int, "mixer_hidden_c": int, "prenorm": _parse_bool,
    "kan_grid": int, "kan_degree": int, "kan_hidden": int,
    "sparsity_lambda": float, "factor": float, "precision": str,
    "variant": str,
}

_TRAIN_KEYS = {
    "epochs": int, "batch_size": int, "lr": float, "weight_decay": float,
    "freeze_spec": _str_tuple, "patience": _int_or_none, "min_delta": float,
    "kan_sparsity": float, "grad_clip": _float_or_none,
    "val_fraction": float, "strategy": str,
}

_RUN_KEYS = {"out": str, "seed": int}

_SECTIONS = {
    "run": _RUN_KEYS,
    "data": _DATA_KEYS,
    "model": _MODEL_KEYS,
    "pretrain": _TRAIN_KEYS,
    "finetune": _TRAIN_KEYS,
}


def _convert_section(name: str, items: dict) -> dict:
    table = _SECTIONS[name]
    out = {}
    for key, raw in items.items():
        if key not in table:
            raise ValueError(
                f"unknown key '{key}' in [{name}] "
                f"(known: {', '.join(sorted(table))})")
        try:
            out[key] = table[key](raw)
        except ValueError as exc:
            raise ValueError(f"[{name}] {key}: {exc}") from None
    return out


def parse_config_text(text: str) -> dict:
    """INI text -> {section: {key: converted value}} with strict keys."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str  # keys like L_x are case-sensitive
    cp.read_string(text)
    raw = {}
    for section in cp.sections():
        if section not in _SECTIONS:
            raise ValueError(
                f"unknown config section [{section}] "
                f"(known: {', '.join(sorted(_SECTIONS))})")
        raw[section] = _convert_section(section, dict(cp.items(section)))
    return raw


def load_config(path: "str | None" = None) -> RunConfig:
    """Build a RunConfig from a file (or defaults when none is given)."""
    if path is None:
        path = os.environ.get(ENV_CONFIG) or None
    raw = {}
    if path is not None:
        if not os.path.isfile(path):
            raise ValueError(f"config file not found: {path}")
        with open(path, "r", encoding="utf-8") as fh:
            raw = parse_config_text(fh.read())
    return build_run_config(raw)


def build_run_config(raw: dict) -> RunConfig:
    data_kwargs = raw.get("data", {})
    known = {f.name for f in fields(DataConfig)}
    data = DataConfig(**{k: v for k, v in data_kwargs.items() if k in known})

    pre_kwargs = dict(raw.get("pretrain", {}))
    pre = pretrain_plan(**pre_kwargs)

    tune_kwargs = dict(raw.get("finetune", {}))
    strategy = tune_kwargs.pop("strategy", "full")
    tune = finetune_plan(strategy, pretrain_lr=pre.lr, **tune_kwargs)

    run_kwargs = raw.get("run", {})
    return RunConfig(
        data=data,
        model=dict(raw.get("model", {})),
        pretrain=pre,
        finetune=tune,
        out=run_kwargs.get("out", "runs/out"),
        seed=run_kwargs.get("seed", 0),
        raw=raw,
    )
