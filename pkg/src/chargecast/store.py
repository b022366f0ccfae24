"""On-disk bundle for a prepared transfer dataset.

One binary file carries the three window splits, the source-fitted
scaler, and provenance, so every later command starts from identical
bytes instead of re-deriving windows. Layout mirrors the model
checkpoint: magic ``CCDS``, u32 version, u32 header length, canonical
JSON header, then a tensor table in sorted-name order.
"""

from __future__ import annotations

import io
import json
import os
import struct

import numpy as np

from .data import Scaler, WindowDataset
from .evaluation import TransferData
from .training import (
    CheckpointError,
    _read_exact,
    _read_tensor_table,
    _write_tensor_table,
)

DATASET_MAGIC = b"CCDS"
DATASET_VERSION = 1

_SPLITS = ("source_train", "target_train", "target_eval")


class DatasetError(Exception):
    """Raised when a dataset bundle cannot be read or is inconsistent."""


def _split_arrays(name: str, ds: WindowDataset) -> list:
    return [
        (f"{name}.inputs", np.asarray(ds.inputs, dtype=np.float64)),
        (f"{name}.targets", np.asarray(ds.targets, dtype=np.float64)),
        (f"{name}.t_starts", np.asarray(ds.t_starts, dtype=np.float64)),
    ]


def save_dataset(path, data: TransferData, extra: "dict | None" = None) -> None:
    """Write the bundle atomically (temp file then rename)."""
    splits = {"source_train": data.source_train,
              "target_train": data.target_train,
              "target_eval": data.target_eval}
    geoms = {(ds.L_x, ds.H) for ds in splits.values()}
    if len(geoms) != 1:
        raise ValueError(f"splits disagree on window geometry: {sorted(geoms)}")
    header = {
        "L_x": int(data.source_train.L_x),
        "H": int(data.source_train.H),
        "scaler": None if data.scaler is None else
            {"mean": data.scaler.mean.tolist(),
             "std": data.scaler.std.tolist()},
        "splits": {name: {"station_ids": list(ds.station_ids),
                          "count": len(ds)}
                   for name, ds in splits.items()},
        "extra": dict(extra or {}),
        "tensor_count": 3 * len(splits),
    }
    named = []
    for name in _SPLITS:
        named.extend(_split_arrays(name, splits[name]))
    named.sort(key=lambda pair: pair[0])

    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(DATASET_MAGIC)
    buf.write(struct.pack("<II", DATASET_VERSION, len(blob)))
    buf.write(blob)
    _write_tensor_table(buf, named)

    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def _rebuild_split(name: str, meta: dict, tensors: dict,
                   L_x: int, H: int) -> WindowDataset:
    try:
        inputs = tensors[f"{name}.inputs"]
        targets = tensors[f"{name}.targets"]
        t_starts = tensors[f"{name}.t_starts"]
    except KeyError as exc:
        raise DatasetError(f"dataset bundle is missing tensor {exc}") from None
    ids = [str(s) for s in meta["station_ids"]]
    if not (len(ids) == meta["count"] == inputs.shape[0]
            == targets.shape[0] == t_starts.shape[0]):
        raise DatasetError(f"split '{name}' row counts disagree")
    return WindowDataset(inputs=inputs, targets=targets, L_x=L_x, H=H,
                         station_ids=ids, t_starts=t_starts)


def load_dataset(path) -> tuple:
    """Read a bundle; returns ``(TransferData, extra_dict)``."""
    try:
        with open(path, "rb") as fh:
            magic = _read_exact(fh, 4, "magic bytes")
            if magic != DATASET_MAGIC:
                raise DatasetError(
                    f"not a dataset bundle: bad magic {magic!r} in {path}")
            version, header_len = struct.unpack(
                "<II", _read_exact(fh, 8, "version"))
            if version != DATASET_VERSION:
                raise DatasetError(
                    f"unsupported dataset version {version} "
                    f"(this build reads {DATASET_VERSION})")
            header = json.loads(_read_exact(fh, header_len, "header"))
            tensors = _read_tensor_table(fh, int(header["tensor_count"]))
    except CheckpointError as exc:
        raise DatasetError(f"dataset bundle {path}: {exc}") from None
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        raise DatasetError(f"dataset bundle {path}: bad header ({exc})") from None

    try:
        L_x, H = int(header["L_x"]), int(header["H"])
        scaler = None
        if header["scaler"] is not None:
            scaler = Scaler(mean=np.asarray(header["scaler"]["mean"]),
                            std=np.asarray(header["scaler"]["std"]))
        split_meta = header["splits"]
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"dataset bundle {path}: bad header ({exc!r})") from None
    splits = {}
    for name in _SPLITS:
        if name not in split_meta:
            raise DatasetError(f"dataset bundle is missing split '{name}'")
        splits[name] = _rebuild_split(name, split_meta[name], tensors, L_x, H)
    data = TransferData(source_train=splits["source_train"],
                        target_train=splits["target_train"],
                        target_eval=splits["target_eval"],
                        scaler=scaler)
    return data, dict(header.get("extra", {}))
