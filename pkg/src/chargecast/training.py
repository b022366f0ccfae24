"""Two-phase optimization: Adam, layer freezing, early stopping, checkpoints.

Pre-training runs mini-batch Adam over shuffled source-station windows;
fine-tuning adapts a pre-trained model to target stations under one of
three strategies (freeze everything but the spline head, full update at
a reduced rate, or small-batch). Both phases hold out the chronological
tail of their windows for validation and keep the best-validation
weights.
"""

from __future__ import annotations

import dataclasses
import io
import json
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import Scaler, WindowDataset, chronological_split
from .model import MixerInformerKan, ModelConfig, build_model
from .rng import stream
from .tensor import Graph

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

# freezing these leaves only the spline head (and a linear head, for the
# reduced variant) trainable
FREEZE_BACKBONE = ("mixer.", "informer.")


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimState:
    """Adam accumulators, keyed by parameter name.

    Moments are kept in float64 regardless of parameter precision; the
    computed update is cast back on application.
    """

    lr: float
    betas: tuple = ADAM_BETAS
    eps: float = ADAM_EPS
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if self.step < 0:
            raise ValueError("step must be >= 0")


def adam_step(params, grads, state: OptimState) -> OptimState:
    """One bias-corrected Adam update over ``params`` with aligned ``grads``.

    Updates happen in place through each parameter's array so views into
    shared masters (the spline coefficient tables) stay attached.
    Decoupled weight decay is applied only when ``weight_decay > 0``.
    """
    if len(params) != len(grads):
        raise ValueError(f"got {len(params)} params but {len(grads)} grads")
    for p, g in zip(params, grads):
        if g is None:
            raise ValueError(f"missing gradient for parameter '{p.name}'")
        if np.shape(g) != p.data.shape:
            raise ValueError(f"gradient shape {np.shape(g)} does not match "
                             f"parameter '{p.name}' {p.data.shape}")
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g in zip(params, grads):
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros(p.data.shape, dtype=np.float64)
            state.v[p.name] = np.zeros(p.data.shape, dtype=np.float64)
        v = state.v[p.name]
        g64 = np.asarray(g, dtype=np.float64)
        m *= b1
        m += (1.0 - b1) * g64
        v *= b2
        v += (1.0 - b2) * (g64 * g64)
        update = (state.lr * (m / c1)) / (np.sqrt(v / c2) + state.eps)
        w = p.data
        if state.weight_decay > 0.0:
            w -= (state.lr * state.weight_decay) * w
        w -= update
    return state


def clip_grad_norm(grads, max_norm: float) -> float:
    """Rescale gradients in place so their global L2 norm is <= max_norm.

    Returns the pre-clip norm.
    """
    if max_norm <= 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    total = 0.0
    for g in grads:
        total += float(np.vdot(g, g).real)
    norm = math.sqrt(total)
    if norm > max_norm:
        factor = max_norm / norm
        for g in grads:
            g *= factor
    return norm


# ---------------------------------------------------------------------------
# plans


@dataclass
class TrainPlan:
    """Recipe for one optimization phase."""

    phase: str
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 0.0
    freeze_spec: tuple = ()
    patience: "int | None" = None  # early stopping disabled when None
    min_delta: float = 0.0
    kan_sparsity: float = 0.0
    grad_clip: "float | None" = 1.0
    val_fraction: float = 0.1
    strategy: "str | None" = None

    def __post_init__(self):
        problems = []
        if self.phase not in ("pretrain", "finetune"):
            problems.append(f"phase must be pretrain or finetune, got {self.phase!r}")
        if self.epochs < 1:
            problems.append(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr < 0:
            problems.append(f"lr must be >= 0, got {self.lr}")
        if self.patience is not None and self.patience < 1:
            problems.append(f"patience must be >= 1, got {self.patience}")
        if self.kan_sparsity < 0:
            problems.append("kan_sparsity must be >= 0")
        if self.grad_clip is not None and self.grad_clip <= 0:
            problems.append("grad_clip must be positive or None")
        if problems:
            raise ValueError("; ".join(problems))
        self.freeze_spec = tuple(self.freeze_spec)


def pretrain_plan(**overrides) -> TrainPlan:
    opts = dict(phase="pretrain", epochs=10, batch_size=32, lr=1e-4)
    opts.update(overrides)
    return TrainPlan(**opts)


def finetune_plan(strategy: str = "full", pretrain_lr: float = 1e-4,
                  **overrides) -> TrainPlan:
    """Build the adaptation recipe for one of the three strategies.

    freeze      -- backbone weights fixed, head trained at the pretrain rate
    full        -- every parameter trained at one tenth of the pretrain rate
    small_batch -- every parameter trained with batches of 8
    """
    opts = dict(phase="finetune", lr=pretrain_lr, patience=3, min_delta=0.0,
                strategy=strategy)
    if strategy == "freeze":
        opts["freeze_spec"] = FREEZE_BACKBONE
    elif strategy == "full":
        opts["lr"] = pretrain_lr / 10.0
    elif strategy == "small_batch":
        opts["batch_size"] = 8
    else:
        raise ValueError(f"unknown fine-tune strategy '{strategy}'")
    opts.update(overrides)
    return TrainPlan(**opts)


def apply_freeze(model: MixerInformerKan, freeze_spec) -> list:
    """Set trainable flags: False for parameters matching any prefix.

    Non-matching parameters are (re-)enabled, so an empty spec unfreezes
    everything. Returns one warning string per prefix that matched no
    parameter.
    """
    spec = tuple(freeze_spec)
    params = model.params()
    warnings = []
    for prefix in spec:
        if not any(p.name.startswith(prefix) for p in params):
            warnings.append(f"freeze prefix '{prefix}' matched no parameters")
    for p in params:
        p.trainable = not any(p.name.startswith(prefix) for prefix in spec)
    return warnings


# ---------------------------------------------------------------------------
# early stopping


def early_stop_check(history, patience: int, min_delta: float = 0.0) -> bool:
    """True when the last ``patience`` entries all failed to improve.

    An entry improves when it beats the best qualifying loss seen so far
    by more than ``min_delta``; the first entry is the baseline.
    """
    values = [float(v) for v in history]
    if not values:
        raise ValueError("history must be non-empty")
    if patience < 1:
        raise ValueError(f"patience must be >= 1, got {patience}")
    best = values[0]
    last_improved = 0
    for i, v in enumerate(values[1:], start=1):
        if best - v > min_delta:
            best = v
            last_improved = i
    return (len(values) - 1 - last_improved) >= patience


# ---------------------------------------------------------------------------
# training loops


@dataclass(frozen=True)
class EpochStats:
    phase: str
    epoch: int
    train_loss: float
    val_loss: float


@dataclass
class TrainResult:
    history: list
    best_epoch: int
    best_val: float
    stopped_early: bool = False
    warnings: list = field(default_factory=list)


def history_to_csv(history) -> str:
    lines = ["phase,epoch,train_loss,val_loss"]
    for h in history:
        lines.append(f"{h.phase},{h.epoch},{h.train_loss!r},{h.val_loss!r}")
    return "\n".join(lines) + "\n"


def dataset_mse(model: MixerInformerKan, ds: WindowDataset) -> float:
    """Mean squared error over every window and horizon step, eval mode."""
    if len(ds) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    total = 0.0
    for i in range(len(ds)):
        pred = model.forward(ds.inputs[i], mode="eval")
        diff = np.asarray(pred.data, dtype=np.float64) - ds.targets[i]
        total += float(np.dot(diff, diff))
    return total / (len(ds) * ds.H)


def _batch_loss(model, xb, yb, rng, lam):
    h = model.config.H
    rows = [T.reshape(model.forward(xb[i], mode="train", rng=rng), (1, h))
            for i in range(xb.shape[0])]
    stacked = rows[0] if len(rows) == 1 else T.concat_rows(rows)
    loss = T.mse_loss(stacked, np.asarray(yb, dtype=model.dtype))
    if lam > 0.0 and model.head is not None:
        loss = T.add(loss, model.head.sparsity_penalty(lam))
    return loss


def _train_phase(model, dataset, plan, seed) -> TrainResult:
    train_ds, val_ds = chronological_split(dataset, plan.val_fraction)
    shuffle_rng = stream(seed, f"{plan.phase}/shuffle")
    drop_rng = stream(seed, f"{plan.phase}/dropout")
    trainable = [p for p in model.params() if p.trainable]
    if not trainable:
        raise ValueError("no trainable parameters left; loosen the freeze spec")

    state = OptimState(lr=plan.lr, weight_decay=plan.weight_decay)
    history = []
    best_val = math.inf
    best_epoch = 0
    best_snap = None
    stopped = False
    n = len(train_ds)

    for epoch in range(1, plan.epochs + 1):
        order = shuffle_rng.permutation(n)
        running = 0.0
        for s in range(0, n, plan.batch_size):
            idx = order[s:s + plan.batch_size]
            for p in model.params():
                p.tensor.grad = None
            with Graph() as g:
                loss = _batch_loss(model, train_ds.inputs[idx],
                                   train_ds.targets[idx], drop_rng,
                                   plan.kan_sparsity)
                g.backward(loss)
            grads = []
            for p in trainable:
                if p.grad is None:
                    raise ValueError(f"missing gradient for parameter '{p.name}'")
                grads.append(p.grad)
            if plan.grad_clip is not None:
                clip_grad_norm(grads, plan.grad_clip)
            adam_step(trainable, grads, state)
            running += float(loss.data) * len(idx)
        train_loss = running / n
        val_loss = dataset_mse(model, val_ds)
        history.append(EpochStats(plan.phase, epoch, train_loss, val_loss))
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_snap = {p.name: p.data.copy() for p in model.params()}
        if plan.patience is not None and early_stop_check(
                [h.val_loss for h in history], plan.patience, plan.min_delta):
            stopped = True
            break

    if best_snap is not None:
        for p in model.params():
            p.data[...] = best_snap[p.name]
    return TrainResult(history, best_epoch, best_val, stopped)


def pretrain(model: MixerInformerKan, dataset: WindowDataset, plan: TrainPlan,
             seed: int = 0) -> TrainResult:
    """Mini-batch Adam over shuffled source windows; keeps best-val weights."""
    if plan.phase != "pretrain":
        raise ValueError(f"pretrain called with a {plan.phase!r} plan")
    if len(dataset) == 0:
        raise ValueError("source dataset is empty")
    warnings = apply_freeze(model, plan.freeze_spec)
    result = _train_phase(model, dataset, plan, seed)
    result.warnings = warnings
    return result


def finetune(model: MixerInformerKan, dataset: WindowDataset, plan: TrainPlan,
             seed: int = 0) -> TrainResult:
    """Adapt a pre-trained model on target windows per the plan's strategy."""
    if plan.phase != "finetune":
        raise ValueError(f"finetune called with a {plan.phase!r} plan")
    if len(dataset) == 0:
        raise ValueError("no fine-tune windows for the target stations; "
                         "lower the cutoff or widen the target slice in the "
                         "data configuration")
    warnings = apply_freeze(model, plan.freeze_spec)
    result = _train_phase(model, dataset, plan, seed)
    result.warnings = warnings
    return result


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"MIKT"
CHECKPOINT_VERSION = 1

_DTYPE_TAGS = {8: 0, 4: 1}
_TAG_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}


class CheckpointError(Exception):
    """Base class for checkpoint read/apply failures."""


class CheckpointVersionError(CheckpointError):
    """Magic bytes or format version not recognised."""


class CheckpointTruncatedError(CheckpointError):
    """File ended before a declared field was complete."""


class UnknownTensorError(CheckpointError):
    """Checkpoint carries a tensor the model has no parameter for."""


class ConfigMismatchError(CheckpointError):
    """Stored config disagrees with the receiving model's config."""

    def __init__(self, fields):
        self.fields = sorted(fields)
        super().__init__("checkpoint config mismatch in field(s): "
                         + ", ".join(self.fields))


@dataclass
class Checkpoint:
    version: int
    config: ModelConfig
    scaler: "Scaler | None"
    metadata: dict
    tensors: dict


def _write_tensor_table(buf, named_arrays) -> None:
    """Tensor table body: length-prefixed name, dtype tag, shape, raw LE data."""
    for name, arr in named_arrays:
        if arr.dtype.kind != "f" or arr.dtype.itemsize not in _DTYPE_TAGS:
            raise ValueError(f"unsupported dtype {arr.dtype} for '{name}'")
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<BB", _DTYPE_TAGS[arr.dtype.itemsize], arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<I", dim))
        le = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        buf.write(le.tobytes())


def save_checkpoint(model: MixerInformerKan, meta: dict, path,
                    scaler: "Scaler | None" = None) -> None:
    """Write the model atomically (temp file then rename).

    Layout: magic ``MIKT``, u32 version, u32 header length, canonical JSON
    header (config, scaler, metadata, tensor count), then the tensor table
    in sorted-name order.
    """
    header = {
        "config": dataclasses.asdict(model.config),
        "scaler": None if scaler is None else
            {"mean": scaler.mean.tolist(), "std": scaler.std.tolist()},
        "metadata": {"phase": str(meta.get("phase", "")),
                     "epoch": int(meta.get("epoch", 0)),
                     "seed": int(meta.get("seed", 0))},
        "tensor_count": len(model.registry),
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
    buf.write(blob)
    _write_tensor_table(
        buf, ((name, model.registry[name].data) for name in sorted(model.registry)))
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def _read_exact(fh, count: int, what: str) -> bytes:
    raw = fh.read(count)
    if len(raw) != count:
        raise CheckpointTruncatedError(f"file truncated while reading {what}")
    return raw


def _read_tensor_table(fh, count: int) -> dict:
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", _read_exact(fh, 4, "tensor name length"))
        name = _read_exact(fh, name_len, "tensor name").decode("utf-8")
        tag, ndim = struct.unpack("<BB", _read_exact(fh, 2, f"'{name}' dtype/rank"))
        if tag not in _TAG_DTYPES:
            raise CheckpointError(f"unknown dtype tag {tag} for tensor '{name}'")
        shape = tuple(
            struct.unpack("<I", _read_exact(fh, 4, f"'{name}' shape"))[0]
            for _ in range(ndim))
        dt = _TAG_DTYPES[tag]
        n_items = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = _read_exact(fh, n_items * dt.itemsize, f"tensor '{name}' data")
        tensors[name] = np.frombuffer(raw, dtype=dt).reshape(shape).copy()
    return tensors


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic bytes")
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointVersionError(
                f"bad magic {magic!r}; expected {CHECKPOINT_MAGIC!r}")
        version, header_len = struct.unpack("<II", _read_exact(fh, 8, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointVersionError(
                f"unsupported checkpoint version {version} "
                f"(this build reads {CHECKPOINT_VERSION})")
        try:
            header = json.loads(_read_exact(fh, header_len, "header"))
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
        config = ModelConfig(**header["config"])
        stored = header.get("scaler")
        scaler = None if stored is None else Scaler(stored["mean"], stored["std"])
        tensors = _read_tensor_table(fh, int(header["tensor_count"]))
    return Checkpoint(version, config, scaler, dict(header["metadata"]), tensors)


def apply_checkpoint(model: MixerInformerKan, ckpt: Checkpoint) -> None:
    """Copy checkpoint tensors into the model's parameters, in place."""
    mine = dataclasses.asdict(model.config)
    theirs = dataclasses.asdict(ckpt.config)
    mismatched = [k for k in mine if mine[k] != theirs.get(k)]
    if mismatched:
        raise ConfigMismatchError(mismatched)
    for name in ckpt.tensors:
        if name not in model.registry:
            raise UnknownTensorError(
                f"checkpoint tensor '{name}' has no matching model parameter")
    missing = sorted(set(model.registry) - set(ckpt.tensors))
    if missing:
        raise CheckpointError("checkpoint is missing tensors: " + ", ".join(missing))
    for name, arr in ckpt.tensors.items():
        p = model.registry[name]
        if p.data.shape != arr.shape:
            raise CheckpointError(
                f"shape mismatch for '{name}': model {p.data.shape}, "
                f"checkpoint {arr.shape}")
        p.data[...] = arr


def model_from_checkpoint(ckpt: Checkpoint) -> MixerInformerKan:
    """Rebuild the saved model: construct from config, then load tensors."""
    model = build_model(ckpt.config, seed=int(ckpt.metadata.get("seed", 0)))
    apply_checkpoint(model, ckpt)
    return model
