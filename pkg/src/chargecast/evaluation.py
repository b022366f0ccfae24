"""Metrics, persistence baselines, and the ablation and sweep harnesses.

Metrics default to standardized units (the scale the model trains in);
pass ``physical=True`` with a scaler to report kWh. Harness outputs are
deterministic for a fixed seed list, down to the CSV bytes.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, replace

import numpy as np

from .data import Scaler, WindowDataset, concat_datasets, fit_scaler, make_windows
from .model import ModelConfig, ablation_variant, build_model
from .training import TrainPlan, finetune, finetune_plan, pretrain, pretrain_plan

ABLATION_VARIANTS = ("full", "no_mixer", "no_kan", "no_transfer")
SWEEP_PARAMS = ("d", "n_heads", "r")


# ---------------------------------------------------------------------------
# metrics


def _check_pair(pred, target):
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs target {t.shape}")
    if p.size == 0:
        raise ValueError("cannot compute a metric on empty arrays")
    return p, t


def mae(pred, target) -> float:
    """Mean absolute error over all elements."""
    p, t = _check_pair(pred, target)
    return float(np.mean(np.abs(p - t)))


def mse(pred, target) -> float:
    """Mean squared error over all elements."""
    p, t = _check_pair(pred, target)
    d = p - t
    return float(np.mean(d * d))


@dataclass(frozen=True)
class MetricReport:
    mae: float
    mse: float
    n_samples: int  # number of evaluated windows
    per_station: dict
    units: str = "standardized"


def _aggregate(rows, units) -> MetricReport:
    """rows: (station_id, pred [H], target [H]) triples.

    Totals go through math.fsum so the result is independent of window
    order, not just deterministic.
    """
    by_station = {}
    for sid, pred, target in rows:
        diff = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
        cell = by_station.setdefault(sid, {"abs": [], "sq": [], "n": 0, "w": 0})
        cell["abs"].append(float(np.sum(np.abs(diff))))
        cell["sq"].append(float(np.sum(diff * diff)))
        cell["n"] += diff.size
        cell["w"] += 1
    if not by_station:
        raise ValueError("cannot evaluate an empty dataset")
    per_station = {}
    for sid in sorted(by_station):
        cell = by_station[sid]
        per_station[sid] = MetricReport(
            math.fsum(cell["abs"]) / cell["n"],
            math.fsum(cell["sq"]) / cell["n"],
            cell["w"], {}, units)
    total_n = sum(c["n"] for c in by_station.values())
    total_w = sum(c["w"] for c in by_station.values())
    all_abs = math.fsum(v for c in by_station.values() for v in c["abs"])
    all_sq = math.fsum(v for c in by_station.values() for v in c["sq"])
    return MetricReport(all_abs / total_n, all_sq / total_n, total_w,
                        per_station, units)


def _to_physical(values, scaler: Scaler):
    # load lives in channel 0 of the feature layout
    return np.asarray(values, dtype=np.float64) * scaler.std[0] + scaler.mean[0]


def evaluate_model(model, dataset: WindowDataset, scaler: "Scaler | None" = None,
                   physical: bool = False) -> MetricReport:
    """Forward every window in eval mode and aggregate errors per station."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    if physical and scaler is None:
        raise ValueError("physical units require the scaler the data was "
                         "standardized with")
    rows = []
    for i in range(len(dataset)):
        pred = np.asarray(model.forward(dataset.inputs[i], mode="eval").data,
                          dtype=np.float64)
        target = dataset.targets[i]
        if physical:
            pred = _to_physical(pred, scaler)
            target = _to_physical(target, scaler)
        rows.append((dataset.station_ids[i], pred, target))
    return _aggregate(rows, "kwh" if physical else "standardized")


# ---------------------------------------------------------------------------
# persistence baselines


def persistence_baseline(window, H: int, variant: str = "naive",
                         period: int = 24) -> np.ndarray:
    """Forecast [H] from a load window: repeat the last value, or replay
    the last ``period`` observations."""
    w = np.asarray(window, dtype=np.float64).reshape(-1)
    if w.size == 0:
        raise ValueError("persistence needs a non-empty window")
    if H < 1:
        raise ValueError(f"H must be >= 1, got {H}")
    if variant == "naive":
        return np.full(H, w[-1])
    if variant == "seasonal":
        if w.size < period:
            raise ValueError(
                f"seasonal persistence needs >= {period} observations, got {w.size}")
        if H > period:
            raise ValueError(
                f"seasonal persistence supports H <= {period}, got {H}")
        return w[-period:][:H].copy()
    raise ValueError(f"unknown persistence variant '{variant}'")


def evaluate_persistence(dataset: WindowDataset, variant: str = "naive",
                         scaler: "Scaler | None" = None, physical: bool = False,
                         period: int = 24) -> MetricReport:
    """Score a persistence rule on the same windows a model would see."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    if physical and scaler is None:
        raise ValueError("physical units require the scaler the data was "
                         "standardized with")
    rows = []
    for i in range(len(dataset)):
        load = dataset.inputs[i, :, 0]
        pred = persistence_baseline(load, dataset.H, variant, period)
        target = dataset.targets[i]
        if physical:
            pred = _to_physical(pred, scaler)
            target = _to_physical(target, scaler)
        rows.append((dataset.station_ids[i], pred, target))
    return _aggregate(rows, "kwh" if physical else "standardized")


# ---------------------------------------------------------------------------
# transfer bundle


@dataclass
class TransferData:
    """Window datasets for the two-phase protocol, sharing one scaler."""

    source_train: WindowDataset
    target_train: WindowDataset
    target_eval: WindowDataset
    scaler: "Scaler | None" = None


def _filter_windows(ds: WindowDataset, mask: np.ndarray) -> WindowDataset:
    idx = np.flatnonzero(mask)
    return WindowDataset(ds.inputs[idx], ds.targets[idx], ds.L_x, ds.H,
                         [ds.station_ids[i] for i in idx], ds.t_starts[idx])


def _empty_like(L_x: int, H: int, c: int) -> WindowDataset:
    return WindowDataset(np.zeros((0, L_x, c)), np.zeros((0, H)), L_x, H, [],
                         np.zeros(0))


def _concat_or_empty(parts, L_x, H, c):
    parts = [p for p in parts if len(p)]
    if not parts:
        return _empty_like(L_x, H, c)
    return concat_datasets(parts)


def build_transfer_data(series_map: dict, split, L_x: int, H: int,
                        stride: int = 1, calendar: bool = True) -> TransferData:
    """Windows for pre-training, adaptation, and held-out evaluation.

    The scaler is fit on source-station channels only, then applied
    everywhere. Adaptation windows lie entirely before the cutoff;
    evaluation windows forecast points at or after it (their input
    context may straddle the boundary, as it would in deployment).
    """
    src_feats = np.vstack([series_map[s].channels(calendar=calendar)
                           for s in split.source_ids])
    scaler = fit_scaler(src_feats)
    source = concat_datasets(
        [make_windows(series_map[s], L_x, H, stride, calendar, scaler)
         for s in split.source_ids])
    tune_parts, eval_parts = [], []
    for sid in split.target_ids:
        series = series_map[sid]
        full = make_windows(series, L_x, H, stride, calendar, scaler)
        if len(full) == 0:
            continue
        horizon_start = full.t_starts + L_x * series.granularity
        window_end = full.t_starts + (L_x + H) * series.granularity
        tune_parts.append(_filter_windows(full, window_end <= split.target_cutoff))
        eval_parts.append(_filter_windows(full, horizon_start >= split.target_cutoff))
    c = source.channels
    return TransferData(source,
                        _concat_or_empty(tune_parts, L_x, H, c),
                        _concat_or_empty(eval_parts, L_x, H, c),
                        scaler)


# ---------------------------------------------------------------------------
# ablation harness


@dataclass(frozen=True)
class AblationRow:
    variant: str
    mae_mean: float
    mae_std: float
    mse_mean: float
    mse_std: float
    n_seeds: int


def _train_and_eval(config: ModelConfig, do_pretrain: bool, data: TransferData,
                    seed: int, pre_plan: TrainPlan, tune_plan: TrainPlan):
    model = build_model(config, seed)
    if do_pretrain:
        pretrain(model, data.source_train, pre_plan, seed=seed)
    finetune(model, data.target_train, tune_plan, seed=seed)
    report = evaluate_model(model, data.target_eval, data.scaler)
    return report, model


def run_ablations(base_config: ModelConfig, data: TransferData, seeds,
                  pre_plan: "TrainPlan | None" = None,
                  tune_plan: "TrainPlan | None" = None) -> list:
    """Train and score every variant for every seed; mean +- std rows."""
    seeds = tuple(seeds)
    if not seeds:
        raise ValueError("need at least one seed")
    if pre_plan is None:
        pre_plan = pretrain_plan()
    if tune_plan is None:
        tune_plan = finetune_plan("full", pretrain_lr=pre_plan.lr)
    rows = []
    for variant in ABLATION_VARIANTS:
        if variant == "full":
            config, do_pre = base_config, True
        else:
            config, do_pre = ablation_variant(base_config,
                                              variant.removeprefix("no_"))
        maes, mses = [], []
        for seed in seeds:
            report, _ = _train_and_eval(config, do_pre, data, seed,
                                        pre_plan, tune_plan)
            maes.append(report.mae)
            mses.append(report.mse)
        rows.append(AblationRow(
            variant,
            float(np.mean(maes)), float(np.std(maes)),
            float(np.mean(mses)), float(np.std(mses)),
            len(seeds)))
    return rows


def ablation_csv(rows) -> str:
    lines = ["variant,mae_mean,mae_std,mse_mean,mse_std,n_seeds"]
    for r in rows:
        lines.append(f"{r.variant},{r.mae_mean!r},{r.mae_std!r},"
                     f"{r.mse_mean!r},{r.mse_std!r},{r.n_seeds}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# hyperparameter sweep


@dataclass(frozen=True)
class SweepSpec:
    param: str
    values: tuple
    base: ModelConfig
    seeds: tuple = (0, 1, 2)

    def __post_init__(self):
        if self.param not in SWEEP_PARAMS:
            raise ValueError(
                f"sweep parameter must be one of {SWEEP_PARAMS}, got {self.param!r}")
        if not self.values:
            raise ValueError("sweep needs at least one value")
        if not self.seeds:
            raise ValueError("sweep needs at least one seed")
        object.__setattr__(self, "values", tuple(self.values))
        object.__setattr__(self, "seeds", tuple(self.seeds))


@dataclass(frozen=True)
class SweepCell:
    param: str
    value: int
    seed: int
    mae: "float | None"
    mse: "float | None"
    note: str = ""


def sweep_config(base: ModelConfig, param: str, value: int) -> ModelConfig:
    """Base config with one knob turned; the feed-forward width tracks d."""
    kwargs = {param: value}
    if param == "d":
        kwargs["d_ff"] = None  # recomputed as 8*d
    return replace(base, **kwargs)


def run_sweep(spec: SweepSpec, data: TransferData,
              pre_plan: "TrainPlan | None" = None,
              tune_plan: "TrainPlan | None" = None) -> list:
    """One trained model per (value, seed); invalid values become
    skipped rows carrying the reason."""
    if pre_plan is None:
        pre_plan = pretrain_plan()
    if tune_plan is None:
        tune_plan = finetune_plan("full", pretrain_lr=pre_plan.lr)
    cells = []
    for value in spec.values:
        try:
            config = sweep_config(spec.base, spec.param, value)
        except ValueError as exc:
            for seed in spec.seeds:
                cells.append(SweepCell(spec.param, value, seed, None, None,
                                       f"skipped: {exc}"))
            continue
        for seed in spec.seeds:
            report, _ = _train_and_eval(config, True, data, seed,
                                        pre_plan, tune_plan)
            cells.append(SweepCell(spec.param, value, seed,
                                   report.mae, report.mse))
    return cells


def sweep_csv(cells) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["param", "value", "seed", "mae", "mse", "note"])
    for c in cells:
        writer.writerow([c.param, c.value, c.seed,
                         "" if c.mae is None else repr(c.mae),
                         "" if c.mse is None else repr(c.mse),
                         c.note])
    return buf.getvalue()


def parse_sweep_csv(text: str) -> list:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header != ["param", "value", "seed", "mae", "mse", "note"]:
        raise ValueError(f"unexpected sweep CSV header: {header}")
    cells = []
    for row in reader:
        if not row:
            continue
        param, value, seed, mae_s, mse_s, note = row
        cells.append(SweepCell(param, int(value), int(seed),
                               None if mae_s == "" else float(mae_s),
                               None if mse_s == "" else float(mse_s),
                               note))
    return cells


# ---------------------------------------------------------------------------
# plain-text tables


def format_table(header, rows) -> str:
    """Align columns with two-space gutters; header gets a dashed rule."""
    cells = [[str(c) for c in header]] + [[str(c) for c in row] for row in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(header))]
    lines = []
    for i, row in enumerate(cells):
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def report_text(report: MetricReport, label: str = "overall") -> str:
    rows = [(label, f"{report.mae:.6f}", f"{report.mse:.6f}",
             report.n_samples)]
    for sid, sub in report.per_station.items():
        rows.append((sid, f"{sub.mae:.6f}", f"{sub.mse:.6f}", sub.n_samples))
    return format_table((f"scope ({report.units})", "mae", "mse", "windows"),
                        rows)


def ablation_text(rows) -> str:
    body = [(r.variant, f"{r.mae_mean:.6f}", f"{r.mae_std:.6f}",
             f"{r.mse_mean:.6f}", f"{r.mse_std:.6f}", r.n_seeds)
            for r in rows]
    return format_table(
        ("variant", "mae_mean", "mae_std", "mse_mean", "mse_std", "seeds"),
        body)
