"""Session ingestion, load aggregation, standardization, windowing, and the
source/target station split.

All functions are pure over immutable inputs; nothing here holds shared
mutable state, so the module is safe to call from multiple threads.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Iterable

import numpy as np

from .rng import stream

DAY_S = 86400
WEEK_S = 604800

DEFAULT_COLUMNS = {
    "station": "station",
    "start": "start_time",
    "duration": "duration_s",
    "energy": "energy_kwh",
}

# load + gap flag + hour sin/cos + 7 day-of-week flags
CALENDAR_CHANNELS = 11
BASE_CHANNELS = 2


def parse_timestamp(text: str) -> float:
    """ISO-8601 string to UTC epoch seconds. Naive times are taken as UTC."""
    t = text.strip()
    if t.endswith("Z") or t.endswith("z"):
        t = t[:-1] + "+00:00"
    dt = datetime.fromisoformat(t)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def format_timestamp(epoch: float) -> str:
    dt = datetime.fromtimestamp(float(epoch), tz=timezone.utc)
    return dt.strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass(frozen=True)
class SessionRecord:
    station_id: str
    start_time: float  # UTC epoch seconds
    duration: float  # seconds, >= 0
    energy: float  # kWh, >= 0


@dataclass
class LoadSeries:
    """Contiguous per-station load buckets plus a missing-data flag channel."""

    station_id: str
    t0: float  # epoch seconds of first bucket start
    granularity: int
    values: np.ndarray  # [T] load per bucket
    gap: np.ndarray = field(default=None)  # [T] 1.0 where no session touched the bucket

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.gap is None:
            self.gap = np.zeros_like(self.values)
        else:
            self.gap = np.asarray(self.gap, dtype=np.float64)
        if self.gap.shape != self.values.shape:
            raise ValueError("gap channel length differs from values")

    def __len__(self) -> int:
        return int(self.values.shape[0])

    def times(self) -> np.ndarray:
        return self.t0 + self.granularity * np.arange(len(self), dtype=np.float64)

    def channels(self, calendar: bool = True) -> np.ndarray:
        """[T, C] feature matrix: load, gap flag, optional calendar channels."""
        cols = [self.values, self.gap]
        if calendar:
            t = self.times()
            day_frac = (t % DAY_S) / DAY_S
            cols.append(np.sin(2.0 * np.pi * day_frac))
            cols.append(np.cos(2.0 * np.pi * day_frac))
            # epoch day 0 (1970-01-01) was a Thursday; index Monday as 0
            dow = (np.floor_divide(t, DAY_S).astype(np.int64) + 3) % 7
            onehot = np.zeros((len(self), 7), dtype=np.float64)
            onehot[np.arange(len(self)), dow] = 1.0
            return np.column_stack(cols + [onehot])
        return np.column_stack(cols)

    def slice_time(self, start: float | None = None, end: float | None = None) -> "LoadSeries":
        """Buckets whose start falls in [start, end)."""
        t = self.times()
        mask = np.ones(len(self), dtype=bool)
        if start is not None:
            mask &= t >= start
        if end is not None:
            mask &= t < end
        idx = np.flatnonzero(mask)
        if idx.size == 0:
            return LoadSeries(self.station_id, self.t0, self.granularity,
                              np.zeros(0), np.zeros(0))
        first, last = int(idx[0]), int(idx[-1])
        return LoadSeries(self.station_id, float(t[first]), self.granularity,
                          self.values[first:last + 1].copy(),
                          self.gap[first:last + 1].copy())


@dataclass
class Scaler:
    """Per-channel affine standardizer: (x - mean) / std."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.std = np.asarray(self.std, dtype=np.float64).reshape(-1)
        if self.mean.shape != self.std.shape:
            raise ValueError("scaler mean/std length mismatch")
        if np.any(self.std <= 0):
            raise ValueError("scaler std must be positive")


@dataclass
class WindowDataset:
    """Supervised pairs: inputs [N, L_x, C], targets [N, H].

    ``station_ids`` and ``t_starts`` carry provenance for per-station
    reporting and chronological validation splits.
    """

    inputs: np.ndarray
    targets: np.ndarray
    L_x: int
    H: int
    station_ids: list
    t_starts: np.ndarray

    def __len__(self) -> int:
        return int(self.inputs.shape[0])

    @property
    def channels(self) -> int:
        return int(self.inputs.shape[2]) if len(self) else 0


@dataclass
class StationSplit:
    source_ids: list
    target_ids: list
    target_cutoff: float


@dataclass
class SynthConfig:
    """Knobs for the synthetic session-free load generator."""

    n_stations: int = 26
    days: int = 90
    granularity: int = 3600
    start: str = "2022-11-01T00:00Z"
    stagger_s: int = DAY_S  # successive stations begin this much later
    base: float = 3.0
    daily_amp: tuple = (1.0, 2.0)
    weekly_amp: tuple = (0.3, 0.8)
    phase_jitter: float = 6.0  # hours, uniform +/- for the daily term
    scale_jitter: float = 0.2  # multiplicative distortion, uniform 1 +/- this
    shift_jitter: float = 0.5  # additive distortion, uniform 0..this
    noise_sigma: float = 0.25


# ---------------------------------------------------------------------------
# parsing


def _as_text_lines(source) -> Iterable[str]:
    if isinstance(source, (str, bytes)) and source and b"\n" not in (
            source if isinstance(source, bytes) else source.encode()):
        # looks like a path
        return open(source, "r", encoding="utf-8", newline="")
    if isinstance(source, bytes):
        return io.StringIO(source.decode("utf-8"))
    if isinstance(source, str):
        return io.StringIO(source)
    if hasattr(source, "read"):
        probe = source.read(0)
        if isinstance(probe, bytes):
            return io.TextIOWrapper(source, encoding="utf-8", newline="")
        return source
    return source


def parse_sessions(source, columns: dict | None = None):
    """Read session rows from CSV.

    Returns (records, warnings); each warning names the 1-based line it
    came from. A header missing a required column is a hard error.
    ``columns`` remaps logical fields (station/start/duration/energy) to
    CSV column names; the duration column is optional.
    """
    colmap = dict(DEFAULT_COLUMNS)
    if columns:
        unknown = set(columns) - set(colmap)
        if unknown:
            raise ValueError(f"unknown column-map keys: {sorted(unknown)}")
        colmap.update(columns)

    lines = _as_text_lines(source)
    reader = csv.reader(lines)
    try:
        header = next(reader)
    except StopIteration:
        raise ValueError("empty CSV: no header row") from None
    header = [h.strip() for h in header]
    pos = {}
    for role in ("station", "start", "energy"):
        name = colmap[role]
        if name not in header:
            raise ValueError(f"CSV header missing required column '{name}'")
        pos[role] = header.index(name)
    dur_col = colmap["duration"]
    pos["duration"] = header.index(dur_col) if dur_col in header else None

    records: list[SessionRecord] = []
    warnings: list[str] = []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) < len(header):
            warnings.append(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
            continue
        station = row[pos["station"]].strip()
        if not station:
            warnings.append(f"line {lineno}: empty station id")
            continue
        try:
            start = parse_timestamp(row[pos["start"]])
        except ValueError:
            warnings.append(f"line {lineno}: bad timestamp {row[pos['start']]!r}")
            continue
        if not math.isfinite(start):
            warnings.append(f"line {lineno}: non-finite timestamp")
            continue
        try:
            energy = float(row[pos["energy"]])
        except ValueError:
            warnings.append(f"line {lineno}: bad energy {row[pos['energy']]!r}")
            continue
        if not math.isfinite(energy) or energy < 0:
            warnings.append(f"line {lineno}: energy must be finite and >= 0, got {energy}")
            continue
        duration = 0.0
        if pos["duration"] is not None and row[pos["duration"]].strip():
            try:
                duration = float(row[pos["duration"]])
            except ValueError:
                warnings.append(f"line {lineno}: bad duration {row[pos['duration']]!r}")
                continue
        if not math.isfinite(duration) or duration < 0:
            warnings.append(f"line {lineno}: duration must be finite and >= 0, got {duration}")
            continue
        records.append(SessionRecord(station, start, duration, energy))
    return records, warnings


# ---------------------------------------------------------------------------
# aggregation


def aggregate_load(records, granularity: int = 3600) -> dict:
    """Distribute each session's energy over the buckets it overlaps.

    The share per bucket is proportional to overlapped time; zero-duration
    sessions deposit everything into their start bucket. Untouched buckets
    inside a station's active range read 0 with the gap flag set.
    """
    granularity = int(granularity)
    if granularity <= 0 or DAY_S % granularity != 0:
        raise ValueError(f"granularity must divide 86400, got {granularity}")
    by_station: dict[str, list[SessionRecord]] = {}
    for r in records:
        by_station.setdefault(r.station_id, []).append(r)

    out: dict[str, LoadSeries] = {}
    for sid in sorted(by_station):
        sess = by_station[sid]
        first = min(math.floor(r.start_time / granularity) for r in sess)
        last = first
        for r in sess:
            end = r.start_time + r.duration
            # end-exclusive: a session ending exactly on a boundary stays out
            # of the next bucket
            b = math.floor(end / granularity) if end > r.start_time else math.floor(r.start_time / granularity)
            if end > r.start_time and end == b * granularity:
                b -= 1
            last = max(last, b)
        n = last - first + 1
        values = np.zeros(n, dtype=np.float64)
        touched = np.zeros(n, dtype=bool)
        for r in sess:
            b0 = math.floor(r.start_time / granularity)
            if r.duration == 0:
                values[b0 - first] += r.energy
                touched[b0 - first] = True
                continue
            end = r.start_time + r.duration
            b1 = math.floor(end / granularity)
            if end == b1 * granularity:
                b1 -= 1
            for b in range(b0, b1 + 1):
                lo = max(r.start_time, b * granularity)
                hi = min(end, (b + 1) * granularity)
                values[b - first] += r.energy * (hi - lo) / r.duration
                touched[b - first] = True
        gap = (~touched).astype(np.float64)
        out[sid] = LoadSeries(sid, float(first * granularity), granularity, values, gap)
    return out


# ---------------------------------------------------------------------------
# standardization


def fit_scaler(x) -> Scaler:
    """Sample mean and population std per channel, std clamped to 1e-8."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ValueError(f"fit_scaler expects [N] or [N, C], got shape {arr.shape}")
    if arr.shape[0] < 2:
        raise ValueError("fit_scaler needs at least 2 samples per channel")
    mean = arr.mean(axis=0)
    std = np.maximum(arr.std(axis=0), 1e-8)
    return Scaler(mean, std)


def standardize(x, scaler: Scaler) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.shape[-1] != scaler.mean.shape[0]:
        raise ValueError(
            f"channel count {arr.shape[-1]} does not match scaler ({scaler.mean.shape[0]})")
    return (arr - scaler.mean) / scaler.std


def inverse_standardize(x_std, scaler: Scaler) -> np.ndarray:
    arr = np.asarray(x_std, dtype=np.float64)
    if arr.shape[-1] != scaler.mean.shape[0]:
        raise ValueError(
            f"channel count {arr.shape[-1]} does not match scaler ({scaler.mean.shape[0]})")
    return arr * scaler.std + scaler.mean


# ---------------------------------------------------------------------------
# windowing


def make_windows(series: LoadSeries, L_x: int, H: int, stride: int = 1,
                 calendar: bool = True, scaler: Scaler | None = None) -> WindowDataset:
    """Slide a [L_x in, H out] window at the given stride.

    Targets are the load channel. With a scaler, both inputs and targets
    come out in standardized units. A series shorter than L_x + H yields
    an empty dataset.
    """
    if L_x <= 0 or H <= 0 or stride <= 0:
        raise ValueError("L_x, H, stride must all be positive")
    chans = series.channels(calendar=calendar)
    if scaler is not None:
        chans = standardize(chans, scaler)
    n_total = chans.shape[0]
    count = (n_total - L_x - H) // stride + 1 if n_total >= L_x + H else 0
    c = chans.shape[1]
    inputs = np.zeros((count, L_x, c), dtype=np.float64)
    targets = np.zeros((count, H), dtype=np.float64)
    starts = np.zeros(count, dtype=np.float64)
    t = series.times()
    for w in range(count):
        i = w * stride
        inputs[w] = chans[i:i + L_x]
        targets[w] = chans[i + L_x:i + L_x + H, 0]
        starts[w] = t[i] if n_total else series.t0
    return WindowDataset(inputs, targets, L_x, H, [series.station_id] * count, starts)


def concat_datasets(parts: list) -> WindowDataset:
    parts = [p for p in parts if len(p)]
    if not parts:
        raise ValueError("no windows to concatenate")
    l_x, h = parts[0].L_x, parts[0].H
    for p in parts:
        if p.L_x != l_x or p.H != h:
            raise ValueError("window geometry differs between parts")
    ids = []
    for p in parts:
        ids.extend(p.station_ids)
    return WindowDataset(
        np.concatenate([p.inputs for p in parts], axis=0),
        np.concatenate([p.targets for p in parts], axis=0),
        l_x, h, ids,
        np.concatenate([p.t_starts for p in parts], axis=0))


def chronological_split(ds: WindowDataset, val_fraction: float = 0.1):
    """Order windows by start time (then station) and hold out the tail."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must be in (0, 1), got {val_fraction}")
    order = sorted(range(len(ds)), key=lambda i: (ds.t_starts[i], ds.station_ids[i]))
    n_val = max(1, int(round(len(ds) * val_fraction)))
    if n_val >= len(ds):
        raise ValueError("dataset too small to split")
    tr, va = order[:-n_val], order[-n_val:]

    def take(idx):
        return WindowDataset(ds.inputs[idx], ds.targets[idx], ds.L_x, ds.H,
                             [ds.station_ids[i] for i in idx],
                             ds.t_starts[idx])

    return take(tr), take(va)


# ---------------------------------------------------------------------------
# station split


def split_stations(series_map: dict, n_source: int, cutoff) -> tuple:
    """Order stations by first activity, take the first ``n_source`` as the
    source domain; the rest are targets whose history is cut at ``cutoff``
    (before: adaptation data, at/after: evaluation data).

    Returns (StationSplit, warnings). Stations with no data are dropped
    with a warning.
    """
    if isinstance(cutoff, str):
        cutoff = parse_timestamp(cutoff)
    warnings = []
    usable = []
    for sid, series in series_map.items():
        if len(series) == 0:
            warnings.append(f"station {sid}: no data, excluded from split")
            continue
        usable.append((series.t0, sid))
    usable.sort()
    if n_source >= len(usable):
        raise ValueError(
            f"n_source={n_source} must be smaller than usable station count {len(usable)}")
    ordered = [sid for _, sid in usable]
    split = StationSplit(ordered[:n_source], ordered[n_source:], float(cutoff))
    for sid in split.target_ids:
        if len(series_map[sid].slice_time(end=cutoff)) == 0:
            warnings.append(f"station {sid}: no data before cutoff, empty adaptation slice")
    return split, warnings


# ---------------------------------------------------------------------------
# synthetic data


def synth_generate(config: SynthConfig, seed: int) -> dict:
    """Deterministic per-seed synthetic load: daily + weekly sinusoids with
    station-specific affine distortion and clipped Gaussian noise.

    Stations start ``stagger_s`` apart so the first-activity ordering (and
    hence the source/target split) is reproducible.
    """
    t_start = parse_timestamp(config.start)
    n = config.days * DAY_S // config.granularity
    out = {}
    for i in range(config.n_stations):
        rng = stream(seed, f"synth/station{i:03d}")
        a_d = rng.uniform(*config.daily_amp)
        a_w = rng.uniform(*config.weekly_amp)
        ph_d = rng.uniform(-config.phase_jitter, config.phase_jitter) * 3600.0
        ph_w = rng.uniform(-config.phase_jitter, config.phase_jitter) * 3600.0
        scale = 1.0 + rng.uniform(-config.scale_jitter, config.scale_jitter)
        shift = rng.uniform(0.0, config.shift_jitter) if config.shift_jitter > 0 else 0.0
        t0 = t_start + i * config.stagger_s
        t = t0 + config.granularity * np.arange(n, dtype=np.float64)
        base = (config.base
                + a_d * np.sin(2.0 * np.pi * (t + ph_d) / DAY_S)
                + a_w * np.sin(2.0 * np.pi * (t + ph_w) / WEEK_S))
        load = scale * base + shift
        if config.noise_sigma > 0:
            load = load + rng.normal(0.0, config.noise_sigma, size=n)
        load = np.clip(load, 0.0, None)
        sid = f"st{i:03d}"
        out[sid] = LoadSeries(sid, t0, config.granularity, load)
    return out


# ---------------------------------------------------------------------------
# export


def export_series_csv(series_map: dict, path) -> None:
    """Write `station,timestamp,load` rows, stations sorted, time ascending."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["station", "timestamp", "load"])
        for sid in sorted(series_map):
            s = series_map[sid]
            for t, v in zip(s.times(), s.values):
                w.writerow([sid, format_timestamp(t), repr(float(v))])
