"""Command line front end.

Subcommands mirror the workflow: prepare -> pretrain -> finetune ->
predict / evaluate, plus ablate and sweep for studies. Every command
writes its artifacts (delimited files, checkpoints, rendered figures,
a run.json manifest) into ``<out>/<command>/``, built in a temp
directory and swapped in atomically so a failed run never leaves
partial output behind.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import platform
import shutil
import sys
from collections import Counter

import numpy as np

from . import __version__
from .config import ENV_CONFIG, RunConfig, load_config
from .data import (
    DAY_S,
    SynthConfig,
    aggregate_load,
    format_timestamp,
    parse_sessions,
    split_stations,
    synth_generate,
    export_series_csv,
)
from .evaluation import (
    SWEEP_PARAMS,
    SweepSpec,
    ablation_csv,
    ablation_text,
    build_transfer_data,
    evaluate_model,
    evaluate_persistence,
    format_table,
    report_text,
    run_ablations,
    run_sweep,
    sweep_csv,
)
from .model import ModelConfig, build_model
from .report import (
    plot_ablation,
    plot_forecast_overlay,
    plot_loss_history,
    plot_metric_bars,
    plot_sweep,
)
from .store import DatasetError, load_dataset, save_dataset
from .training import (
    CheckpointError,
    finetune,
    finetune_plan,
    history_to_csv,
    load_checkpoint,
    model_from_checkpoint,
    pretrain,
    save_checkpoint,
)

STRATEGIES = ("freeze", "full", "small_batch")


class CliError(Exception):
    """User-facing failure; the message becomes the stderr line."""


# ---------------------------------------------------------------------------
# shared plumbing


def _parse_int_list(text: str, flag: str) -> tuple:
    try:
        values = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise CliError(f"{flag} expects comma-separated integers, got {text!r}")
    if not values:
        raise CliError(f"{flag} expects at least one integer")
    return values


def _config_hash(cfg: RunConfig) -> str:
    payload = {
        "data": dataclasses.asdict(cfg.data),
        "model": cfg.model,
        "pretrain": dataclasses.asdict(cfg.pretrain),
        "finetune": dataclasses.asdict(cfg.finetune),
        "seed": cfg.seed,
    }
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _write_manifest(outdir: str, command: str, cfg: RunConfig,
                    artifacts: list) -> None:
    manifest = {
        "command": command,
        "config_hash": _config_hash(cfg),
        "seed": cfg.seed,
        "out": cfg.out,
        "versions": {
            "chargecast": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
        "artifacts": sorted(artifacts),
    }
    with open(os.path.join(outdir, "run.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _dataset_path(cfg: RunConfig) -> str:
    return os.path.join(cfg.out, "prepare", "dataset.bin")


def _load_bundle(cfg: RunConfig):
    path = _dataset_path(cfg)
    if not os.path.isfile(path):
        raise CliError(f"no prepared dataset at {path}; "
                       "run 'chargecast prepare' first")
    return load_dataset(path)


def _bundle_channels(data) -> int:
    for ds in (data.source_train, data.target_train, data.target_eval):
        if len(ds):
            return ds.channels
    raise CliError("prepared dataset holds no windows in any split; "
                   "regenerate it with more history or a smaller L_x/H")


def _model_config(cfg: RunConfig, data) -> ModelConfig:
    geometry = data.source_train
    try:
        return ModelConfig(L_x=geometry.L_x, H=geometry.H,
                           C=_bundle_channels(data), **cfg.model)
    except TypeError as exc:
        raise CliError(f"bad [model] settings: {exc}")


def _phase_plan(cfg: RunConfig, phase: str):
    """The configured plan, with the model's KAN sparsity weight wired in
    when the training section does not pin one itself."""
    plan = getattr(cfg, phase)
    lam = cfg.model.get("sparsity_lambda", 0.0)
    if lam and not cfg.explicitly_set(phase, "kan_sparsity"):
        plan = dataclasses.replace(plan, kan_sparsity=lam)
    return plan


def _default_checkpoint(cfg: RunConfig, phase: str) -> str:
    return os.path.join(cfg.out, phase, "model.ckpt")


def _load_model(cfg: RunConfig, path: "str | None", phase: str):
    path = path or _default_checkpoint(cfg, phase)
    if not os.path.isfile(path):
        raise CliError(f"no checkpoint at {path}; run 'chargecast {phase}' "
                       "first or pass --checkpoint")
    ckpt = load_checkpoint(path)
    return model_from_checkpoint(ckpt), ckpt


def _float_cell(value) -> str:
    return repr(float(value))


# ---------------------------------------------------------------------------
# prepare


def _build_series(cfg: RunConfig) -> tuple:
    d = cfg.data
    if d.sessions:
        if not os.path.isfile(d.sessions):
            raise CliError(f"sessions file not found: {d.sessions}")
        with open(d.sessions, "r", encoding="utf-8", newline="") as fh:
            records = parse_sessions(fh, d.column_map())
        series_map = aggregate_load(records, d.granularity)
        origin = f"sessions:{os.path.basename(d.sessions)}"
    elif d.synth:
        synth = SynthConfig(n_stations=d.synth_stations, days=d.synth_days,
                            granularity=d.granularity, start=d.synth_start)
        series_map = synth_generate(synth, seed=cfg.seed)
        origin = "synth"
    else:
        raise CliError("no input data configured: set sessions= or "
                       "synth=true in the [data] section")
    if not series_map:
        raise CliError("no usable stations found in the input data")
    return series_map, origin


def _station_rows(series_map, split, data) -> list:
    counts = {name: Counter(ds.station_ids) for name, ds in (
        ("train", data.source_train),
        ("tune", data.target_train),
        ("eval", data.target_eval))}
    rows = []
    for sid in sorted(series_map):
        if sid in split.source_ids:
            role = "source"
        elif sid in split.target_ids:
            role = "target"
        else:
            role = "dropped"
        rows.append((sid, format_timestamp(series_map[sid].t0), role,
                     counts["train"][sid], counts["tune"][sid],
                     counts["eval"][sid]))
    return rows


def cmd_prepare(cfg: RunConfig, args, outdir: str, say) -> list:
    d = cfg.data
    series_map, origin = _build_series(cfg)
    split, warnings = split_stations(series_map, d.n_source, d.cutoff)
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    data = build_transfer_data(series_map, split, d.L_x, d.H,
                               stride=d.stride, calendar=d.calendar)
    extra = {"origin": origin, "granularity": d.granularity,
             "calendar": d.calendar, "stride": d.stride,
             "cutoff": d.cutoff, "seed": cfg.seed}
    save_dataset(os.path.join(outdir, "dataset.bin"), data, extra)
    export_series_csv(series_map, os.path.join(outdir, "series.csv"))

    header = ("station", "first_activity", "role", "train_windows",
              "tune_windows", "eval_windows")
    rows = _station_rows(series_map, split, data)
    with open(os.path.join(outdir, "stations.csv"), "w", encoding="utf-8",
              newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    say(format_table(header, rows))
    say(f"prepared {len(split.source_ids)} source / "
        f"{len(split.target_ids)} target stations: "
        f"{len(data.source_train)} train, {len(data.target_train)} tune, "
        f"{len(data.target_eval)} eval windows")
    return ["dataset.bin", "series.csv", "stations.csv"]


# ---------------------------------------------------------------------------
# training commands


def _train_artifacts(model, result, cfg: RunConfig, outdir: str,
                     phase: str, scaler) -> list:
    save_checkpoint(model, {"phase": phase, "epoch": result.best_epoch,
                            "seed": cfg.seed},
                    os.path.join(outdir, "model.ckpt"), scaler=scaler)
    with open(os.path.join(outdir, "loss_history.csv"), "w",
              encoding="utf-8", newline="") as fh:
        fh.write(history_to_csv(result.history))
    plot_loss_history(result.history, os.path.join(outdir, "loss_curve.png"))
    return ["model.ckpt", "loss_history.csv", "loss_curve.png"]


def _train_summary(result, phase: str) -> str:
    tail = " (stopped early)" if result.stopped_early else ""
    return (f"{phase}: {len(result.history)} epoch(s), best val mse "
            f"{result.best_val:.6f} at epoch {result.best_epoch}{tail}")


def cmd_pretrain(cfg: RunConfig, args, outdir: str, say) -> list:
    data, _ = _load_bundle(cfg)
    model = build_model(_model_config(cfg, data), seed=cfg.seed)
    plan = _phase_plan(cfg, "pretrain")
    result = pretrain(model, data.source_train, plan, seed=cfg.seed)
    for w in result.warnings:
        print(f"warning: {w}", file=sys.stderr)
    say(_train_summary(result, "pretrain"))
    return _train_artifacts(model, result, cfg, outdir, "pretrain",
                            data.scaler)


def cmd_finetune(cfg: RunConfig, args, outdir: str, say) -> list:
    data, _ = _load_bundle(cfg)
    if args.from_scratch:
        model = build_model(_model_config(cfg, data), seed=cfg.seed)
    else:
        path = args.checkpoint or _default_checkpoint(cfg, "pretrain")
        if not os.path.isfile(path):
            raise CliError(
                f"no pretrained checkpoint at {path}; run 'chargecast "
                "pretrain' first, pass --checkpoint, or use --from-scratch")
        model = model_from_checkpoint(load_checkpoint(path))
    plan = _phase_plan(cfg, "finetune")
    result = finetune(model, data.target_train, plan, seed=cfg.seed)
    for w in result.warnings:
        print(f"warning: {w}", file=sys.stderr)
    say(_train_summary(result, f"finetune[{plan.strategy}]"))
    return _train_artifacts(model, result, cfg, outdir, "finetune",
                            data.scaler)


# ---------------------------------------------------------------------------
# predict / evaluate


def _pick_scaler(ckpt, data):
    return ckpt.scaler if ckpt.scaler is not None else data.scaler


def cmd_predict(cfg: RunConfig, args, outdir: str, say) -> list:
    data, extra = _load_bundle(cfg)
    model, ckpt = _load_model(cfg, args.checkpoint, "finetune")
    eval_ds = data.target_eval
    if len(eval_ds) == 0:
        raise CliError("no evaluation windows for the target stations; "
                       "re-run prepare with more post-cutoff history")
    scaler = _pick_scaler(ckpt, data)
    if scaler is None:
        raise CliError("no scaler stored with the dataset or checkpoint; "
                       "cannot convert forecasts to kWh")
    granularity = int(extra.get("granularity", 3600))
    L_x = eval_ds.L_x
    path = os.path.join(outdir, "forecasts.csv")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["station", "timestamp", "forecast_kwh"])
        for i in range(len(eval_ds)):
            pred = np.asarray(model.forward(eval_ds.inputs[i]).data,
                              dtype=np.float64).reshape(-1)
            kwh = pred * scaler.std[0] + scaler.mean[0]
            t0 = float(eval_ds.t_starts[i])
            for h in range(eval_ds.H):
                stamp = format_timestamp(t0 + (L_x + h) * granularity)
                w.writerow([eval_ds.station_ids[i], stamp,
                            _float_cell(kwh[h])])
    say(f"wrote {len(eval_ds) * eval_ds.H} forecast rows for "
        f"{len(set(eval_ds.station_ids))} station(s)")
    return ["forecasts.csv"]


def _metric_rows(subject: str, report) -> list:
    rows = [(subject, "overall", report.units, _float_cell(report.mae),
             _float_cell(report.mse), report.n_samples)]
    for sid, sub in report.per_station.items():
        rows.append((subject, sid, sub.units, _float_cell(sub.mae),
                     _float_cell(sub.mse), sub.n_samples))
    return rows


def cmd_evaluate(cfg: RunConfig, args, outdir: str, say) -> list:
    data, extra = _load_bundle(cfg)
    model, ckpt = _load_model(cfg, args.checkpoint, "finetune")
    eval_ds = data.target_eval
    if len(eval_ds) == 0:
        raise CliError("no evaluation windows for the target stations; "
                       "re-run prepare with more post-cutoff history")
    scaler = _pick_scaler(ckpt, data)
    granularity = int(extra.get("granularity", 3600))
    period = max(1, DAY_S // granularity)

    subjects = [("model", lambda phys: evaluate_model(
        model, eval_ds, scaler, physical=phys))]
    subjects.append(("persistence_naive", lambda phys: evaluate_persistence(
        eval_ds, "naive", scaler, physical=phys)))
    if eval_ds.L_x >= period and eval_ds.H <= period:
        subjects.append(
            ("persistence_seasonal", lambda phys: evaluate_persistence(
                eval_ds, "seasonal", scaler, physical=phys, period=period)))

    rows, bar_rows = [], []
    for name, run in subjects:
        std_report = run(False)
        rows.extend(_metric_rows(name, std_report))
        bar_rows.append((name, std_report.mae, std_report.mse))
        say(f"[{name}]")
        say(report_text(std_report))
        if scaler is not None:
            rows.extend(_metric_rows(name, run(True)))

    with open(os.path.join(outdir, "metrics.csv"), "w", encoding="utf-8",
              newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject", "scope", "units", "mae", "mse", "windows"])
        w.writerows(rows)

    plot_metric_bars(bar_rows, os.path.join(outdir, "metrics.png"),
                     units="standardized")
    samples = []
    for i in range(min(4, len(eval_ds))):
        pred = np.asarray(model.forward(eval_ds.inputs[i]).data,
                          dtype=np.float64).reshape(-1)
        target = np.asarray(eval_ds.targets[i], dtype=np.float64)
        if scaler is not None:
            pred = pred * scaler.std[0] + scaler.mean[0]
            target = target * scaler.std[0] + scaler.mean[0]
        samples.append((eval_ds.station_ids[i], target, pred))
    plot_forecast_overlay(samples, os.path.join(outdir,
                                                "forecast_overlay.png"))
    return ["metrics.csv", "metrics.png", "forecast_overlay.png"]


# ---------------------------------------------------------------------------
# studies


def cmd_ablate(cfg: RunConfig, args, outdir: str, say) -> list:
    seeds = _parse_int_list(args.seeds, "--seeds")
    data, _ = _load_bundle(cfg)
    base = _model_config(cfg, data)
    rows = run_ablations(base, data, seeds,
                         pre_plan=_phase_plan(cfg, "pretrain"),
                         tune_plan=_phase_plan(cfg, "finetune"))
    with open(os.path.join(outdir, "ablation.csv"), "w", encoding="utf-8",
              newline="") as fh:
        fh.write(ablation_csv(rows))
    plot_ablation(rows, os.path.join(outdir, "ablation.png"))
    say(ablation_text(rows))
    return ["ablation.csv", "ablation.png"]


def cmd_sweep(cfg: RunConfig, args, outdir: str, say) -> list:
    seeds = _parse_int_list(args.seeds, "--seeds")
    values = _parse_int_list(args.values, "--values")
    data, _ = _load_bundle(cfg)
    base = _model_config(cfg, data)
    spec = SweepSpec(param=args.param, values=values, base=base, seeds=seeds)
    cells = run_sweep(spec, data,
                      pre_plan=_phase_plan(cfg, "pretrain"),
                      tune_plan=_phase_plan(cfg, "finetune"))
    csv_name = f"sweep_{args.param}.csv"
    with open(os.path.join(outdir, csv_name), "w", encoding="utf-8",
              newline="") as fh:
        fh.write(sweep_csv(cells))
    artifacts = [csv_name]
    if any(not c.note for c in cells):
        png_name = f"sweep_{args.param}.png"
        plot_sweep(cells, os.path.join(outdir, png_name))
        artifacts.append(png_name)
    body = [(c.param, c.value, c.seed,
             "" if c.mae is None else f"{c.mae:.6f}",
             "" if c.mse is None else f"{c.mse:.6f}", c.note)
            for c in cells]
    say(format_table(("param", "value", "seed", "mae", "mse", "note"), body))
    return artifacts


# ---------------------------------------------------------------------------
# argument parsing and dispatch


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH",
                        help="INI config file (default: $" + ENV_CONFIG + ")")
    common.add_argument("--seed", type=int, metavar="N",
                        help="override the run seed")
    common.add_argument("--out", metavar="DIR",
                        help="override the output directory")
    common.add_argument("--quiet", action="store_true",
                        help="suppress stdout reporting")

    parser = argparse.ArgumentParser(
        prog="chargecast",
        description="EV charging load forecasting: feature-mixing encoder, "
                    "sparse-attention temporal core, spline forecast head, "
                    "with two-stage transfer across stations.")
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="command")

    sub.add_parser("prepare", parents=[common],
                   help="build the window dataset from sessions or synthetic "
                        "load")
    sub.add_parser("pretrain", parents=[common],
                   help="train a fresh model on the source stations")

    p = sub.add_parser("finetune", parents=[common],
                       help="adapt a pretrained model to the target stations")
    p.add_argument("--strategy", choices=STRATEGIES,
                   help="adaptation recipe (overrides the config)")
    p.add_argument("--checkpoint", metavar="PATH",
                   help="pretrained checkpoint to start from")
    p.add_argument("--from-scratch", action="store_true",
                   help="skip the pretrained weights and adapt a random "
                        "initialization")

    p = sub.add_parser("predict", parents=[common],
                       help="write kWh forecasts for the evaluation windows")
    p.add_argument("--checkpoint", metavar="PATH",
                   help="model checkpoint (default: <out>/finetune/model.ckpt)")

    p = sub.add_parser("evaluate", parents=[common],
                       help="score the model against persistence baselines")
    p.add_argument("--checkpoint", metavar="PATH",
                   help="model checkpoint (default: <out>/finetune/model.ckpt)")

    p = sub.add_parser("ablate", parents=[common],
                       help="re-train with components removed and compare")
    p.add_argument("--seeds", default="0,1,2", metavar="LIST",
                   help="comma-separated seeds (default 0,1,2)")

    p = sub.add_parser("sweep", parents=[common],
                       help="grid over one capacity knob")
    p.add_argument("--param", required=True, choices=SWEEP_PARAMS,
                   help="which knob to sweep")
    p.add_argument("--values", required=True, metavar="LIST",
                   help="comma-separated values to try")
    p.add_argument("--seeds", default="0,1,2", metavar="LIST",
                   help="comma-separated seeds (default 0,1,2)")
    return parser


_HANDLERS = {
    "prepare": cmd_prepare,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
}


def _apply_flags(cfg: RunConfig, args) -> RunConfig:
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    if getattr(args, "strategy", None):
        overrides = dict(cfg.raw.get("finetune", {}))
        overrides.pop("strategy", None)
        cfg.finetune = finetune_plan(args.strategy,
                                     pretrain_lr=cfg.pretrain.lr,
                                     **overrides)
    return cfg


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)

    def say(text: str) -> None:
        if not args.quiet:
            print(text)

    tmp_dir = None
    try:
        cfg = _apply_flags(load_config(args.config), args)
        final_dir = os.path.join(cfg.out, args.command)
        tmp_dir = os.path.join(cfg.out, f".tmp-{args.command}")
        if os.path.isdir(tmp_dir):
            shutil.rmtree(tmp_dir)
        os.makedirs(tmp_dir)
        artifacts = _HANDLERS[args.command](cfg, args, tmp_dir, say)
        _write_manifest(tmp_dir, args.command, cfg, artifacts)
        if os.path.isdir(final_dir):
            shutil.rmtree(final_dir)
        os.replace(tmp_dir, final_dir)
        tmp_dir = None
        say(f"artifacts in {final_dir}")
        return 0
    except (CliError, DatasetError, CheckpointError, ValueError,
            OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    finally:
        if tmp_dir is not None and os.path.isdir(tmp_dir):
            shutil.rmtree(tmp_dir, ignore_errors=True)


if __name__ == "__main__":
    sys.exit(main())
