"""Load forecasting for charging stations: mixer fusion, sparse attention,
spline output head, and a two-stage transfer protocol."""

__version__ = "0.1.0"

from .data import (
    LoadSeries,
    Scaler,
    SynthConfig,
    WindowDataset,
    aggregate_load,
    fit_scaler,
    make_windows,
    parse_sessions,
    split_stations,
    synth_generate,
)
from .evaluation import (
    MetricReport,
    SweepSpec,
    TransferData,
    build_transfer_data,
    evaluate_model,
    evaluate_persistence,
    mae,
    mse,
    run_ablations,
    run_sweep,
)
from .model import MixerInformerKan, ModelConfig, build_model
from .training import (
    TrainPlan,
    apply_checkpoint,
    finetune,
    finetune_plan,
    load_checkpoint,
    model_from_checkpoint,
    pretrain,
    pretrain_plan,
    save_checkpoint,
)

__all__ = [
    "__version__",
    "LoadSeries", "Scaler", "SynthConfig", "WindowDataset",
    "aggregate_load", "fit_scaler", "make_windows", "parse_sessions",
    "split_stations", "synth_generate",
    "MetricReport", "SweepSpec", "TransferData", "build_transfer_data",
    "evaluate_model", "evaluate_persistence", "mae", "mse",
    "run_ablations", "run_sweep",
    "MixerInformerKan", "ModelConfig", "build_model",
    "TrainPlan", "apply_checkpoint", "finetune", "finetune_plan",
    "load_checkpoint", "model_from_checkpoint", "pretrain",
    "pretrain_plan", "save_checkpoint",
]
