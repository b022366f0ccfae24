"""Config parsing, dataset bundle round trips, and command line flows."""

import json
import os

import numpy as np
import pytest

from chargecast.cli import main
from chargecast.config import (
    ENV_CONFIG,
    build_run_config,
    load_config,
    parse_config_text,
)
from chargecast.data import LoadSeries, split_stations
from chargecast.evaluation import build_transfer_data
from chargecast.store import DatasetError, load_dataset, save_dataset

CONFIG_TEXT = """
[run]
out = {out}
seed = 3

[data]
synth = true
synth_stations = 5
synth_days = 8
n_source = 3
cutoff = 2022-11-07T00:00:00Z
granularity = 3600
L_x = 24
H = 4
calendar = false

[model]
d = 8
n_heads = 2
r = 1
d_ff = 16
kan_grid = 4
kan_hidden = 4
dropout = 0.0

[pretrain]
epochs = 1
batch_size = 64
lr = 0.001

[finetune]
epochs = 1
batch_size = 64
"""


def write_config(dirpath, out_name="run_out", text=CONFIG_TEXT):
    path = os.path.join(dirpath, "cfg.ini")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text.format(out=os.path.join(dirpath, out_name)))
    return path


# ---------------------------------------------------------------------------
# config parsing


class TestConfig:
    def test_full_rig(self, tmp_path):
        path = write_config(str(tmp_path))
        cfg = load_config(path)
        assert cfg.seed == 3
        assert cfg.out.endswith("run_out")
        assert cfg.data.synth is True
        assert cfg.data.synth_stations == 5
        assert cfg.data.L_x == 24
        assert cfg.data.calendar is False
        assert cfg.model["d"] == 8
        assert cfg.model["dropout"] == 0.0
        assert cfg.pretrain.epochs == 1
        assert cfg.pretrain.lr == 0.001
        assert cfg.pretrain.phase == "pretrain"
        # full strategy divides the pretrain rate by ten
        assert cfg.finetune.lr == pytest.approx(0.0001)
        assert cfg.finetune.batch_size == 64
        assert cfg.finetune.patience == 3

    def test_defaults_without_file(self, monkeypatch):
        monkeypatch.delenv(ENV_CONFIG, raising=False)
        cfg = load_config(None)
        assert cfg.out == "runs/out"
        assert cfg.seed == 0
        assert cfg.data.L_x == 96
        assert cfg.data.H == 24
        assert cfg.data.n_source == 21
        assert cfg.data.synth_stations == 26

    def test_env_var_names_default_path(self, tmp_path, monkeypatch):
        path = write_config(str(tmp_path))
        monkeypatch.setenv(ENV_CONFIG, path)
        cfg = load_config(None)
        assert cfg.seed == 3

    def test_missing_file_is_an_error(self, tmp_path):
        ghost = str(tmp_path / "nope.ini")
        with pytest.raises(ValueError, match="nope.ini"):
            load_config(ghost)

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="learning_rate"):
            parse_config_text("[pretrain]\nlearning_rate = 0.1\n")

    def test_unknown_section_rejected(self):
        with pytest.raises(ValueError, match="trainer"):
            parse_config_text("[trainer]\nepochs = 2\n")

    def test_bad_bool_names_key(self):
        with pytest.raises(ValueError, match="synth"):
            parse_config_text("[data]\nsynth = sure\n")

    def test_patience_none_token(self):
        raw = parse_config_text("[finetune]\npatience = none\n")
        cfg = build_run_config(raw)
        assert cfg.finetune.patience is None

    def test_freeze_strategy_from_config(self):
        raw = parse_config_text("[finetune]\nstrategy = freeze\n")
        cfg = build_run_config(raw)
        assert cfg.finetune.strategy == "freeze"
        assert any(p.startswith("mixer.") for p in cfg.finetune.freeze_spec)

    def test_explicitly_set_tracks_sections(self):
        raw = parse_config_text("[pretrain]\nkan_sparsity = 0.5\n")
        cfg = build_run_config(raw)
        assert cfg.explicitly_set("pretrain", "kan_sparsity")
        assert not cfg.explicitly_set("finetune", "kan_sparsity")
        assert cfg.pretrain.kan_sparsity == 0.5


# ---------------------------------------------------------------------------
# dataset bundle


def two_station_bundle(L_x=8, H=2):
    hours = 72
    t = np.arange(hours, dtype=np.float64)
    series = {}
    for k, sid in enumerate(("alpha", "bravo", "carol")):
        load = 3.0 + np.sin(2.0 * np.pi * (t + 5 * k) / 24.0)
        series[sid] = LoadSeries(sid, 1_600_000_000.0 + 3600.0 * k,
                                 3600, load)
    cutoff = 1_600_000_000.0 + 3600.0 * 48
    split, _ = split_stations(series, 2, cutoff)
    return build_transfer_data(series, split, L_x, H, calendar=False)


class TestStore:
    def test_round_trip_bit_exact(self, tmp_path):
        data = two_station_bundle()
        path = tmp_path / "ds.bin"
        save_dataset(path, data, {"granularity": 3600, "origin": "unit"})
        loaded, extra = load_dataset(path)
        assert extra == {"granularity": 3600, "origin": "unit"}
        for name in ("source_train", "target_train", "target_eval"):
            a, b = getattr(data, name), getattr(loaded, name)
            assert a.inputs.tobytes() == b.inputs.tobytes()
            assert a.targets.tobytes() == b.targets.tobytes()
            assert a.t_starts.tobytes() == b.t_starts.tobytes()
            assert list(a.station_ids) == list(b.station_ids)
            assert (a.L_x, a.H) == (b.L_x, b.H)
        assert loaded.scaler is not None
        assert loaded.scaler.mean.tolist() == data.scaler.mean.tolist()

    def test_empty_split_survives(self, tmp_path):
        data = two_station_bundle()
        mask = np.zeros(len(data.target_eval), dtype=bool)
        from chargecast.evaluation import _filter_windows

        data.target_eval = _filter_windows(data.target_eval, mask)
        path = tmp_path / "ds.bin"
        save_dataset(path, data, {})
        loaded, _ = load_dataset(path)
        assert len(loaded.target_eval) == 0
        assert loaded.target_eval.inputs.shape[1] == data.source_train.L_x

    def test_save_is_deterministic(self, tmp_path):
        data = two_station_bundle()
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        save_dataset(p1, data, {"origin": "unit"})
        save_dataset(p2, data, {"origin": "unit"})
        assert p1.read_bytes() == p2.read_bytes()
        assert not (tmp_path / "a.bin.tmp").exists()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "ds.bin"
        path.write_bytes(b"MIKT" + b"\x00" * 64)
        with pytest.raises(DatasetError, match="magic"):
            load_dataset(path)

    def test_truncated(self, tmp_path):
        data = two_station_bundle()
        path = tmp_path / "ds.bin"
        save_dataset(path, data, {})
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(DatasetError, match="truncated"):
            load_dataset(path)


# ---------------------------------------------------------------------------
# full command line flow (one shared run, many assertions)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = str(tmp_path_factory.mktemp("cli"))
    cfg = write_config(root)
    out = os.path.join(root, "run_out")
    for command in ("prepare", "pretrain", "finetune", "evaluate", "predict"):
        assert main([command, "--config", cfg, "--quiet"]) == 0, command
    return {"root": root, "cfg": cfg, "out": out}


class TestPipeline:
    def test_artifacts_exist(self, pipeline):
        out = pipeline["out"]
        expected = {
            "prepare": ["dataset.bin", "series.csv", "stations.csv"],
            "pretrain": ["model.ckpt", "loss_history.csv", "loss_curve.png"],
            "finetune": ["model.ckpt", "loss_history.csv", "loss_curve.png"],
            "evaluate": ["metrics.csv", "metrics.png",
                         "forecast_overlay.png"],
            "predict": ["forecasts.csv"],
        }
        for command, names in expected.items():
            for name in names + ["run.json"]:
                path = os.path.join(out, command, name)
                assert os.path.isfile(path), path
                assert os.path.getsize(path) > 0, path

    def test_no_temp_dirs_left(self, pipeline):
        leftovers = [n for n in os.listdir(pipeline["out"])
                     if n.startswith(".tmp-")]
        assert leftovers == []

    def test_station_table(self, pipeline):
        path = os.path.join(pipeline["out"], "prepare", "stations.csv")
        lines = open(path, encoding="utf-8").read().splitlines()
        assert lines[0] == ("station,first_activity,role,train_windows,"
                            "tune_windows,eval_windows")
        roles = [line.split(",")[2] for line in lines[1:]]
        assert roles.count("source") == 3
        assert roles.count("target") == 2

    def test_prepare_is_idempotent(self, pipeline):
        ds = os.path.join(pipeline["out"], "prepare", "dataset.bin")
        before = open(ds, "rb").read()
        assert main(["prepare", "--config", pipeline["cfg"],
                     "--quiet"]) == 0
        assert open(ds, "rb").read() == before

    def test_evaluate_rerun_is_byte_identical(self, pipeline):
        out = pipeline["out"]
        metrics = os.path.join(out, "evaluate", "metrics.csv")
        manifest = os.path.join(out, "evaluate", "run.json")
        m_before = open(metrics, "rb").read()
        j_before = open(manifest, "rb").read()
        assert main(["evaluate", "--config", pipeline["cfg"],
                     "--quiet"]) == 0
        assert open(metrics, "rb").read() == m_before
        assert open(manifest, "rb").read() == j_before

    def test_metrics_schema(self, pipeline):
        path = os.path.join(pipeline["out"], "evaluate", "metrics.csv")
        lines = open(path, encoding="utf-8").read().splitlines()
        assert lines[0] == "subject,scope,units,mae,mse,windows"
        subjects = {line.split(",")[0] for line in lines[1:]}
        assert subjects == {"model", "persistence_naive",
                            "persistence_seasonal"}
        units = {line.split(",")[2] for line in lines[1:]}
        assert units == {"standardized", "kwh"}
        for line in lines[1:]:
            parts = line.split(",")
            assert float(parts[3]) >= 0.0 and float(parts[4]) >= 0.0

    def test_forecast_csv_shape(self, pipeline):
        path = os.path.join(pipeline["out"], "predict", "forecasts.csv")
        lines = open(path, encoding="utf-8").read().splitlines()
        assert lines[0] == "station,timestamp,forecast_kwh"
        # 258 eval windows x 4 horizon steps at this config
        assert len(lines) - 1 == 258 * 4
        sid, stamp, kwh = lines[1].split(",")
        assert sid == "st003"
        assert stamp.endswith("Z") and "T" in stamp
        assert np.isfinite(float(kwh))

    def test_run_manifest(self, pipeline):
        path = os.path.join(pipeline["out"], "pretrain", "run.json")
        manifest = json.load(open(path, encoding="utf-8"))
        assert manifest["command"] == "pretrain"
        assert manifest["seed"] == 3
        assert len(manifest["config_hash"]) == 64
        assert manifest["artifacts"] == sorted(manifest["artifacts"])
        assert "model.ckpt" in manifest["artifacts"]
        assert set(manifest["versions"]) == {"chargecast", "numpy", "python"}
        assert "time" not in manifest and "timestamp" not in manifest

    def test_pngs_are_pngs(self, pipeline):
        for rel in (("pretrain", "loss_curve.png"),
                    ("evaluate", "metrics.png"),
                    ("evaluate", "forecast_overlay.png")):
            blob = open(os.path.join(pipeline["out"], *rel), "rb").read()
            assert blob[:8] == b"\x89PNG\r\n\x1a\n"

    def test_loss_history_csv(self, pipeline):
        path = os.path.join(pipeline["out"], "finetune", "loss_history.csv")
        lines = open(path, encoding="utf-8").read().splitlines()
        assert lines[0] == "phase,epoch,train_loss,val_loss"
        assert lines[1].startswith("finetune,1,")

    def test_quiet_silences_stdout(self, pipeline, capsys):
        assert main(["evaluate", "--config", pipeline["cfg"],
                     "--quiet"]) == 0
        assert capsys.readouterr().out == ""

    def test_finetune_from_scratch(self, pipeline, capsys):
        alt = os.path.join(pipeline["root"], "scratch_out")
        # reuse the prepared dataset by pointing --out at a copy
        import shutil

        os.makedirs(alt, exist_ok=True)
        shutil.copytree(os.path.join(pipeline["out"], "prepare"),
                        os.path.join(alt, "prepare"), dirs_exist_ok=True)
        code = main(["finetune", "--config", pipeline["cfg"], "--out", alt,
                     "--from-scratch", "--strategy", "freeze"])
        assert code == 0
        assert "finetune[freeze]" in capsys.readouterr().out
        assert os.path.isfile(os.path.join(alt, "finetune", "model.ckpt"))


# ---------------------------------------------------------------------------
# split bookkeeping at the documented station count


def test_default_station_split(tmp_path):
    text = """
[run]
out = {out}
seed = 0

[data]
synth = true
synth_days = 4
cutoff = 2022-11-24T00:00:00Z
L_x = 24
H = 4
calendar = false
"""
    cfg = write_config(str(tmp_path), text=text)
    assert main(["prepare", "--config", cfg, "--quiet"]) == 0
    path = os.path.join(str(tmp_path), "run_out", "prepare", "stations.csv")
    lines = open(path, encoding="utf-8").read().splitlines()
    roles = [line.split(",")[2] for line in lines[1:]]
    assert len(roles) == 26
    assert roles.count("source") == 21
    assert roles.count("target") == 5


# ---------------------------------------------------------------------------
# failure paths


class TestFailures:
    def test_missing_sessions_file(self, tmp_path, capsys):
        text = "[data]\nsessions = {out}/absent.csv\n"
        cfg = write_config(str(tmp_path), text=text)
        assert main(["prepare", "--config", cfg]) == 1
        err = capsys.readouterr().err
        assert err.startswith("error:")
        assert "absent.csv" in err

    def test_pretrain_before_prepare(self, tmp_path, capsys):
        cfg = write_config(str(tmp_path))
        assert main(["pretrain", "--config", cfg]) == 1
        err = capsys.readouterr().err
        assert "prepare" in err
        out = os.path.join(str(tmp_path), "run_out")
        assert not os.path.isdir(os.path.join(out, "pretrain"))
        assert not os.path.isdir(os.path.join(out, ".tmp-pretrain"))

    def test_finetune_needs_a_checkpoint(self, tmp_path, capsys):
        cfg = write_config(str(tmp_path))
        assert main(["prepare", "--config", cfg, "--quiet"]) == 0
        assert main(["finetune", "--config", cfg]) == 1
        err = capsys.readouterr().err
        assert "pretrain" in err and "from-scratch" in err

    def test_no_data_source_configured(self, tmp_path, capsys):
        cfg = write_config(str(tmp_path), text="[run]\nout = {out}\n")
        assert main(["prepare", "--config", cfg]) == 1
        assert "synth" in capsys.readouterr().err

    def test_bad_seeds_flag(self, tmp_path, capsys):
        cfg = write_config(str(tmp_path))
        assert main(["ablate", "--config", cfg, "--seeds", "a,b"]) == 1
        assert "--seeds" in capsys.readouterr().err

    def test_help_exits_zero_everywhere(self):
        for command in ("prepare", "pretrain", "finetune", "predict",
                        "evaluate", "ablate", "sweep"):
            with pytest.raises(SystemExit) as exc:
                main([command, "--help"])
            assert exc.value.code == 0

    def test_no_command_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 2

    def test_seed_flag_overrides_config(self, tmp_path):
        cfg = write_config(str(tmp_path))
        assert main(["prepare", "--config", cfg, "--seed", "9",
                     "--quiet"]) == 0
        path = os.path.join(str(tmp_path), "run_out", "prepare", "run.json")
        assert json.load(open(path, encoding="utf-8"))["seed"] == 9
