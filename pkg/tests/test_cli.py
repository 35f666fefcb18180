import json
from pathlib import Path

import pytest

from navrnn.cli import main


def _write_config(path: Path, payload: dict) -> str:
    path.write_text(json.dumps(payload, indent=2))
    return str(path)


@pytest.fixture(scope="module")
def tiny_pipeline(tmp_path_factory):
    """synth -> preprocess -> train on a deliberately small experiment."""
    root = tmp_path_factory.mktemp("pipeline")
    synth_cfg = _write_config(
        root / "synth.json",
        {
            "batch": {
                "count": 4,
                "profiles": ["circle", "survey_lawnmower", "waypoint_polyline"],
                "duration_s": 70.0,
                "ground_time_s": 3.0,
                "noise": "low_cost",
                "seed": 100,
            }
        },
    )
    assert main(["synth", "--config", synth_cfg, "--out", str(root / "data")]) == 0

    pre_cfg = _write_config(
        root / "pre.json",
        {
            "dataset": str(root / "data"),
            "window": 20,
            "stride": 2,
            "val_fraction": 0.25,
            "seed": 0,
            "min_duration_s": 30.0,
        },
    )
    assert main(["preprocess", "--config", pre_cfg, "--out", str(root / "pre")]) == 0

    train_cfg = _write_config(
        root / "train.json",
        {
            "train_windows": str(root / "pre" / "train_windows.bin"),
            "val_windows": str(root / "pre" / "val_windows.bin"),
            "network": {"recurrent_layers": 1, "hidden_size": 24},
            "train": {"epochs": 4, "batch_size": 128, "shuffle_seed": 0},
            "init_seed": 0,
        },
    )
    assert main(["train", "--config", train_cfg, "--out", str(root / "model")]) == 0
    return root


def test_synth_outputs(tiny_pipeline):
    data = tiny_pipeline / "data"
    manifest = json.loads((data / "dataset.json").read_text())
    assert len(manifest["logs"]) == 4
    for entry in manifest["logs"]:
        assert (data / entry["path"] / "imu.csv").is_file()
        assert entry["duration_s"] == pytest.approx(76.0)


def test_preprocess_outputs(tiny_pipeline):
    pre = tiny_pipeline / "pre"
    for name in ("train_windows.bin", "train_windows.json", "val_windows.bin", "cleanup_report.json", "split.json"):
        assert (pre / name).is_file()
    cleanup = json.loads((pre / "cleanup_report.json").read_text())
    assert cleanup["accepted_count"] <= cleanup["input_count"]
    split = json.loads((pre / "split.json").read_text())
    assert set(split["train"]) | set(split["val"]) <= {e["id"] for e in json.loads((tiny_pipeline / "data" / "dataset.json").read_text())["logs"]}
    assert not set(split["train"]) & set(split["val"])


def test_train_outputs(tiny_pipeline):
    model = tiny_pipeline / "model"
    assert (model / "model_final.navc").is_file()
    report = json.loads((model / "train_report.json").read_text())
    assert len(report["train_loss"]) == 4
    assert all(v > 0 for v in report["train_loss"])


def test_eval_with_baseline(tiny_pipeline):
    cfg = _write_config(
        tiny_pipeline / "eval.json",
        {
            "checkpoint": str(tiny_pipeline / "model" / "model_final.navc"),
            "dataset": str(tiny_pipeline / "data"),
            "split": str(tiny_pipeline / "pre" / "split.json"),
            "min_duration_s": 30.0,
        },
    )
    out = tiny_pipeline / "eval"
    assert main(["eval", "--config", cfg, "--out", str(out), "--baseline"]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert "nn" in summary and "deadreckon" in summary
    header = (out / "summary.csv").read_text().splitlines()[0]
    assert "nn_mpe_m" in header and "deadreckon_mpe_m" in header
    metrics_files = list((out / "metrics").glob("*.json"))
    assert metrics_files


def test_eval_rerun_byte_identical(tiny_pipeline):
    cfg = _write_config(
        tiny_pipeline / "eval2.json",
        {
            "checkpoint": str(tiny_pipeline / "model" / "model_final.navc"),
            "dataset": str(tiny_pipeline / "data"),
            "split": str(tiny_pipeline / "pre" / "split.json"),
            "min_duration_s": 30.0,
        },
    )
    out_a = tiny_pipeline / "eval_a"
    out_b = tiny_pipeline / "eval_b"
    assert main(["eval", "--config", cfg, "--out", str(out_a)]) == 0
    assert main(["eval", "--config", cfg, "--out", str(out_b)]) == 0
    for f in sorted((out_a / "metrics").glob("*.json")):
        assert f.read_bytes() == (out_b / "metrics" / f.name).read_bytes()
    assert (out_a / "summary.json").read_bytes() == (out_b / "summary.json").read_bytes()


def test_stream_command(tiny_pipeline):
    split = json.loads((tiny_pipeline / "pre" / "split.json").read_text())
    log_id = split["val"][0]
    cfg = _write_config(
        tiny_pipeline / "stream.json",
        {
            "checkpoint": str(tiny_pipeline / "model" / "model_final.navc"),
            "log": str(tiny_pipeline / "data" / log_id),
            "stream": {"jitter_ms": 0.0, "replay_speed": 0.0},
        },
    )
    out = tiny_pipeline / "stream"
    assert main(["stream", "--config", cfg, "--out", str(out)]) == 0
    report = json.loads((out / "compare_report.json").read_text())
    assert report["bitwise_equal"] is True
    lines = (out / "online_predictions.csv").read_text().splitlines()
    assert lines[0].startswith("t_us,dpn")
    assert len(lines) > 10


def test_unknown_flag_exits_one():
    assert main(["synth", "--config", "x.json", "--out", "y", "--bogus"]) == 1


def test_missing_config_exits_one(tmp_path):
    assert main(["synth", "--config", str(tmp_path / "absent.json"), "--out", str(tmp_path)]) == 1


def test_bad_data_exits_two(tmp_path):
    cfg = _write_config(tmp_path / "eval.json", {"checkpoint": "nope.navc", "dataset": str(tmp_path)})
    assert main(["eval", "--config", cfg, "--out", str(tmp_path / "out")]) == 2


def test_help_lists_flags(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["eval", "--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for flag in ("--config", "--out", "--seed", "--jobs", "--baseline"):
        assert flag in out
