from __future__ import annotations

import csv
import json

import numpy as np
import pytest

from hnca.bandit import Dataset, save_idx, synthetic_dataset
from hnca.cli import ConfigError, ExperimentFile, main
from hnca.core import RngStream
from hnca.trainer import CSV_VERSION


def _doc(**over):
    doc = {
        "network": {"input_dim": 4, "hidden_layers": [6], "num_classes": 2},
        "train": {"estimator": "hnca", "learning_rate": 0.5, "epochs": 1, "batch_size": 16},
        "dataset": {"kind": "synthetic", "synthetic": "linearly_separable", "n": 120, "d": 4,
                    "num_classes": 2, "seed": 1},
    }
    for k, v in over.items():
        doc[k] = v
    return doc


def _write(tmp_path, doc, name="exp.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


def _rows(path):
    lines = path.read_text().splitlines()
    assert lines[0] == CSV_VERSION
    return list(csv.DictReader(lines[1:]))


def test_train_writes_csv_and_config(tmp_path):
    out = tmp_path / "o"
    assert main(["train", "--experiment", _write(tmp_path, _doc()), "--out", str(out)]) == 0
    csvs = list(out.glob("*.csv"))
    assert len(csvs) == 1
    assert len(_rows(csvs[0])) >= 1
    cfg_text = (out / (csvs[0].stem + ".config.json")).read_text(encoding="utf-8")
    cfg = json.loads(cfg_text)
    assert cfg["train"]["learning_rate"] == 0.5
    assert cfg_text == json.dumps(cfg, sort_keys=True, indent=2) + "\n"
    assert "wall_clock_s" in json.loads((out / (csvs[0].stem + ".timing.json")).read_text())
    assert "wall" not in csvs[0].read_text()


def test_train_output_reproducible(tmp_path):
    exp = _write(tmp_path, _doc())
    main(["train", "--experiment", exp, "--out", str(tmp_path / "a")])
    main(["train", "--experiment", exp, "--out", str(tmp_path / "b")])
    for name in ("hnca-lr0.5-s0.csv", "hnca-lr0.5-s0.config.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_seed_flag_overrides_file(tmp_path):
    out = tmp_path / "o"
    assert main(["train", "--experiment", _write(tmp_path, _doc()), "--out", str(out), "--seed", "9"]) == 0
    assert (out / "hnca-lr0.5-s9.csv").exists()


def test_zero_lr_flat_accuracy(tmp_path):
    doc = _doc()
    doc["train"]["learning_rate"] = 0.0
    doc["dataset"]["n"] = 2000
    out = tmp_path / "o"
    assert main(["train", "--experiment", _write(tmp_path, doc), "--out", str(out)]) == 0
    accs = [float(r["sampled_acc"]) for r in _rows(next(out.glob("*.csv")))]
    assert all(abs(a - 0.5) < 0.1 for a in accs)


def test_unknown_key_exit_2(tmp_path, caplog):
    doc = _doc()
    doc["train"]["learningrate"] = doc["train"].pop("learning_rate")
    assert main(["train", "--experiment", _write(tmp_path, doc)]) == 2
    assert "train.learningrate" in caplog.text


@pytest.mark.parametrize("mutate,path", [
    (lambda d: d.update(extra=1), "extra"),
    (lambda d: d["network"].update(input_dim="four"), "network.input_dim"),
    (lambda d: d["train"].update(estimator="sgd"), "train.estimator"),
    (lambda d: d["dataset"].update(kind="csv"), "dataset.kind"),
    (lambda d: d.pop("network"), "network"),
])
def test_config_errors_name_the_field(mutate, path):
    doc = _doc()
    mutate(doc)
    with pytest.raises(ConfigError) as exc:
        ExperimentFile.parse(doc)
    assert exc.value.path == path


def test_missing_file_exit_2(tmp_path):
    assert main(["train", "--experiment", str(tmp_path / "nope.json")]) == 2


def test_numeric_abort_exit_3(tmp_path):
    doc = _doc()
    doc["train"]["learning_rate"] = 1e6
    assert main(["train", "--experiment", _write(tmp_path, doc), "--out", str(tmp_path)]) == 3


def test_idx_dataset_via_data_dir(tmp_path, monkeypatch):
    ds = synthetic_dataset("linearly_separable", 64, 4, 2, RngStream(0))
    ds = Dataset(np.rint(ds.contexts * 255) / 255, ds.labels, 2, meta={"image_shape": [2, 2]})
    root = tmp_path / "data"
    root.mkdir()
    save_idx(ds, root / "img.gz", root / "lbl.gz")
    monkeypatch.setenv("HNCA_DATA_DIR", str(root))
    doc = _doc(dataset={"kind": "idx", "images": "img.gz", "labels": "lbl.gz", "num_classes": 2})
    assert main(["train", "--experiment", _write(tmp_path, doc), "--out", str(tmp_path / "o")]) == 0
    doc["dataset"]["images"] = "missing.gz"
    assert main(["train", "--experiment", _write(tmp_path, doc), "--out", str(tmp_path / "o")]) == 2


def test_sweep_cell_count(tmp_path):
    doc = _doc(sweep={"learning_rates": [0.1, 0.2, 0.4], "seeds": [0, 1]})
    out = tmp_path / "o"
    assert main(["sweep", "--experiment", _write(tmp_path, doc), "--out", str(out), "--parallel", "1"]) == 0
    assert len(list(out.glob("*.csv"))) == 6
    summary = json.loads((out / "sweep_summary.json").read_text(encoding="utf-8"))
    assert summary["best_lr"] in (0.1, 0.2, 0.4)
    assert {"max_mean_lr", "threshold", "lr_stats", "cells"} <= set(summary)
    assert all({"mean", "se", "ci95"} <= set(s) for s in summary["lr_stats"])


def test_sweep_single_lr(tmp_path):
    doc = _doc(sweep={"learning_rates": [0.3], "seeds": [0, 1]})
    out = tmp_path / "o"
    assert main(["sweep", "--experiment", _write(tmp_path, doc), "--out", str(out), "--parallel", "1"]) == 0
    assert json.loads((out / "sweep_summary.json").read_text())["best_lr"] == 0.3


def test_sweep_failed_cell_exit_0(tmp_path):
    doc = _doc(sweep={"learning_rates": [0.1, 1e6], "seeds": [0, 1]})
    out = tmp_path / "o"
    assert main(["sweep", "--experiment", _write(tmp_path, doc), "--out", str(out), "--parallel", "1"]) == 0
    summary = json.loads((out / "sweep_summary.json").read_text())
    failed = [c for c in summary["cells"] if c["failed"]]
    assert failed and all(c["lr"] == 1e6 for c in failed)
    assert summary["best_lr"] == 0.1


def test_sweep_needs_grid(tmp_path):
    assert main(["sweep", "--experiment", _write(tmp_path, _doc())]) == 2
    doc = _doc(sweep={"learning_rates": [0.1], "seeds": [0]})
    assert main(["sweep", "--experiment", _write(tmp_path, doc)]) == 2


def test_verify_defaults_pass(tmp_path):
    assert main(["verify", "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "verify_report.json").read_text(encoding="utf-8"))
    assert rep["passed"] and rep["draws"] == 100
    assert rep["shapes"]["3-2-2"]["instances"] == 100
    assert "q_table" in rep["example"]["report"]


def test_verify_invalid_sizes_exit_2(tmp_path):
    assert main(["verify", "--draws", "0", "--out", str(tmp_path)]) == 2
    assert main(["verify", "--shape", "2-30-2", "--out", str(tmp_path)]) == 2
    assert main(["verify", "--shape", "3-x-2", "--out", str(tmp_path)]) == 2


def test_verify_sabotage_exit_4(tmp_path):
    """Negative control: skipping the realized-likelihood conversion must be detected.

    Only hidden-to-hidden messages are affected, so the net needs two hidden layers.
    """
    rc = main(["verify", "--shape", "4-3-3-3", "--draws", "4", "--seed", "2",
               "--sabotage-skip-realized-likelihood", "--out", str(tmp_path)])
    assert rc == 4
    rep = json.loads((tmp_path / "verify_report.json").read_text())
    v = rep["violations"][0]
    assert {"seed", "unit", "b", "check", "draw"} <= set(v)
    assert v["seed"] == 2


def test_shipped_configs_parse():
    from pathlib import Path

    files = sorted((Path(__file__).resolve().parents[1] / "configs").glob("*.json"))
    assert files
    for f in files:
        exp = ExperimentFile.load(f)
        assert exp.sweep is not None
