import json

import pytest

from meshpool.errors import ArgumentError
from meshpool.experiments import effective_config, merge_config, run_experiment

TINY = {"count": 12, "n_min": 50, "n_max": 60}
FAST = {"epochs": 2, "early_stop_patience": 0}
MODEL = {"kernel": {"kind": "bspline", "grid": [3, 3, 3]}}


def test_merge_rejects_unknown_keys():
    with pytest.raises(ArgumentError):
        effective_config("classify", {"datset": {}})
    with pytest.raises(ArgumentError):
        effective_config("classify", {"train": {"epoch": 3}})
    with pytest.raises(ArgumentError):
        effective_config("nonsense")
    merged = merge_config({"a": {"b": 1, "c": 2}}, {"a": {"c": 5}})
    assert merged == {"a": {"b": 1, "c": 5}}


def test_parcel_regression_defaults():
    cfg = effective_config("parcel_regression")
    assert cfg["dataset"]["task"] == "parcel_size_reg"
    assert cfg["train"]["epochs"] > 50 and cfg["train"]["ami_every"] > 0


def test_pooling_comparison_writes_reports(tmp_path):
    over = {"seeds": [0, 1], "modes": ["global_average", "learnable"],
            "dataset": TINY, "train": FAST, "model": MODEL}
    res = run_experiment("pooling_comparison", over, tmp_path)
    assert set(res["accuracy"]) == {"global_average", "learnable"}
    table = (tmp_path / "table.tsv").read_text().splitlines()
    assert table[0].split("\t")[:3] == ["method", "accuracy_mean", "accuracy_std"]
    assert len(table) == 3
    runs = sorted(p.name for p in (tmp_path / "runs").iterdir())
    assert runs == ["global_average__seed0.json", "global_average__seed1.json",
                    "learnable__seed0.json", "learnable__seed1.json"]
    run = json.loads((tmp_path / "runs" / runs[0]).read_text())
    assert {"code_version", "experiment_config", "metrics", "seed"} <= set(run)
    assert json.loads((tmp_path / "config.json").read_text())["kind"] == "pooling_comparison"


def test_size_study_budgets(tmp_path):
    over = {"seeds": [0], "budgets": [30, None], "dataset": TINY, "train": FAST,
            "model": MODEL}
    res = run_experiment("size_study", over, tmp_path)
    assert set(res["accuracy"]) == {"30", "full"}
    assert len((tmp_path / "table.tsv").read_text().splitlines()) == 3


def test_parcel_regression_curve(tmp_path):
    over = {"seeds": [0], "dataset": TINY, "model": MODEL,
            "train": {"epochs": 4, "ami_every": 2}}
    res = run_experiment("parcel_regression", over, tmp_path)
    assert [e for e, _ in res["ami"][0]] == [0, 2, 4]
    curve = (tmp_path / "ami_curve.tsv").read_text().splitlines()
    assert curve[0] == "epoch\tseed0\tmean" and len(curve) == 4


def test_task_mismatch():
    with pytest.raises(ArgumentError):
        run_experiment("parcel_regression", {"dataset": dict(TINY, task="two_region_class"),
                                             "seeds": [0], "train": FAST})


def test_regress_single(tmp_path):
    res = run_experiment("regress", {"seeds": [0], "dataset": TINY, "train": FAST,
                                     "model": MODEL}, tmp_path)
    assert len(res["mae"]) == 1
