"""Experiment orchestration: repeated seeded training runs and report tables.

Every experiment writes into its output directory:

* ``config.json``: the effective configuration (defaults merged with overrides)
* ``FORMAT``: report format version
* ``table.tsv``: the comparison table, mean and std over seeds
* ``runs/<condition>__seed<k>.json``: per-run metadata and metrics
* ``ami_curve.tsv`` (parcel_regression only): mean AMI per epoch checkpoint
"""
import copy
import json
import subprocess
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ArgumentError
from .mesh.core import subsample_mesh
from .mesh.dataset import DatasetManifest, ManifestEntry, gen_labeled_dataset, read_manifest
from .model import ModelConfig, build_input, embed_mesh
from .training import TrainConfig, evaluate, prepare_dataset, train

REPORT_FORMAT = 1
KINDS = ("pooling_comparison", "size_study", "parcel_regression", "classify", "regress")
MODE_LABELS = {
    "global_average": "global average",
    "fixed_parcellation": "fixed parcellation",
    "spectral_kmeans": "spectral k-means",
    "learnable": "learnable",
}

_DATASET = {"manifest": None, "count": 200, "n_min": 500, "n_max": 1000, "seed": 0,
            "delta": 1.0, "noise": 0.2, "n_parcels": 8, "parcel_contrast": 1.0}
_TRAIN = {"epochs": 40, "learning_rate": 1e-3, "alpha": 1e-3, "early_stop_patience": 10,
          "eval_every": 1, "ami_every": 0}

DEFAULTS = {
    "pooling_comparison": {
        "seeds": [0, 1, 2, 3, 4],
        "modes": ["global_average", "fixed_parcellation", "spectral_kmeans", "learnable"],
        "dataset": dict(_DATASET, task="two_region_class"),
        "train": dict(_TRAIN),
        "model": {},
    },
    "size_study": {
        "seeds": [0, 1, 2, 3, 4],
        "budgets": [100, 1000, None],
        "subsample_seed": 0,
        "dataset": dict(_DATASET, task="two_region_class", count=100, n_min=1900, n_max=2100),
        "train": dict(_TRAIN),
        "model": {},
    },
    "parcel_regression": {
        "seeds": [0, 1, 2, 3, 4],
        "dataset": dict(_DATASET, task="parcel_size_reg", count=60, n_min=300, n_max=500),
        "train": dict(_TRAIN, epochs=100, early_stop_patience=0, ami_every=10,
                      learning_rate=1e-3, alpha=1e-5),
        "model": {},
    },
    "classify": {
        "seeds": [0, 1, 2, 3, 4],
        "dataset": dict(_DATASET, task="two_region_class"),
        "train": dict(_TRAIN),
        "model": {},
    },
    "regress": {
        "seeds": [0, 1, 2, 3, 4],
        "dataset": dict(_DATASET, task="parcel_size_reg", count=100),
        "train": dict(_TRAIN),
        "model": {},
    },
}


def merge_config(defaults, overrides, path=""):
    """Recursive merge that rejects keys absent from ``defaults``."""
    out = copy.deepcopy(defaults)
    for key, value in (overrides or {}).items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ArgumentError(f"unknown config key {where!r}")
        if isinstance(defaults[key], dict) and key != "model":
            if not isinstance(value, dict):
                raise ArgumentError(f"config key {where!r} must be an object")
            out[key] = merge_config(defaults[key], value, where)
        else:
            out[key] = copy.deepcopy(value)
    return out


def effective_config(kind, overrides=None):
    if kind not in KINDS:
        raise ArgumentError(f"unknown experiment kind {kind!r}; expected one of {KINDS}")
    config = merge_config(DEFAULTS[kind], overrides)
    ModelConfig.from_dict(dict(config["model"]))  # validate keys early
    TrainConfig.from_dict(dict(config["train"]))
    return config


def code_version():
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             cwd=Path(__file__).resolve().parent, capture_output=True,
                             text=True, timeout=10)
        described = out.stdout.strip() if out.returncode == 0 else ""
    except (OSError, subprocess.SubprocessError):
        described = ""
    return f"{__version__}+{described}" if described else __version__


def load_or_generate(ds_cfg):
    if ds_cfg.get("manifest"):
        return read_manifest(ds_cfg["manifest"])
    return gen_labeled_dataset(ds_cfg["task"], ds_cfg["count"], (ds_cfg["n_min"], ds_cfg["n_max"]),
                               ds_cfg["seed"], delta=ds_cfg["delta"], noise=ds_cfg["noise"],
                               n_parcels=ds_cfg["n_parcels"],
                               parcel_contrast=ds_cfg["parcel_contrast"])


def _model_config(config, manifest, **extra):
    fields = dict(config["model"])
    fields.setdefault("field_names", list(manifest.field_names))
    fields.setdefault("task", manifest.mode)
    fields.setdefault("n_outputs", manifest.n_outputs)
    fields.setdefault("n_parcels", config["dataset"].get("n_parcels", 8))
    fields.update(extra)
    return ModelConfig.from_dict(fields)


def _train_config(config, seed):
    return TrainConfig.from_dict(dict(config["train"], seed=int(seed)))


def _mean_std(values):
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=1)) if arr.size > 1 else 0.0


def _fmt(x):
    return f"{x:.4f}"


def _write_table(path, header, rows):
    lines = ["\t".join(header)] + ["\t".join(str(c) for c in row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def _write_run(out_dir, condition, seed, config, model_cfg, train_cfg, report, extra=None):
    run = {
        "condition": condition,
        "seed": int(seed),
        "code_version": code_version(),
        "experiment_config": config,
        "model_config": model_cfg.to_dict(),
        "train_config": train_cfg.to_dict(),
        "metrics": report.to_dict(),
    }
    run.update(extra or {})
    path = Path(out_dir) / "runs" / f"{condition}__seed{seed}.json"
    path.write_text(json.dumps(run, sort_keys=True, indent=1) + "\n")


def _prepare_out(out_dir, kind, config):
    out_dir = Path(out_dir)
    (out_dir / "runs").mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(
        json.dumps({"kind": kind, "config": config}, sort_keys=True, indent=1) + "\n")
    (out_dir / "FORMAT").write_text(f"meshpool-report {REPORT_FORMAT}\n")
    return out_dir


def run_experiment(kind, overrides=None, out_dir=None, log=None):
    """Run one experiment family; returns a dict summary and writes report files."""
    config = effective_config(kind, overrides)
    if out_dir is not None:
        out_dir = _prepare_out(out_dir, kind, config)
    runner = {"pooling_comparison": _pooling_comparison, "size_study": _size_study,
              "parcel_regression": _parcel_regression, "classify": _single,
              "regress": _single}[kind]
    return runner(config, out_dir, log)


def _pooling_comparison(config, out_dir, log):
    manifest = load_or_generate(config["dataset"])
    if manifest.mode != "classify":
        raise ArgumentError("pooling_comparison needs a classification dataset")
    data = prepare_dataset(manifest)
    results = {}
    for mode in config["modes"]:
        if mode not in MODE_LABELS:
            raise ArgumentError(f"unknown pooling mode {mode!r}")
        scores = []
        for seed in config["seeds"]:
            mcfg = _model_config(config, manifest, pooling_mode=mode)
            tcfg = _train_config(config, seed)
            _, report = train(data, mcfg, tcfg)
            scores.append(report.test_metric)
            if log:
                log(f"{mode} seed {seed}: accuracy {report.test_metric:.2f}")
            if out_dir is not None:
                _write_run(out_dir, mode, seed, config, mcfg, tcfg, report)
        results[mode] = scores
    rows = []
    for mode, scores in results.items():
        mean, std = _mean_std(scores)
        rows.append([MODE_LABELS[mode], _fmt(mean), _fmt(std)] + [_fmt(s) for s in scores])
    if out_dir is not None:
        header = ["method", "accuracy_mean", "accuracy_std"] + \
            [f"seed{s}" for s in config["seeds"]]
        _write_table(out_dir / "table.tsv", header, rows)
    return {"accuracy": results}


def _subsampled_manifest(manifest, budget, seed):
    entries = []
    for e in manifest.entries:
        mesh = manifest.mesh(e)
        if budget is not None and budget < mesh.n:
            mesh = subsample_mesh(mesh, budget, seed)
        entries.append(ManifestEntry(path=e.path, split=e.split, target=e.target, mesh=mesh))
    return DatasetManifest(task=manifest.task, field_names=manifest.field_names, entries=entries)


def _size_study(config, out_dir, log):
    full = load_or_generate(config["dataset"])
    if full.mode != "classify":
        raise ArgumentError("size_study needs a classification dataset")
    full_tests = [e for e in full.entries if e.split == "test"]
    table = []
    summary = {}
    for budget in config["budgets"]:
        label = "full" if budget is None else str(int(budget))
        data = prepare_dataset(_subsampled_manifest(full, budget, config["subsample_seed"]))
        mcfg = _model_config(config, full)
        full_inputs = []
        for e in full_tests:
            mesh = full.mesh(e)
            graph, emb, _ = embed_mesh(mesh, data.reference, d=mcfg.spectral_dim)
            full_inputs.append(build_input(mesh, emb, graph, mcfg, e.target, e.path))
        same, on_full = [], []
        for seed in config["seeds"]:
            tcfg = _train_config(config, seed)
            state, report = train(data, mcfg, tcfg)
            acc_full = evaluate(state, full_inputs)
            same.append(report.test_metric)
            on_full.append(acc_full)
            if log:
                log(f"budget {label} seed {seed}: same-size {report.test_metric:.2f} "
                    f"full {acc_full:.2f}")
            if out_dir is not None:
                _write_run(out_dir, f"budget{label}", seed, config, mcfg, tcfg, report,
                           {"full_graph_accuracy": acc_full})
        summary[label] = {"same_size": same, "full": on_full}
        m1, s1 = _mean_std(same)
        m2, s2 = _mean_std(on_full)
        table.append([label, _fmt(m1), _fmt(s1), _fmt(m2), _fmt(s2)])
    if out_dir is not None:
        _write_table(out_dir / "table.tsv", ["budget", "same_size_mean", "same_size_std",
                                             "full_graph_mean", "full_graph_std"], table)
    return {"accuracy": summary}


def _parcel_regression(config, out_dir, log):
    manifest = load_or_generate(config["dataset"])
    if manifest.mode != "regress":
        raise ArgumentError("parcel_regression needs a parcel_size_reg dataset")
    data = prepare_dataset(manifest)
    maes, curves = [], {}
    for seed in config["seeds"]:
        mcfg = _model_config(config, manifest, pooling_mode="learnable")
        tcfg = _train_config(config, seed)
        _, report = train(data, mcfg, tcfg)
        maes.append(report.test_metric)
        curves[seed] = report.ami_trace
        if log:
            log(f"seed {seed}: MAE {report.test_metric:.5f} AMI {report.ami_trace[-1:]}")
        if out_dir is not None:
            _write_run(out_dir, "learnable", seed, config, mcfg, tcfg, report)
    mean, std = _mean_std(maes)
    if out_dir is not None:
        _write_table(out_dir / "table.tsv", ["method", "mae_mean", "mae_std"] +
                     [f"seed{s}" for s in config["seeds"]],
                     [["learnable", f"{mean:.6f}", f"{std:.6f}"] + [f"{m:.6f}" for m in maes]])
        epochs = [e for e, _ in curves[config["seeds"][0]]]
        rows = []
        for i, epoch in enumerate(epochs):
            vals = [curves[s][i][1] for s in config["seeds"]]
            rows.append([epoch] + [_fmt(v) for v in vals] + [_fmt(float(np.mean(vals)))])
        _write_table(out_dir / "ami_curve.tsv",
                     ["epoch"] + [f"seed{s}" for s in config["seeds"]] + ["mean"], rows)
    return {"mae": maes, "ami": curves}


def _single(config, out_dir, log):
    manifest = load_or_generate(config["dataset"])
    data = prepare_dataset(manifest)
    scores = []
    mode = config["model"].get("pooling_mode", "learnable")
    for seed in config["seeds"]:
        mcfg = _model_config(config, manifest)
        tcfg = _train_config(config, seed)
        _, report = train(data, mcfg, tcfg)
        scores.append(report.test_metric)
        if log:
            log(f"seed {seed}: {report.metric_name} {report.test_metric:.4f}")
        if out_dir is not None:
            _write_run(out_dir, mode, seed, config, mcfg, tcfg, report)
    mean, std = _mean_std(scores)
    name = "accuracy" if manifest.mode == "classify" else "mae"
    if out_dir is not None:
        _write_table(out_dir / "table.tsv", ["method", f"{name}_mean", f"{name}_std"] +
                     [f"seed{s}" for s in config["seeds"]],
                     [[MODE_LABELS[mode], f"{mean:.6f}", f"{std:.6f}"] +
                      [f"{s:.6f}" for s in scores]])
    return {name: scores}
