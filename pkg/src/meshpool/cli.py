"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical error.

Every command that writes into ``--out`` refuses to touch an existing,
non-empty target unless ``--force`` is given, and output directories
receive a ``config.json`` echo of the effective configuration plus a
``FORMAT`` file naming the output format version.
"""
import argparse
import json
import shutil
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ArgumentError, MeshPoolError, ParseError
from .mesh import (
    SurfaceMesh, build_weighted_graph, gen_labeled_dataset, load_mesh, read_manifest,
    save_dataset, save_mesh, subsample_mesh,
)
from .mesh.dataset import TASKS
from .spectral import (
    EMBEDDING_FORMAT_VERSION, align_to_reference, as_reference, embed_graph, read_embedding,
    write_embedding,
)

OUTPUT_FORMAT = 1

# Flags understood in a --config file, per command; values are the defaults.
COMMAND_DEFAULTS = {
    "gen-synthetic": {"task": "two_region_class", "count": 100, "n_min": 500, "n_max": 1000,
                      "seed": 0, "delta": 1.0, "noise": 0.2, "n_parcels": 8,
                      "parcel_contrast": 1.0},
    "subsample": {"target_n": 1000, "seed": 0},
    "embed": {"d": 3},
    "align": {"max_iters": 50, "tol": 1e-9, "orthogonal": False},
    "train": {"model": {}, "train": {}},
    "gradcheck": {"size": 30, "seed": 0, "grid": 2, "kernel": "bspline", "tol": 1e-4},
}


class UsageError(ArgumentError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


# -- config plumbing -------------------------------------------------------

def _read_config(path):
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ArgumentError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc}", path) from None
    if not isinstance(data, dict):
        raise ParseError("config must be a JSON object", path)
    return data


def effective(command, args, flag_names):
    """Defaults < config file < explicit flags. Unknown file keys are rejected."""
    defaults = COMMAND_DEFAULTS[command]
    file_cfg = _read_config(getattr(args, "config", None))
    unknown = sorted(set(file_cfg) - set(defaults))
    if unknown:
        raise ArgumentError(f"unknown config key(s) for {command}: {', '.join(unknown)}")
    cfg = dict(defaults)
    cfg.update(file_cfg)
    for name in flag_names:
        value = getattr(args, name, None)
        if value is not None:
            cfg[name] = value
    return cfg


def _claim_dir(path, force):
    path = Path(path)
    if path.exists():
        if not path.is_dir():
            raise ArgumentError(f"{path} exists and is not a directory")
        if any(path.iterdir()):
            if not force:
                raise ArgumentError(f"{path} is not empty; pass --force to overwrite")
            shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _claim_file(path, force, *companions):
    for p in (Path(path),) + tuple(Path(c) for c in companions):
        if p.exists() and not force:
            raise ArgumentError(f"{p} exists; pass --force to overwrite")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    return Path(path)


def _echo(out_dir, command, cfg, fmt):
    out_dir = Path(out_dir)
    (out_dir / "config.json").write_text(
        json.dumps({"command": command, "config": cfg}, sort_keys=True, indent=1) + "\n")
    (out_dir / "FORMAT").write_text(f"{fmt}\n")


# -- commands --------------------------------------------------------------

def cmd_gen_synthetic(args):
    cfg = effective("gen-synthetic", args,
                    ["task", "count", "n_min", "n_max", "seed", "delta", "noise", "n_parcels",
                     "parcel_contrast"])
    if cfg["task"] not in TASKS:
        raise ArgumentError(f"--task must be one of {sorted(TASKS)}")
    if cfg["count"] < 10:
        raise ArgumentError("--count must be at least 10")
    if not 12 <= cfg["n_min"] <= cfg["n_max"]:
        raise ArgumentError("need 12 <= --n-min <= --n-max")
    out = _claim_dir(args.out, args.force)
    manifest = gen_labeled_dataset(cfg["task"], cfg["count"], (cfg["n_min"], cfg["n_max"]),
                                   cfg["seed"], delta=cfg["delta"], noise=cfg["noise"],
                                   n_parcels=cfg["n_parcels"],
                                   parcel_contrast=cfg["parcel_contrast"])
    save_dataset(manifest, out)
    _echo(out, "gen-synthetic", cfg, f"meshpool-dataset {OUTPUT_FORMAT}")
    counts = {s: len(manifest.split(s)) for s in ("train", "val", "test")}
    print(f"wrote {len(manifest.entries)} meshes to {out} "
          f"(train {counts['train']}, val {counts['val']}, test {counts['test']})")
    return 0


def cmd_subsample(args):
    cfg = effective("subsample", args, ["target_n", "seed"])
    mesh = load_mesh(args.mesh)
    out = _claim_file(args.out, args.force)
    small = subsample_mesh(mesh, cfg["target_n"], cfg["seed"])
    save_mesh(small, out)
    print(f"{mesh.n} -> {small.n} nodes: {out}")
    return 0


def _embedding_name(mesh_path):
    return Path(mesh_path).with_suffix("").as_posix().replace("/", "__") + ".emb.tsv"


def cmd_embed(args):
    cfg = effective("embed", args, ["d"])
    if cfg["d"] < 1:
        raise ArgumentError("--d must be >= 1")
    manifest = read_manifest(args.manifest)
    out = _claim_dir(args.out, args.force)
    index = ["mesh\tsplit\tembedding"]
    for entry in manifest.entries:
        mesh = manifest.mesh(entry)
        emb = embed_graph(build_weighted_graph(mesh), d=cfg["d"])
        name = _embedding_name(entry.path)
        write_embedding(emb, out / name)
        index.append(f"{entry.path}\t{entry.split}\t{name}")
    (out / "index.tsv").write_text("\n".join(index) + "\n")
    cfg["manifest"] = str(args.manifest)
    _echo(out, "embed", cfg, f"meshpool-embedding {EMBEDDING_FORMAT_VERSION}")
    print(f"embedded {len(manifest.entries)} meshes into {out}")
    return 0


def _embedding_files(path):
    path = Path(path)
    if path.is_file():
        return [path]
    index = path / "index.tsv"
    if index.exists():
        rows = index.read_text().splitlines()[1:]
        return [path / r.split("\t")[2] for r in rows if r]
    files = sorted(path.glob("*.emb.tsv"))
    if not files:
        raise ArgumentError(f"no embedding files under {path}")
    return files


def cmd_align(args):
    cfg = effective("align", args, ["max_iters", "tol", "orthogonal"])
    ref_emb, _ = read_embedding(args.reference)
    reference = as_reference(ref_emb, reference_id=Path(args.reference).name)
    files = _embedding_files(args.embeddings)
    out = _claim_dir(args.out, args.force)
    d = ref_emb.d
    header = ["embedding", "residual", "iterations"] + \
        [f"R{r + 1}{c + 1}" for r in range(d) for c in range(d)]
    rows = ["\t".join(header)]
    for f in files:
        emb, _ = read_embedding(f)
        if emb.aligned:
            raise ArgumentError(f"{f} is already aligned; align raw embeddings")
        aligned, corr = align_to_reference(emb, reference, max_iters=cfg["max_iters"],
                                           tol=cfg["tol"], orthogonal=cfg["orthogonal"],
                                           reference_id=reference.reference)
        write_embedding(aligned, out / f.name, residual=corr.residual)
        (out / (f.name[:-len(".emb.tsv")] + ".pi.txt")).write_text(
            "\n".join(str(int(p)) for p in corr.pi) + "\n")
        rows.append("\t".join([f.name, repr(float(corr.residual)), str(len(corr.history) - 1)]
                              + [repr(float(x)) for x in aligned.transform.reshape(-1)]))
    (out / "alignment.tsv").write_text("\n".join(rows) + "\n")
    cfg.update(reference=str(args.reference), embeddings=str(args.embeddings))
    _echo(out, "align", cfg, f"meshpool-alignment {OUTPUT_FORMAT}")
    print(f"aligned {len(files)} embeddings to {args.reference}")
    return 0


def _train_configs(args, manifest):
    from .model import ModelConfig
    from .training import TrainConfig

    cfg = effective("train", args, [])
    for section in ("model", "train"):
        if not isinstance(cfg[section], dict):
            raise ArgumentError(f"config section {section!r} must be an object")
    model = dict(cfg["model"])
    train = dict(cfg["train"])
    flag_map = {"epochs": "epochs", "lr": "learning_rate", "seed": "seed", "alpha": "alpha",
                "patience": "early_stop_patience"}
    for flag, key in flag_map.items():
        if getattr(args, flag) is not None:
            train[key] = getattr(args, flag)
    if args.pooling is not None:
        model["pooling_mode"] = args.pooling
    if args.grid is not None:
        model["kernel"] = {"kind": "bspline", "degree": 1, "grid": [args.grid] * 3}
    model.setdefault("field_names", list(manifest.field_names))
    model.setdefault("task", manifest.mode)
    model.setdefault("n_outputs", manifest.n_outputs)
    train.setdefault("epochs", 40)
    mcfg = ModelConfig.from_dict(model)
    tcfg = TrainConfig.from_dict(train)
    return mcfg, tcfg


def cmd_train(args):
    from .model import save_checkpoint
    from .training import prepare_dataset, train

    manifest = read_manifest(args.manifest)
    mcfg, tcfg = _train_configs(args, manifest)
    out = _claim_dir(args.out, args.force)
    data = prepare_dataset(manifest, k_neighbors=mcfg.k_neighbors, d=mcfg.spectral_dim)
    state, report = train(data, mcfg, tcfg, checkpoint_dir=out,
                          log=_log if args.verbose else None)
    save_checkpoint(state, out / "model.ckpt", extra={"train": tcfg.to_dict()})
    report.write(out / "report.json")
    _echo(out, "train", {"manifest": str(args.manifest), "model": state.config.to_dict(),
                         "train": tcfg.to_dict()}, f"meshpool-train {OUTPUT_FORMAT}")
    metric = report.test_metric
    shown = "n/a" if metric is None else f"{metric:.6f}"
    print(f"best epoch {report.best_epoch}; test {report.metric_name} {shown}")
    return 0


def _inputs_for(state, manifest, entries):
    from .model import build_input, embed_mesh, ready

    if state.reference is None:
        raise ArgumentError("checkpoint has no alignment reference")
    inputs = []
    for entry in entries:
        mesh = manifest.mesh(entry)
        graph, emb, _ = embed_mesh(mesh, state.reference, d=state.config.spectral_dim)
        inp = build_input(mesh, emb, graph, state.config, entry.target, entry.path)
        inputs.append(ready(inp, state.config))
    return inputs


def cmd_eval(args):
    from .model import load_checkpoint
    from .training import evaluate

    state, _ = load_checkpoint(args.checkpoint)
    manifest = read_manifest(args.manifest)
    if args.out is not None:
        _claim_file(args.out, args.force)
    entries = manifest.split(args.split)
    if not entries:
        raise ArgumentError(f"split {args.split!r} is empty")
    metric, rows = evaluate(state, _inputs_for(state, manifest, entries), return_predictions=True)
    name = "accuracy" if state.config.task == "classify" else "mae"
    if args.out is not None:
        Path(args.out).write_text(json.dumps(
            {"format_version": OUTPUT_FORMAT, "split": args.split, "metric_name": name,
             "metric": metric, "predictions": rows}, sort_keys=True, indent=1) + "\n")
    print(f"{name} {metric:.6f}")
    return 0


def cmd_clusters(args):
    from .model import build_input, embed_mesh, load_checkpoint, ready
    from .training import cluster_labels

    state, _ = load_checkpoint(args.checkpoint)
    if state.config.pooling_mode != "learnable":
        raise ArgumentError("clusters needs a checkpoint trained with learnable pooling")
    if state.reference is None:
        raise ArgumentError("checkpoint has no alignment reference")
    mesh = load_mesh(args.mesh)
    out = Path(args.out)
    from .mesh.io import sidecar_path
    _claim_file(out, args.force, sidecar_path(out))
    graph, emb, _ = embed_mesh(mesh, state.reference, d=state.config.spectral_dim)
    inp = ready(build_input(mesh, emb, graph, state.config), state.config)
    labels, S = cluster_labels(state, inp)
    width = len(str(S.shape[1] - 1))
    fields = {f"s1_{c:0{width}d}": S[:, c] for c in range(S.shape[1])}
    save_mesh(SurfaceMesh(vertices=mesh.vertices, faces=mesh.faces, fields=fields,
                          parcels=labels, edges=mesh.edges,
                          meta={"clusters_from": Path(args.checkpoint).name}), out)
    used = len(np.unique(labels))
    print(f"{mesh.n} nodes, {used} of {S.shape[1]} clusters used: {out}")
    return 0


def cmd_gradcheck(args):
    from .model import gradcheck_network

    cfg = effective("gradcheck", args, ["size", "seed", "grid", "kernel", "tol"])
    if cfg["size"] < 7:
        raise ArgumentError("--size must be at least 7")
    kernel = {"kind": "gaussian"} if cfg["kernel"] == "gaussian" else \
        {"kind": "bspline", "degree": 1, "grid": [cfg["grid"]] * 3}
    results = gradcheck_network(cfg["size"], cfg["seed"], kernel=kernel)
    name, err, where = max(results, key=lambda r: r[1])
    ok = err <= cfg["tol"]
    if args.verbose:
        for n, e, _ in results:
            print(f"  {n}: {e:.3e}")
    print(f"{'PASS' if ok else 'FAIL'} max relative error {err:.3e} "
          f"(worst parameter {name}, flat index {where})")
    return 0 if ok else 3


def cmd_experiment(args):
    from .experiments import run_experiment

    overrides = _read_config(args.config)
    if args.seeds is not None:
        overrides["seeds"] = args.seeds
    out = _claim_dir(args.out, args.force)
    summary = run_experiment(args.kind, overrides, out, log=_log)
    table = out / "table.tsv"
    if table.exists():
        print(table.read_text(), end="")
    else:
        print(json.dumps(summary, sort_keys=True))
    return 0


# -- parser ----------------------------------------------------------------

def build_parser():
    p = _Parser(prog="meshpool", description="Spectral graph convolution with learnable "
                "pooling on surface meshes.")
    p.add_argument("--version", action="version", version=f"meshpool {__version__}")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def command(name, func, help_text, out_help=None, config=True):
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.set_defaults(func=func)
        if config:
            sp.add_argument("--config", help="JSON file with option values; flags override it")
        if out_help is not None:
            sp.add_argument("--out", required=True, help=out_help)
            sp.add_argument("--force", action="store_true", help="overwrite existing output")
        return sp

    g = command("gen-synthetic", cmd_gen_synthetic,
                "generate a labelled synthetic mesh dataset with a manifest",
                "output directory (meshes, manifest.tsv, config.json)")
    g.add_argument("--task", choices=sorted(TASKS), help="dataset task (default two_region_class)")
    g.add_argument("--count", type=int, help="number of meshes (default 100, minimum 10)")
    g.add_argument("--n-min", dest="n_min", type=int, help="smallest node count (default 500)")
    g.add_argument("--n-max", dest="n_max", type=int, help="largest node count (default 1000)")
    g.add_argument("--seed", type=int, help="generator seed (default 0)")
    g.add_argument("--delta", type=float, help="regional contrast (default 1.0)")
    g.add_argument("--noise", type=float, help="additive noise std (default 0.2)")
    g.add_argument("--n-parcels", dest="n_parcels", type=int, help="parcels per mesh (default 8)")
    g.add_argument("--parcel-contrast", dest="parcel_contrast", type=float,
                   help="per-parcel depth offset scale for parcel_size_reg (default 1.0)")

    s = command("subsample", cmd_subsample, "randomly subsample a mesh and rebuild k-NN edges",
                "output OFF path (a .fields.tsv sidecar is written next to it)")
    s.add_argument("--mesh", required=True, help="input OFF file")
    s.add_argument("--target-n", dest="target_n", type=int, help="nodes to keep (default 1000)")
    s.add_argument("--seed", type=int, help="sampling seed (default 0)")

    e = command("embed", cmd_embed, "write unaligned spectral embeddings for every mesh",
                "output directory of *.emb.tsv files plus index.tsv")
    e.add_argument("--manifest", required=True, help="dataset manifest")
    e.add_argument("--d", type=int, help="embedding dimension (default 3)")

    a = command("align", cmd_align, "ICP-align embeddings to a reference embedding",
                "output directory (aligned embeddings, *.pi.txt, alignment.tsv)")
    a.add_argument("--embeddings", required=True, help="embedding file or directory from embed")
    a.add_argument("--reference", required=True, help="reference embedding file")
    a.add_argument("--max-iters", dest="max_iters", type=int, help="ICP iterations (default 50)")
    a.add_argument("--tol", type=float, help="residual improvement tolerance (default 1e-9)")
    a.add_argument("--orthogonal", action="store_true", default=None,
                   help="project R onto the nearest orthogonal matrix")

    t = command("train", cmd_train, "train a model on a manifest",
                "output directory (model.ckpt, report.json, config.json)")
    t.add_argument("--manifest", required=True, help="dataset manifest")
    t.add_argument("--epochs", type=int, help="training epochs (default 40)")
    t.add_argument("--lr", type=float, help="Adam learning rate (default 1e-3)")
    t.add_argument("--seed", type=int, help="initialization and shuffling seed (default 0)")
    t.add_argument("--alpha", type=float, help="Laplacian regularization weight (default 1e-3)")
    t.add_argument("--patience", type=int, help="early stopping patience, 0 disables")
    t.add_argument("--pooling", choices=["learnable", "global_average", "fixed_parcellation",
                                         "spectral_kmeans"], help="pooling strategy")
    t.add_argument("--grid", type=int, help="B-spline grid size per dimension (default 5)")
    t.add_argument("-v", "--verbose", action="store_true", help="log every epoch to stderr")

    v = command("eval", cmd_eval, "evaluate a checkpoint on one manifest split", config=False)
    v.add_argument("--checkpoint", required=True, help="model.ckpt from train")
    v.add_argument("--manifest", required=True, help="dataset manifest")
    v.add_argument("--split", default="test", choices=["train", "val", "test"],
                   help="split to evaluate (default test)")
    v.add_argument("--out", help="JSON file for per-mesh predictions")
    v.add_argument("--force", action="store_true", help="overwrite existing output")

    c = command("clusters", cmd_clusters, "export learned first-level clusters of one mesh",
                "output OFF path; the sidecar holds s1_* probabilities and the argmax parcel",
                config=False)
    c.add_argument("--checkpoint", required=True, help="model.ckpt from train")
    c.add_argument("--mesh", required=True, help="input OFF file")

    gc = command("gradcheck", cmd_gradcheck,
                 "finite-difference check of the full network on a synthetic mesh")
    gc.add_argument("--size", type=int, help="mesh node count (default 30)")
    gc.add_argument("--seed", type=int, help="seed (default 0)")
    gc.add_argument("--grid", type=int, help="B-spline grid per dimension (default 2)")
    gc.add_argument("--kernel", choices=["bspline", "gaussian"], help="kernel family")
    gc.add_argument("--tol", type=float, help="pass threshold (default 1e-4)")
    gc.add_argument("-v", "--verbose", action="store_true", help="print every parameter")

    from .experiments import KINDS
    x = command("experiment", cmd_experiment, "run a repeated-seed experiment and write a table",
                "output directory (config.json, table.tsv, runs/)")
    x.add_argument("kind", choices=KINDS, help="experiment family")
    x.add_argument("--seeds", type=int, nargs="+", help="training seeds")
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "func", None) is None:
            parser.print_help(sys.stderr)
            return 1
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except MeshPoolError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
