"""Labelled synthetic datasets and the on-disk manifest.

Manifest format (tab-separated, ``#`` lines are header comments)::

    # meshpool-manifest 1
    # task: two_region_class
    # fields: thickness,depth
    path	split	target
    mesh_0000.off	train	1
    mesh_0001.off	test	0.124,0.131,...

Paths are relative to the manifest's directory. Split sizes follow the
floor/remainder rule: ``n_train = floor(r_train * count)``,
``n_val = floor(r_val * count)``, ``n_test`` takes the remainder.
"""
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse.csgraph import dijkstra

from ..clustering import kmeans
from ..errors import ArgumentError, ParseError
from .core import build_weighted_graph
from .io import load_mesh, save_mesh
from .synthetic import TEMPLATE_AXES, gen_synthetic_mesh

MANIFEST_VERSION = 1
SPLITS = ("train", "val", "test")
TASKS = {"two_region_class": "classify", "parcel_size_reg": "regress"}

# Region centres on the template shape (directions before anisotropic
# scaling). They sit on the two flanks of the middle axis, so a residual
# sign flip of the first or third embedding axis leaves them in place.
REGION_CENTRES = ((0.0, 1.0, 0.0), (0.0, -1.0, 0.0))
REGION_RADIUS = 0.95


@dataclass
class ManifestEntry:
    path: str
    split: str
    target: object  # int class index or tuple of floats
    mesh: object = None  # in-memory SurfaceMesh, when available


@dataclass
class DatasetManifest:
    task: str
    field_names: list
    entries: list = field(default_factory=list)
    root: Path = None

    @property
    def mode(self):
        return TASKS[self.task]

    @property
    def n_outputs(self):
        if self.mode == "classify":
            return 1 + max(int(e.target) for e in self.entries)
        return len(self.entries[0].target)

    def split(self, name):
        return [e for e in self.entries if e.split == name]

    def mesh(self, entry):
        if entry.mesh is not None:
            return entry.mesh
        if self.root is None:
            raise ArgumentError(f"entry {entry.path!r} has no mesh and manifest has no root")
        return load_mesh(Path(self.root) / entry.path, field_names=self.field_names)


def split_counts(count, ratios=(0.7, 0.1, 0.2)):
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ArgumentError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    n_train = math.floor(ratios[0] * count + 1e-9)
    n_val = math.floor(ratios[1] * count + 1e-9)
    return n_train, n_val, count - n_train - n_val


def assign_splits(count, seed, ratios=(0.7, 0.1, 0.2)):
    n_train, n_val, _ = split_counts(count, ratios)
    order = np.random.default_rng([seed, 11]).permutation(count)
    tags = np.empty(count, dtype=object)
    tags[order[:n_train]] = "train"
    tags[order[n_train:n_train + n_val]] = "val"
    tags[order[n_train + n_val:]] = "test"
    return list(tags)


def _template_directions(mesh):
    d = mesh.vertices / np.asarray(TEMPLATE_AXES)
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def geodesic_disc(mesh, centre, radius, graph=None):
    """Vertices within graph-geodesic ``radius`` of the vertex nearest ``centre``."""
    graph = graph or build_weighted_graph(mesh)
    c = np.asarray(centre, dtype=np.float64)
    seed_vertex = int(np.argmax(_template_directions(mesh) @ (c / np.linalg.norm(c))))
    lengths = graph.adjacency.copy()
    lengths.data = np.linalg.norm(
        mesh.vertices[np.repeat(np.arange(mesh.n), np.diff(lengths.indptr))]
        - mesh.vertices[lengths.indices], axis=1)
    dist = dijkstra(lengths, directed=False, indices=seed_vertex)
    return np.flatnonzero(dist <= radius)


def fibonacci_directions(count):
    i = np.arange(count) + 0.5
    polar = np.arccos(1.0 - 2.0 * i / count)
    azimuth = np.pi * (1.0 + 5 ** 0.5) * i
    return np.column_stack([np.cos(azimuth) * np.sin(polar),
                            np.sin(azimuth) * np.sin(polar), np.cos(polar)])


def anchored_parcels(mesh, n_parcels):
    """k-means parcels on vertex positions, started from fixed template anchors.

    Anchored starts keep parcel ``p`` at the same place on every mesh.
    """
    anchors = fibonacci_directions(n_parcels)
    dirs = _template_directions(mesh)
    start = mesh.vertices[np.argmax(dirs @ anchors.T, axis=0)]
    return kmeans(mesh.vertices, n_parcels, init=start, max_iter=20).labels


def two_region_signal(mesh, label, delta, graph=None):
    """Zero-mean field with mean(R1) - mean(R2) = +delta (class 0) or -delta (class 1)."""
    r1 = geodesic_disc(mesh, REGION_CENTRES[0], REGION_RADIUS, graph)
    r2 = geodesic_disc(mesh, REGION_CENTRES[1], REGION_RADIUS, graph)
    if np.intersect1d(r1, r2).size:
        raise ArgumentError("regions overlap; mesh too small for the two-region task")
    sign = 1.0 if int(label) == 0 else -1.0
    signal = np.zeros(mesh.n)
    signal[r1] = 0.5 * sign * delta
    signal[r2] = -0.5 * sign * delta
    return signal - signal.mean(), r1, r2


def parcel_levels(n_parcels):
    """Per-parcel depth offsets: a zero-mean unit-step ramp, shuffled once so that
    neighbouring parcels do not get neighbouring levels."""
    levels = np.arange(n_parcels, dtype=np.float64) - 0.5 * (n_parcels - 1)
    return np.random.default_rng(11).permutation(levels)


def gen_labeled_dataset(task, count, n_range, seed, delta=1.0, noise=0.2,
                        n_parcels=8, ratios=(0.7, 0.1, 0.2), parcel_contrast=1.0):
    """Generate an in-memory labelled dataset of synthetic blobs.

    ``two_region_class``: class 0 raises ``thickness`` on region R1 and
    lowers it on R2, class 1 the reverse; the field is centred so the
    global mean carries no class signal. ``parcel_size_reg``: targets are
    per-parcel vertex-count fractions, and ``depth`` is offset per parcel by
    ``parcel_contrast`` times a fixed level so parcels are visible in the
    inputs. Every mesh carries anchored parcels.
    """
    if task not in TASKS:
        raise ArgumentError(f"unknown task {task!r}; expected one of {sorted(TASKS)}")
    count = int(count)
    if count < 10:
        raise ArgumentError(f"count must be >= 10, got {count}")
    lo, hi = int(n_range[0]), int(n_range[1])
    if not 12 <= lo <= hi:
        raise ArgumentError(f"bad node range {n_range}")
    rng = np.random.default_rng([seed, 3])
    sizes = rng.integers(lo, hi + 1, size=count)
    splits = assign_splits(count, seed, ratios)
    entries = []
    for i in range(count):
        mesh_seed = int(seed) * 100003 + i
        base = gen_synthetic_mesh("blob", int(sizes[i]), mesh_seed)
        graph = build_weighted_graph(base)
        noise_rng = np.random.default_rng([seed, 5, i])
        parcels = anchored_parcels(base, n_parcels)
        depth = base.fields["depth"] + noise * noise_rng.normal(size=base.n)
        if task == "two_region_class":
            label = i % 2
            signal, _, _ = two_region_signal(base, label, delta, graph)
            thickness = 2.5 + signal + noise * noise_rng.normal(size=base.n)
            target = label
            meta_target = str(label)
        else:
            counts = np.bincount(parcels, minlength=n_parcels)
            target = tuple(float(c) / base.n for c in counts)
            thickness = base.fields["thickness"] + noise * noise_rng.normal(size=base.n)
            depth = depth + parcel_contrast * parcel_levels(n_parcels)[parcels]
            meta_target = ",".join(repr(t) for t in target)
        mesh = type(base)(
            vertices=base.vertices, faces=base.faces,
            fields={"thickness": thickness, "depth": depth},
            parcels=parcels,
            meta={"task": task, "index": str(i), "target": meta_target},
        )
        entries.append(ManifestEntry(path=f"mesh_{i:04d}.off", split=splits[i],
                                     target=target, mesh=mesh))
    return DatasetManifest(task=task, field_names=["thickness", "depth"], entries=entries)


def _format_target(target):
    if isinstance(target, (tuple, list, np.ndarray)):
        return ",".join(repr(float(t)) for t in target)
    return str(int(target))


def write_manifest(manifest, path):
    path = Path(path)
    lines = [f"# meshpool-manifest {MANIFEST_VERSION}", f"# task: {manifest.task}",
             f"# fields: {','.join(manifest.field_names)}", "path\tsplit\ttarget"]
    lines.extend(f"{e.path}\t{e.split}\t{_format_target(e.target)}" for e in manifest.entries)
    path.write_text("\n".join(lines) + "\n")


def save_dataset(manifest, out_dir, manifest_name="manifest.tsv"):
    """Write every in-memory mesh plus the manifest into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for entry in manifest.entries:
        save_mesh(manifest.mesh(entry), out_dir / entry.path)
    write_manifest(manifest, out_dir / manifest_name)
    manifest.root = out_dir
    return out_dir / manifest_name


def read_manifest(path, check_files=True):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(str(exc), path) from None
    header, task, field_names, entries = None, None, None, []
    columns_seen = False
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("meshpool-manifest"):
                header = body.split()[-1]
            elif body.startswith("task:"):
                task = body[len("task:"):].strip()
            elif body.startswith("fields:"):
                raw = body[len("fields:"):].strip()
                field_names = [f for f in raw.split(",") if f]
            continue
        if not columns_seen:
            if line.split("\t") != ["path", "split", "target"]:
                raise ParseError("expected column header 'path\\tsplit\\ttarget'", path, lineno)
            columns_seen = True
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ParseError(f"expected 3 columns, got {len(parts)}", path, lineno)
        mesh_path, split, raw_target = parts
        if split not in SPLITS:
            raise ParseError(f"unknown split {split!r}", path, lineno)
        try:
            if task is not None and TASKS.get(task) == "classify":
                target = int(raw_target)
            else:
                target = tuple(float(t) for t in raw_target.split(","))
        except ValueError:
            raise ParseError(f"bad target {raw_target!r}", path, lineno) from None
        if check_files and not (path.parent / mesh_path).exists():
            raise ParseError(f"referenced mesh {mesh_path!r} does not exist", path, lineno)
        entries.append(ManifestEntry(path=mesh_path, split=split, target=target))
    if header is None or task not in TASKS or field_names is None:
        raise ParseError("manifest header must declare version, task and fields", path)
    return DatasetManifest(task=task, field_names=field_names, entries=entries,
                           root=path.parent)
