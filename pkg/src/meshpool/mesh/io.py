"""OFF geometry files with a tab-separated field sidecar.

Geometry (``name.off``)::

    OFF
    # meta {"key": "value", ...}      optional, JSON object of strings
    N F 0
    x y z                              N lines
    3 i j k                            triangle
    2 i j                              explicit edge (k-NN rebuilt meshes)

Sidecar (``name.fields.tsv``): a header of tab-separated field names, the
reserved name ``parcel`` holding integer labels, then N rows. The sidecar
is omitted when a mesh has neither fields nor parcels.
"""
import json
from pathlib import Path

import numpy as np

from ..errors import ArgumentError, ConnectivityError, ParseError
from .core import SurfaceMesh, build_weighted_graph, check_connected

PARCEL_FIELD = "parcel"


def sidecar_path(path):
    path = Path(path)
    return path.with_name(path.stem + ".fields.tsv")


def _fmt(x):
    return repr(float(x))


def save_mesh(mesh, path):
    path = Path(path)
    lines = ["OFF"]
    if mesh.meta:
        lines.append("# meta " + json.dumps(mesh.meta, sort_keys=True))
    edges = mesh.edges if mesh.edges is not None else np.zeros((0, 2), dtype=np.int64)
    lines.append(f"{mesh.n} {mesh.faces.shape[0] + edges.shape[0]} 0")
    lines.extend(" ".join(_fmt(c) for c in v) for v in mesh.vertices)
    lines.extend(f"3 {a} {b} {c}" for a, b, c in mesh.faces)
    lines.extend(f"2 {a} {b}" for a, b in edges)
    path.write_text("\n".join(lines) + "\n")

    side = sidecar_path(path)
    names = list(mesh.fields)
    if PARCEL_FIELD in names:
        raise ArgumentError(f"field name {PARCEL_FIELD!r} is reserved for parcel labels")
    columns = [[_fmt(x) for x in mesh.fields[k]] for k in names]
    if mesh.parcels is not None:
        names.append(PARCEL_FIELD)
        columns.append([str(int(x)) for x in mesh.parcels])
    if names:
        rows = ["\t".join(names)]
        rows.extend("\t".join(col[i] for col in columns) for i in range(mesh.n))
        side.write_text("\n".join(rows) + "\n")
    elif side.exists():
        side.unlink()


def _tokens(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ParseError(str(exc), path) from None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        yield lineno, raw.strip()


def _parse_off(path):
    meta = {}
    lines = iter(_tokens(path))
    header_seen = False
    counts = None
    for lineno, line in lines:
        if not line:
            continue
        if line.startswith("#"):
            if line.startswith("# meta "):
                try:
                    meta = json.loads(line[len("# meta "):])
                except json.JSONDecodeError as exc:
                    raise ParseError(f"bad meta comment: {exc}", path, lineno) from None
            continue
        if not header_seen:
            if line != "OFF":
                raise ParseError(f"expected 'OFF' header, got {line!r}", path, lineno)
            header_seen = True
            continue
        parts = line.split()
        try:
            counts = [int(p) for p in parts]
        except ValueError:
            raise ParseError(f"bad counts line {line!r}", path, lineno) from None
        if len(counts) != 3 or min(counts) < 0:
            raise ParseError(f"counts line must be 'N F 0', got {line!r}", path, lineno)
        break
    if counts is None:
        raise ParseError("missing OFF header or counts line", path)
    n, n_faces = counts[0], counts[1]

    def content():
        for lineno, line in lines:
            if line and not line.startswith("#"):
                yield lineno, line

    body = content()
    vertices = np.empty((n, 3))
    for i in range(n):
        lineno, line = next(body, (None, None))
        if line is None:
            raise ParseError(f"expected {n} vertices, file ended after {i}", path)
        parts = line.split()
        try:
            if len(parts) != 3:
                raise ValueError
            vertices[i] = [float(p) for p in parts]
        except ValueError:
            raise ParseError(f"bad vertex line {line!r}", path, lineno) from None
    faces, edges = [], []
    for i in range(n_faces):
        lineno, line = next(body, (None, None))
        if line is None:
            raise ParseError(f"expected {n_faces} faces, file ended after {i}", path)
        try:
            parts = [int(p) for p in line.split()]
        except ValueError:
            raise ParseError(f"bad face line {line!r}", path, lineno) from None
        if not parts or parts[0] not in (2, 3) or len(parts) != parts[0] + 1:
            raise ParseError(f"face line must be '3 i j k' or '2 i j', got {line!r}",
                             path, lineno)
        idx = parts[1:]
        if min(idx) < 0 or max(idx) >= n:
            raise ParseError(f"vertex index out of range [0, {n}) in {line!r}", path, lineno)
        if len(set(idx)) != len(idx):
            raise ParseError(f"degenerate face {line!r}", path, lineno)
        (faces if parts[0] == 3 else edges).append(idx)
    extra = next(body, None)
    if extra is not None:
        raise ParseError(f"unexpected trailing content {extra[1]!r}", path, extra[0])
    return vertices, np.array(faces, dtype=np.int64).reshape(-1, 3), \
        (np.array(edges, dtype=np.int64).reshape(-1, 2) if edges else None), meta


def _parse_sidecar(path, n):
    rows = [(lineno, line) for lineno, line in _tokens(path) if line]
    if not rows:
        raise ParseError("empty sidecar", path)
    names = rows[0][1].split("\t")
    if len(set(names)) != len(names):
        raise ParseError("duplicate field names", path, rows[0][0])
    if len(rows) - 1 != n:
        raise ParseError(f"expected {n} rows, got {len(rows) - 1}", path)
    cols = [[] for _ in names]
    for lineno, line in rows[1:]:
        parts = line.split("\t")
        if len(parts) != len(names):
            raise ParseError(f"expected {len(names)} columns, got {len(parts)}", path, lineno)
        for col, name, p in zip(cols, names, parts):
            try:
                col.append(int(p) if name == PARCEL_FIELD else float(p))
            except ValueError:
                raise ParseError(f"bad value {p!r} for {name!r}", path, lineno) from None
    fields, parcels = {}, None
    for name, col in zip(names, cols):
        if name == PARCEL_FIELD:
            parcels = np.array(col, dtype=np.int64)
        else:
            fields[name] = np.array(col, dtype=np.float64)
    return fields, parcels


def load_mesh(path, field_names=None, check_connectivity=True):
    """Read a mesh written by :func:`save_mesh`.

    ``field_names`` selects and orders fields (a manifest's field order).
    """
    path = Path(path)
    vertices, faces, edges, meta = _parse_off(path)
    fields, parcels = {}, None
    side = sidecar_path(path)
    if side.exists():
        fields, parcels = _parse_sidecar(side, vertices.shape[0])
    if field_names is not None:
        missing = [k for k in field_names if k not in fields]
        if missing:
            raise ParseError(f"sidecar lacks fields {missing}", side)
        fields = {k: fields[k] for k in field_names}
    mesh = SurfaceMesh(vertices=vertices, faces=faces, fields=fields, parcels=parcels,
                       meta=meta, edges=edges)
    if check_connectivity:
        graph = build_weighted_graph(mesh, require_connected=False)
        if not check_connected(graph):
            raise ConnectivityError(f"{path}: mesh is not connected")
    return mesh
