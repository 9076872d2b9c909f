"""Synthetic closed surfaces standing in for cortical meshes at desk scale."""
import numpy as np
from scipy.spatial import ConvexHull

from ..errors import ArgumentError
from .core import SurfaceMesh

# Shared low-frequency shape of every blob: a strongly anisotropic ellipsoid
# with asymmetric dents and bulges, so that the spectral embeddings of
# different blobs align to each other without sign ambiguity in most cases.
TEMPLATE_AXES = (2.0, 1.2, 0.6)
TEMPLATE_BUMPS = (
    ((1.0, 0.0, 0.0), -0.6, 0.6),
    ((0.5, 1.0, 0.3), 0.6, 0.3),
    ((0.2, -0.5, 1.0), 0.6, 0.3),
    ((-1.0, -0.5, -0.2), 0.5, 0.3),
    ((-0.5, 0.2, -1.0), 0.4, 0.3),
)


def icosphere(level):
    """Unit icosphere after ``level`` midpoint subdivisions: 10*4**level + 2 vertices."""
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(level):
        cache = {}

        def midpoint(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return np.array(verts), np.array(faces, dtype=np.int64)


def icosphere_count(level):
    return 10 * 4 ** level + 2


def _hull_faces(points):
    """Outward-oriented triangles of the convex hull of points on a sphere."""
    hull = ConvexHull(points)
    faces = hull.simplices.astype(np.int64)
    a, b, c = points[faces[:, 0]], points[faces[:, 1]], points[faces[:, 2]]
    normal = np.cross(b - a, c - a)
    inward = np.einsum("ij,ij->i", normal, a + b + c) < 0
    faces[inward] = faces[inward][:, [0, 2, 1]]
    return faces


def _radial_profile(directions, bumps):
    log_r = np.zeros(directions.shape[0])
    for center, amp, width in bumps:
        c = np.asarray(center, dtype=np.float64)
        c = c / np.linalg.norm(c)
        d2 = ((directions - c) ** 2).sum(axis=1)
        log_r += amp * np.exp(-d2 / (2.0 * width ** 2))
    return np.exp(log_r)


def _random_bumps(rng, count, amplitude):
    bumps = []
    for _ in range(count):
        c = rng.normal(size=3)
        bumps.append((c / np.linalg.norm(c), float(rng.uniform(-amplitude, amplitude)),
                      float(rng.uniform(0.3, 0.6))))
    return bumps


def sphere_points(n, seed):
    """``n`` well-spread unit vectors: a seeded subset of the next icosphere, jittered."""
    level = 0
    while icosphere_count(level) < n:
        level += 1
    verts, faces = icosphere(level)
    if verts.shape[0] == n:
        return verts, faces
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(verts.shape[0], size=n, replace=False))
    pts = verts[keep]
    spacing = 2.0 / np.sqrt(verts.shape[0])
    pts = pts + rng.normal(scale=0.15 * spacing, size=pts.shape)
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    return pts, _hull_faces(pts)


def gen_synthetic_mesh(kind, n, seed, n_random_bumps=4, bump_amplitude=0.05):
    """Closed triangulated surface with exactly ``n`` vertices.

    ``sphere``: unit sphere (the exact icosphere when ``n`` is an icosphere
    count). ``blob``: the shared template shape with seeded random bumps.
    Fields ``thickness`` and ``depth`` are filled with smooth seeded values.
    """
    if kind not in ("sphere", "blob"):
        raise ArgumentError(f"unknown mesh kind {kind!r}")
    n = int(n)
    if n < 4:
        raise ArgumentError(f"n must be >= 4, got {n}")
    rng = np.random.default_rng([seed, 7])
    directions, faces = sphere_points(n, seed)
    if kind == "sphere":
        vertices = directions.copy()
        radial = np.zeros(n)
    else:
        bumps = list(TEMPLATE_BUMPS) + _random_bumps(rng, n_random_bumps, bump_amplitude)
        r = _radial_profile(directions, bumps)
        vertices = directions * r[:, None] * np.asarray(TEMPLATE_AXES)
        radial = np.linalg.norm(vertices, axis=1) - 1.0
    thickness = 2.5 + 0.1 * rng.normal(size=n)
    return SurfaceMesh(
        vertices=vertices,
        faces=faces,
        fields={"thickness": thickness, "depth": radial},
        meta={"kind": kind, "seed": str(seed)},
    )


def watertight(mesh):
    """True iff every face edge is shared by exactly two faces."""
    f = mesh.faces
    e = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    return bool(np.all(counts == 2))
