"""Surface mesh and weighted-graph types."""
from collections import deque
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from ..errors import ArgumentError, ConnectivityError

DEFAULT_EPSILON = 1e-6


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype)
    a.flags.writeable = False
    return a


@dataclass(eq=False)
class SurfaceMesh:
    """Triangulated surface with per-vertex scalar fields.

    ``edges`` holds extra explicit edges for meshes whose connectivity is
    not face-derived (k-NN rebuilt after subsampling). ``fields`` keeps
    insertion order, which is the column order used everywhere downstream.
    """

    vertices: np.ndarray
    faces: np.ndarray
    fields: dict = field(default_factory=dict)
    parcels: np.ndarray = None
    meta: dict = field(default_factory=dict)
    edges: np.ndarray = None

    def __post_init__(self):
        self.vertices = _frozen(self.vertices, np.float64).reshape(-1, 3)
        self.faces = _frozen(self.faces, np.int64).reshape(-1, 3)
        n = self.n
        if self.faces.size:
            if self.faces.min() < 0 or self.faces.max() >= n:
                raise ArgumentError(f"face index out of range [0, {n})")
            f = self.faces
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise ArgumentError("degenerate face (repeated vertex index)")
        if self.edges is not None:
            self.edges = _frozen(self.edges, np.int64).reshape(-1, 2)
            if self.edges.size and (self.edges.min() < 0 or self.edges.max() >= n):
                raise ArgumentError(f"edge index out of range [0, {n})")
            if np.any(self.edges[:, 0] == self.edges[:, 1]):
                raise ArgumentError("self-loop edge")
        fields = {}
        for name, values in self.fields.items():
            values = _frozen(values, np.float64).reshape(-1)
            if values.shape[0] != n:
                raise ArgumentError(f"field {name!r} has length {values.shape[0]}, expected {n}")
            fields[str(name)] = values
        self.fields = fields
        if self.parcels is not None:
            self.parcels = _frozen(self.parcels, np.int64).reshape(-1)
            if self.parcels.shape[0] != n:
                raise ArgumentError(f"parcels has length {self.parcels.shape[0]}, expected {n}")
        self.meta = {str(k): str(v) for k, v in self.meta.items()}

    @property
    def n(self):
        return self.vertices.shape[0]

    @property
    def field_names(self):
        return list(self.fields)

    def edge_list(self):
        """Unique undirected edges (i < j), sorted lexicographically."""
        parts = []
        if self.faces.size:
            f = self.faces
            parts.append(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]))
        if self.edges is not None and self.edges.size:
            parts.append(self.edges)
        if not parts:
            return np.zeros((0, 2), dtype=np.int64)
        e = np.sort(np.concatenate(parts), axis=1)
        return np.unique(e, axis=0)

    def field_matrix(self, names=None):
        names = self.field_names if names is None else list(names)
        missing = [k for k in names if k not in self.fields]
        if missing:
            raise ArgumentError(f"mesh lacks fields {missing}")
        if not names:
            return np.zeros((self.n, 0))
        return np.column_stack([self.fields[k] for k in names])

    def equals(self, other):
        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and np.array_equal(a, b)

        edges_a = self.edges if self.edges is not None and self.edges.size else None
        edges_b = other.edges if other.edges is not None and other.edges.size else None
        return (
            same(self.vertices, other.vertices)
            and same(self.faces, other.faces)
            and list(self.fields) == list(other.fields)
            and all(same(self.fields[k], other.fields[k]) for k in self.fields)
            and same(self.parcels, other.parcels)
            and self.meta == other.meta
            and same(edges_a, edges_b)
        )

    def permuted(self, perm):
        """Relabel vertices so new vertex ``k`` is old vertex ``perm[k]``."""
        perm = np.asarray(perm, dtype=np.int64)
        inverse = np.empty_like(perm)
        inverse[perm] = np.arange(perm.size)
        return SurfaceMesh(
            vertices=self.vertices[perm],
            faces=inverse[self.faces],
            fields={k: v[perm] for k, v in self.fields.items()},
            parcels=None if self.parcels is None else self.parcels[perm],
            meta=dict(self.meta),
            edges=None if self.edges is None else inverse[self.edges],
        )


class WeightedGraph:
    """Symmetric weighted adjacency without self-loops.

    ``edges``/``weights`` list each undirected edge once (i < j);
    ``adjacency`` is the symmetric CSR matrix holding both directions.
    """

    def __init__(self, n, edges, weights):
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        weights = np.asarray(weights, dtype=np.float64).reshape(-1)
        if edges.shape[0] != weights.shape[0]:
            raise ArgumentError("edges and weights differ in length")
        if edges.size:
            if np.any(edges[:, 0] == edges[:, 1]):
                raise ArgumentError("self-loops are not stored in a WeightedGraph")
            if edges.min() < 0 or edges.max() >= n:
                raise ArgumentError(f"edge index out of range [0, {n})")
        if np.any(~np.isfinite(weights)) or np.any(weights <= 0):
            raise ArgumentError("edge weights must be finite and > 0")
        lo = np.minimum(edges[:, 0], edges[:, 1])
        hi = np.maximum(edges[:, 0], edges[:, 1])
        order = np.lexsort((hi, lo))
        self.n = int(n)
        self.edges = np.column_stack([lo[order], hi[order]]) if edges.size else edges
        self.weights = weights[order]
        if self.edges.shape[0] and np.any(np.all(np.diff(self.edges, axis=0) == 0, axis=1)):
            raise ArgumentError("duplicate edge")
        rows = np.concatenate([self.edges[:, 0], self.edges[:, 1]])
        cols = np.concatenate([self.edges[:, 1], self.edges[:, 0]])
        data = np.concatenate([self.weights, self.weights])
        adj = sp.csr_matrix((data, (rows, cols)), shape=(self.n, self.n))
        adj.sort_indices()
        self.adjacency = adj
        self.degrees = np.asarray(adj.sum(axis=1)).reshape(-1)
        for a in (self.edges, self.weights, self.degrees):
            a.flags.writeable = False

    @property
    def n_edges(self):
        return self.edges.shape[0]

    def dense(self):
        return self.adjacency.toarray()

    def neighbors(self, i):
        a = self.adjacency
        return a.indices[a.indptr[i]:a.indptr[i + 1]]

    def permuted(self, perm):
        perm = np.asarray(perm, dtype=np.int64)
        inverse = np.empty_like(perm)
        inverse[perm] = np.arange(perm.size)
        return WeightedGraph(self.n, inverse[self.edges], self.weights)


def build_weighted_graph(mesh, epsilon=DEFAULT_EPSILON, require_connected=True):
    """Inverse-distance weights ``1 / (|x_i - x_j| + epsilon)`` on mesh edges."""
    if not epsilon > 0:
        raise ArgumentError(f"epsilon must be > 0, got {epsilon}")
    edges = mesh.edge_list()
    lengths = np.linalg.norm(mesh.vertices[edges[:, 0]] - mesh.vertices[edges[:, 1]], axis=1)
    graph = WeightedGraph(mesh.n, edges, 1.0 / (lengths + epsilon))
    if require_connected and not check_connected(graph):
        raise ConnectivityError(f"mesh with {mesh.n} vertices is not connected")
    return graph


def check_connected(graph):
    """True iff a breadth-first traversal from node 0 reaches every node."""
    if graph.n <= 1:
        return True
    indptr, indices = graph.adjacency.indptr, graph.adjacency.indices
    seen = np.zeros(graph.n, dtype=bool)
    seen[0] = True
    queue = deque([0])
    count = 1
    while queue:
        i = queue.popleft()
        for j in indices[indptr[i]:indptr[i + 1]]:
            if not seen[j]:
                seen[j] = True
                count += 1
                queue.append(j)
    return count == graph.n


def knn_edges(points, k):
    """Undirected edges joining each point to its ``k`` nearest others."""
    n = points.shape[0]
    k = min(k, n - 1)
    _, idx = cKDTree(points).query(points, k=k + 1)
    rows = np.repeat(np.arange(n), k)
    cols = idx[:, 1:].reshape(-1)
    e = np.sort(np.column_stack([rows, cols]), axis=1)
    e = e[e[:, 0] != e[:, 1]]
    return np.unique(e, axis=0)


def subsample_mesh(mesh, target_n, seed, k_start=5, return_indices=False):
    """Keep a seeded uniform subset of vertices and rebuild k-NN connectivity.

    ``k`` grows from ``k_start`` until the rebuilt graph is connected. With
    ``return_indices`` the source index of every kept vertex is returned too.
    """
    target_n = int(target_n)
    if not 3 <= target_n <= mesh.n:
        raise ArgumentError(f"target_n must lie in [3, {mesh.n}], got {target_n}")
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(mesh.n, size=target_n, replace=False))
    points = mesh.vertices[keep]
    k = k_start
    while True:
        edges = knn_edges(points, k)
        adj = sp.coo_matrix((np.ones(len(edges)), (edges[:, 0], edges[:, 1])),
                            shape=(target_n, target_n))
        n_comp, _ = connected_components(adj, directed=False)
        if n_comp == 1 or k >= target_n - 1:
            break
        k += 1
    meta = dict(mesh.meta)
    meta["subsample_seed"] = str(seed)
    meta["subsample_k"] = str(k)
    out = SurfaceMesh(
        vertices=points,
        faces=np.zeros((0, 3), dtype=np.int64),
        fields={name: values[keep] for name, values in mesh.fields.items()},
        parcels=None if mesh.parcels is None else mesh.parcels[keep],
        meta=meta,
        edges=edges,
    )
    return (out, keep) if return_indices else out
