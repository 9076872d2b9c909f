"""Normalized Laplacian, smallest eigenpairs, spectral coordinates and ICP alignment."""
import itertools
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.linalg import ArpackNoConvergence, eigsh
from scipy.spatial import cKDTree

from .errors import (
    ArgumentError, ConvergenceError, DegreeError, DisconnectedError, NumericalError,
    ParseError, StateError,
)

DEFAULT_DIM = 3
DEFAULT_ZERO_TOL = 1e-8
DENSE_MAX_NODES = 5000
BRUTE_FORCE_MAX_NODES = 1000
RESIDUAL_TOL = 1e-8
EMBEDDING_FORMAT_VERSION = 1


@dataclass(eq=False)
class Laplacian:
    """L = I - D^{-1/2} A D^{-1/2} as a symmetric CSR matrix."""

    n: int
    matrix: sp.csr_matrix

    def dense(self):
        return self.matrix.toarray()


@dataclass(eq=False)
class SpectralEmbedding:
    coords: np.ndarray
    eigenvalues: np.ndarray
    aligned: bool = False
    transform: np.ndarray = None
    reference: str = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        self.eigenvalues = np.asarray(self.eigenvalues, dtype=np.float64)
        if self.transform is None:
            self.transform = np.eye(self.d)

    @property
    def d(self):
        return self.coords.shape[1]

    @property
    def n(self):
        return self.coords.shape[0]

    def eigenvectors(self):
        """Unit eigenvectors U = coords Λ^{1/2} (only meaningful before alignment)."""
        if self.aligned:
            raise StateError("eigenvectors are not recoverable from an aligned embedding")
        return self.coords * np.sqrt(self.eigenvalues)

    def permuted(self, perm):
        return replace(self, coords=self.coords[np.asarray(perm)])


@dataclass
class Correspondence:
    pi: np.ndarray
    residual: float
    history: list = field(default_factory=list)


@dataclass(eq=False)
class Neighborhood:
    """CSR neighbor lists: node i's neighbors are ``indices[indptr[i]:indptr[i+1]]``."""

    indptr: np.ndarray
    indices: np.ndarray

    @classmethod
    def from_lists(cls, lists):
        indptr = np.zeros(len(lists) + 1, dtype=np.int64)
        indptr[1:] = np.cumsum([len(x) for x in lists])
        indices = np.array([j for x in lists for j in x], dtype=np.int64)
        return cls(indptr, indices)

    @property
    def n(self):
        return self.indptr.shape[0] - 1

    @property
    def n_edges(self):
        return int(self.indptr[-1])

    def rows(self):
        return np.repeat(np.arange(self.n, dtype=np.int64), np.diff(self.indptr))

    def lists(self):
        return [self.indices[self.indptr[i]:self.indptr[i + 1]].tolist() for i in range(self.n)]


def build_laplacian(graph):
    deg = np.asarray(graph.degrees, dtype=np.float64)
    if graph.n and np.any(deg <= 0):
        bad = int(np.flatnonzero(deg <= 0)[0])
        raise DegreeError(f"node {bad} has zero degree")
    A = graph.adjacency.tocoo()
    # sqrt(d_i d_j) is symmetric bit for bit, unlike dinv_i * dinv_j
    off = -A.data / np.sqrt(deg[A.row] * deg[A.col])
    rows = np.concatenate([A.row, np.arange(graph.n)])
    cols = np.concatenate([A.col, np.arange(graph.n)])
    data = np.concatenate([off, np.ones(graph.n)])
    L = sp.csr_matrix((data, (rows, cols)), shape=(graph.n, graph.n))
    L.sort_indices()
    return Laplacian(n=graph.n, matrix=L)


def _fix_signs(vecs):
    # largest-magnitude entry positive; first index wins ties
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs


def _solve(lap, k, dense_max):
    n = lap.n
    if n <= dense_max:
        return scipy.linalg.eigh(lap.dense(), subset_by_index=[0, k - 1])
    maxiter = 20 * n
    try:
        vals, vecs = eigsh(lap.matrix.tocsc(), k=k, sigma=-1e-3, which="LM",
                           tol=0.0, maxiter=maxiter)
    except ArpackNoConvergence as exc:
        raise ConvergenceError("shift-invert Lanczos did not converge", maxiter) from exc
    order = np.argsort(vals, kind="stable")
    return vals[order], vecs[:, order]


def smallest_eigenpairs(lap, d=DEFAULT_DIM, zero_tol=DEFAULT_ZERO_TOL, dense_max=DENSE_MAX_NODES):
    """The ``d`` smallest non-zero eigenpairs as normalized coordinates U Λ^{-1/2}."""
    if d < 1:
        raise ArgumentError(f"d must be >= 1, got {d}")
    if lap.n < d + 1:
        raise ArgumentError(f"graph with {lap.n} nodes has fewer than {d} non-zero eigenvalues")
    vals, vecs = _solve(lap, d + 1, dense_max)
    threshold = zero_tol * max(abs(vals[-1]), np.finfo(float).tiny)
    n_zero = int(np.count_nonzero(vals <= threshold))
    if n_zero > 1:
        raise DisconnectedError(f"{n_zero} eigenvalues below {threshold:.3g}: graph is disconnected")
    if n_zero == 0:
        raise NumericalError(f"no eigenvalue below {threshold:.3g}; Laplacian is not singular")
    vals, vecs = vals[1:], _fix_signs(vecs[:, 1:])
    L = lap.matrix
    for c in range(d):
        u = vecs[:, c]
        res = np.linalg.norm(L @ u - vals[c] * u)
        if res > RESIDUAL_TOL * np.linalg.norm(u):
            raise ConvergenceError(f"eigenpair {c} residual {res:.3g} exceeds {RESIDUAL_TOL}")
    return SpectralEmbedding(coords=vecs / np.sqrt(vals), eigenvalues=vals)


def embed_graph(graph, d=DEFAULT_DIM, zero_tol=DEFAULT_ZERO_TOL, dense_max=DENSE_MAX_NODES):
    return smallest_eigenpairs(build_laplacian(graph), d, zero_tol, dense_max)


def nearest(points, targets):
    """Index of the nearest row of ``targets`` for every row of ``points``."""
    if targets.shape[0] >= BRUTE_FORCE_MAX_NODES:
        return cKDTree(targets).query(points, k=1)[1].astype(np.int64)
    out = np.empty(points.shape[0], dtype=np.int64)
    step = max(1, 2_000_000 // max(1, targets.size))
    for start in range(0, points.shape[0], step):
        chunk = points[start:start + step]
        d2 = ((chunk[:, None, :] - targets[None, :, :]) ** 2).sum(axis=2)
        out[start:start + step] = d2.argmin(axis=1)
    return out


def _residual(moved, ref_coords):
    pi = nearest(moved, ref_coords)
    err = ((moved - ref_coords[pi]) ** 2).sum(axis=1).mean()
    return float(err), pi


def _principal_axes(X):
    w, V = np.linalg.eigh(X.T @ X / X.shape[0])
    return V[:, np.argsort(-w, kind="stable")]


def _start_candidates(emb_coords, ref_coords):
    d = emb_coords.shape[1]
    flips = [np.diag(s) for s in itertools.product((1.0, -1.0), repeat=d)]
    candidates = list(flips)
    # flips composed with a principal-axis match, for references that are
    # not in their own eigenbasis (rotated or previously aligned)
    V_emb, V_ref = _principal_axes(emb_coords), _principal_axes(ref_coords)
    for F in flips:
        R0 = V_emb @ F @ V_ref.T
        if not any(np.allclose(R0, C, atol=1e-12) for C in candidates):
            candidates.append(R0)
    return candidates


def align_to_reference(emb, ref, max_iters=50, tol=1e-9, orthogonal=False, reference_id=None):
    """Iterative closest point alignment of ``emb`` onto ``ref``.

    Alternates nearest-neighbour correspondences with the least-squares
    transform R = Λ^{1/2} Uᵀ Û^ref_π. With ``orthogonal`` the transform is
    projected to the nearest orthogonal matrix. Returns the aligned
    embedding and the final correspondence.
    """
    if emb.d != ref.d:
        raise ArgumentError(f"dimension mismatch: {emb.d} vs {ref.d}")
    if emb.aligned:
        raise StateError("embedding is already aligned")
    X, Y = emb.coords, ref.coords
    scaled_T = (emb.eigenvectors() * np.sqrt(emb.eigenvalues)).T  # Λ^{1/2} Uᵀ

    def solve_R(pi):
        R = scaled_T @ Y[pi]
        if orthogonal:
            W, _, Vt = np.linalg.svd(R)
            R = W @ Vt
        return R

    best = None
    for R0 in _start_candidates(X, Y):
        err, pi = _residual(X @ R0, Y)
        if best is None or err < best[0]:
            best = (err, pi, R0)
    err, pi, R = best
    if not np.isfinite(err):
        raise NumericalError("ICP residual is not finite")
    history = [err]
    for _ in range(max_iters):
        R_new = solve_R(pi)
        err_new, pi_new = _residual(X @ R_new, Y)
        if not np.isfinite(err_new):
            raise NumericalError("ICP residual is not finite")
        if err_new > err:
            break
        improvement = err - err_new
        R, pi, err = R_new, pi_new, err_new
        history.append(err)
        if improvement < tol:
            break
    aligned = SpectralEmbedding(coords=X @ R, eigenvalues=emb.eigenvalues, aligned=True,
                                transform=R, reference=reference_id)
    return aligned, Correspondence(pi=pi, residual=err, history=history)


def as_reference(emb, reference_id=None):
    """Mark an unaligned embedding as the alignment reference (identity transform)."""
    return SpectralEmbedding(coords=emb.coords, eigenvalues=emb.eigenvalues, aligned=True,
                             transform=np.eye(emb.d), reference=reference_id)


def knn_in_embedding(emb, k):
    """k nearest distinct nodes by embedding distance, then the node itself.

    Ties are broken by the smaller index.
    """
    X = emb.coords
    n = X.shape[0]
    if not 0 <= k < n:
        raise ArgumentError(f"k must lie in [0, {n}), got {k}")
    out = np.empty((n, k + 1), dtype=np.int64)
    out[:, k] = np.arange(n)
    if k == 0:
        return Neighborhood(np.arange(0, n + 1, dtype=np.int64), out.reshape(-1))
    if n < BRUTE_FORCE_MAX_NODES:
        step = max(1, 2_000_000 // max(1, n * X.shape[1]))
        for start in range(0, n, step):
            rows = np.arange(start, min(n, start + step))
            d2 = ((X[rows][:, None, :] - X[None, :, :]) ** 2).sum(axis=2)
            d2[np.arange(rows.size), rows] = np.inf
            # stable sort on distance keeps the smaller index first on ties
            out[rows, :k] = np.argsort(d2, axis=1, kind="stable")[:, :k]
    else:
        m = min(n, k + 6)
        dist, idx = cKDTree(X).query(X, k=m)
        for i in range(n):
            cand = [(dd, j) for dd, j in zip(dist[i], idx[i]) if j != i]
            cand.sort()
            out[i, :k] = [j for _, j in cand[:k]]
    indptr = np.arange(0, n * (k + 1) + 1, k + 1, dtype=np.int64)
    return Neighborhood(indptr, out.reshape(-1))


def relative_coords(emb, i, j):
    """u_ij = ũ_j - ũ_i in the aligned embedding."""
    if not emb.aligned:
        raise StateError("relative coordinates need an aligned embedding")
    return emb.coords[j] - emb.coords[i]


def edge_relative_coords(emb, neighborhood):
    if not emb.aligned:
        raise StateError("relative coordinates need an aligned embedding")
    return emb.coords[neighborhood.indices] - emb.coords[neighborhood.rows()]


def write_embedding(emb, path, reference_id=None, residual=None):
    header = {
        "format": EMBEDDING_FORMAT_VERSION,
        "d": emb.d,
        "aligned": bool(emb.aligned),
        "eigenvalues": [float(v) for v in emb.eigenvalues],
        "reference": reference_id if reference_id is not None else emb.reference,
        "R": [[float(x) for x in row] for row in emb.transform],
        "residual": None if residual is None else float(residual),
    }
    names = [f"u{c + 1}" for c in range(emb.d)]
    lines = ["# " + json.dumps(header, sort_keys=True), "\t".join(names)]
    lines.extend("\t".join(repr(float(x)) for x in row) for row in emb.coords)
    Path(path).write_text("\n".join(lines) + "\n")


def read_embedding(path):
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise ParseError(str(exc), path) from None
    if len(lines) < 2 or not lines[0].startswith("# "):
        raise ParseError("missing JSON header line", path, 1)
    try:
        header = json.loads(lines[0][2:])
        d = int(header["d"])
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        raise ParseError(f"bad header: {exc}", path, 1) from None
    if lines[1].split("\t") != [f"u{c + 1}" for c in range(d)]:
        raise ParseError("bad column header", path, 2)
    rows = []
    for lineno, line in enumerate(lines[2:], start=3):
        parts = line.split("\t")
        try:
            if len(parts) != d:
                raise ValueError
            rows.append([float(p) for p in parts])
        except ValueError:
            raise ParseError(f"bad coordinate row {line!r}", path, lineno) from None
    emb = SpectralEmbedding(coords=np.array(rows).reshape(-1, d),
                            eigenvalues=np.array(header["eigenvalues"]),
                            aligned=bool(header["aligned"]),
                            transform=np.array(header["R"], dtype=np.float64),
                            reference=header.get("reference"))
    return emb, header
