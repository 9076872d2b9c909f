"""Geometric convolution, its kernels, and the pooling operations.

A convolution evaluates, for every directed edge (i, j) of a neighborhood,
a small set of kernel responses phi_ij(theta_k) from the pseudo-coordinates
u_ij. The responses are packed as ``basis`` (E, B) with matching kernel
indices ``kidx`` (E, B): for B-splines only the 2**d nonzero corner
products are kept, for Gaussians every kernel is listed. Weights are stored
as (K, M_in, M_out).
"""
import warnings
from dataclasses import dataclass

import numpy as np

from . import kernels
from .autodiff import Value, as_value, record, transpose_matmul
from .errors import ArgumentError, EmptyClusterWarning, ShapeError

EMPTY_CLUSTER_MASS = 1e-12


@dataclass(frozen=True)
class BSplineSpec:
    degree: int = 1
    grid: tuple = (5, 5, 5)

    def __post_init__(self):
        if self.degree != 1:
            raise ArgumentError(f"only degree-1 B-spline kernels are supported, got {self.degree}")
        if len(self.grid) < 1 or min(self.grid) < 2:
            raise ArgumentError(f"B-spline grid sizes must be >= 2, got {self.grid}")

    kind = "bspline"

    @property
    def n_kernels(self):
        return int(np.prod(self.grid))

    @property
    def dim(self):
        return len(self.grid)

    def to_dict(self):
        return {"kind": "bspline", "degree": self.degree, "grid": list(self.grid)}


@dataclass(frozen=True)
class GaussianSpec:
    n_kernels: int = 6
    dim: int = 3

    kind = "gaussian"

    def __post_init__(self):
        if self.n_kernels < 1:
            raise ArgumentError(f"need at least one Gaussian kernel, got {self.n_kernels}")

    def to_dict(self):
        return {"kind": "gaussian", "n_kernels": self.n_kernels, "dim": self.dim}


def kernel_spec_from_dict(d):
    d = dict(d)
    kind = d.pop("kind", "bspline")
    if kind == "bspline":
        return BSplineSpec(degree=int(d.get("degree", 1)),
                           grid=tuple(int(g) for g in d.get("grid", (5, 5, 5))))
    if kind == "gaussian":
        return GaussianSpec(n_kernels=int(d.get("n_kernels", 6)), dim=int(d.get("dim", 3)))
    raise ArgumentError(f"unknown kernel kind {kind!r}")


@dataclass
class GeometricConvParams:
    weights: Value  # (K, M_in, M_out)
    bias: Value  # (M_out,)
    kernel: object  # BSplineSpec or GaussianSpec
    mu: Value = None  # (K, d), Gaussian only
    log_var: Value = None  # (K, d), Gaussian only

    def __post_init__(self):
        K = self.kernel.n_kernels
        if self.weights.data.ndim != 3 or self.weights.shape[0] != K:
            raise ShapeError(f"weights must be ({K}, M_in, M_out), got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[2],):
            raise ShapeError(f"bias must be ({self.weights.shape[2]},), got {self.bias.shape}")
        if self.kernel.kind == "gaussian":
            want = (K, self.kernel.dim)
            if self.mu is None or self.log_var is None or self.mu.shape != want \
                    or self.log_var.shape != want:
                raise ShapeError(f"Gaussian kernels need mu and log_var of shape {want}")

    @property
    def in_channels(self):
        return self.weights.shape[1]

    @property
    def out_channels(self):
        return self.weights.shape[2]

    def values(self):
        out = [self.weights, self.bias]
        if self.kernel.kind == "gaussian":
            out += [self.mu, self.log_var]
        return out


def init_conv_params(kernel, in_channels, out_channels, rng, name=""):
    """Uniform init in [-s, s], s = (fan_in * K)^(-1/2).

    Gaussian centres are drawn uniformly in the unit cube, where normalized
    pseudo-coordinates live.
    """
    K = kernel.n_kernels
    s = (in_channels * K) ** -0.5
    w = Value(rng.uniform(-s, s, size=(K, in_channels, out_channels)), True, name + ".weights")
    b = Value(rng.uniform(-s, s, size=out_channels), True, name + ".bias")
    if kernel.kind == "bspline":
        return GeometricConvParams(w, b, kernel)
    mu = rng.uniform(0.0, 1.0, size=(K, kernel.dim))
    log_var = np.full((K, kernel.dim), np.log(0.1))
    return GeometricConvParams(w, b, kernel, Value(mu, True, name + ".mu"),
                               Value(log_var, True, name + ".log_var"))


# -- kernels ---------------------------------------------------------------

def gaussian_kernel(u, mu, log_var):
    u, mu, log_var = (np.asarray(a, dtype=np.float64) for a in (u, mu, log_var))
    return float(np.exp(-0.5 * np.sum((u - mu) ** 2 / np.exp(log_var))))


def bspline_kernel(u, spec):
    """Dense vector of the K basis products at one normalized point, and a saturation count."""
    u = np.asarray(u, dtype=np.float64).reshape(1, -1)
    if u.shape[1] != spec.dim:
        raise ShapeError(f"point has dimension {u.shape[1]}, kernel grid has {spec.dim}")
    basis, kidx, _, saturated = kernels.bspline_basis(u, np.asarray(spec.grid))
    out = np.zeros(spec.n_kernels)
    np.add.at(out, kidx[0], basis[0])
    return out, saturated


@dataclass
class KernelDomain:
    """Affine map of pseudo-coordinates onto the unit cube of the B-spline grid."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64).reshape(-1)
        self.hi = np.asarray(self.hi, dtype=np.float64).reshape(-1)
        if np.any(self.hi <= self.lo):
            raise ArgumentError(f"empty kernel domain [{self.lo}, {self.hi}]")

    @classmethod
    def fit(cls, rel):
        rel = np.asarray(rel, dtype=np.float64)
        lo, hi = rel.min(axis=0), rel.max(axis=0)
        pad = np.maximum(hi - lo, 1e-12) * 1e-9
        return cls(lo - pad, hi + pad)

    def normalize(self, u):
        scale = 1.0 / (self.hi - self.lo)
        if isinstance(u, Value):
            return affine_columns(u, scale, -self.lo * scale)
        return (np.asarray(u) - self.lo) * scale

    def to_dict(self):
        return {"lo": [float(x) for x in self.lo], "hi": [float(x) for x in self.hi]}


def affine_columns(x, scale, shift):
    """x * scale + shift with per-column constants."""
    x = as_value(x)
    scale = np.asarray(scale, dtype=np.float64)
    data = x.data * scale + shift
    return record(data, (x,), lambda g: (g * scale,), "affine_columns")


def bspline_basis(u_norm, spec):
    """Differentiable (piecewise in u) B-spline responses.

    Returns ``(basis Value (E, 2**d), kidx (E, 2**d), n_saturated)``.
    """
    u_norm = as_value(u_norm)
    basis, kidx, dbasis, saturated = kernels.bspline_basis(u_norm.data, np.asarray(spec.grid))

    def back(g):
        return (np.einsum("ec,ecd->ed", g, dbasis),)

    return record(basis, (u_norm,), back, "bspline_basis"), kidx, saturated


def gaussian_basis(u, mu, log_var):
    """All K Gaussian responses per edge: (E, K) Value and kernel indices."""
    u, mu, log_var = as_value(u), as_value(mu), as_value(log_var)
    diff = u.data[:, None, :] - mu.data[None, :, :]  # (E, K, d)
    inv_var = np.exp(-log_var.data)
    quad = diff * diff * inv_var[None]
    phi = np.exp(-0.5 * quad.sum(axis=2))

    def back(g):
        gp = (g * phi)[:, :, None]
        du = -(gp * diff * inv_var[None]).sum(axis=1)
        dmu = (gp * diff * inv_var[None]).sum(axis=0)
        dlog_var = 0.5 * (gp * quad).sum(axis=0)
        return du, dmu, dlog_var

    kidx = np.broadcast_to(np.arange(mu.shape[0], dtype=np.int64), phi.shape)
    return record(phi, (u, mu, log_var), back, "gaussian_basis"), np.ascontiguousarray(kidx)


def conv_basis(rel, params, domain=None):
    """Kernel responses for per-edge pseudo-coordinates ``rel`` (E, d).

    With a ``domain`` the coordinates are first mapped onto the unit cube;
    B-spline kernels require one, Gaussians accept raw coordinates too.
    """
    kernel = params.kernel
    rel = as_value(rel)
    if rel.data.ndim != 2 or rel.shape[1] != kernel.dim:
        raise ArgumentError(f"pseudo-coordinates must be (E, {kernel.dim}), got {rel.shape}")
    if domain is not None:
        rel = domain.normalize(rel)
    if kernel.kind == "gaussian":
        basis, kidx = gaussian_basis(rel, params.mu, params.log_var)
        return basis, kidx, 0
    if domain is None:
        raise ArgumentError("B-spline kernels need a kernel domain")
    return bspline_basis(rel, kernel)


def conv_op(Y, neighborhood, basis, kidx, weights, bias):
    """Fused z_i = sum_{j in N_i} sum_b basis_e,b * (y_j @ W[kidx_e,b]) + bias."""
    Y, basis, weights, bias = as_value(Y), as_value(basis), as_value(weights), as_value(bias)
    indptr, indices = neighborhood.indptr, neighborhood.indices
    if Y.shape[0] != neighborhood.n:
        raise ShapeError(f"features have {Y.shape[0]} rows, neighborhood has {neighborhood.n} nodes")
    if Y.shape[1] != weights.shape[1]:
        raise ShapeError(f"features have {Y.shape[1]} channels, weights expect {weights.shape[1]}")
    if basis.shape[0] != neighborhood.n_edges or kidx.shape != basis.shape:
        raise ArgumentError(f"kernel responses given for {basis.shape[0]} edges, "
                            f"neighborhood has {neighborhood.n_edges}")
    Z = kernels.conv_forward(Y.data, weights.data, bias.data, basis.data, kidx, indptr, indices)

    def back(g):
        dY, dW, dbasis = kernels.conv_backward(Y.data, weights.data, basis.data, kidx,
                                               indptr, indices, g)
        return dY, dbasis, dW, g.sum(axis=0)

    return record(Z, (Y, basis, weights, bias), back, "geometric_conv")


def geometric_conv(Y, neighborhood, rel_coords, params, domain=None):
    """Geometric convolution over CSR neighborhoods with per-edge pseudo-coordinates."""
    rel = as_value(rel_coords)
    if rel.shape[0] != neighborhood.n_edges:
        raise ArgumentError(f"pseudo-coordinates given for {rel.shape[0]} edges, "
                            f"neighborhood has {neighborhood.n_edges}")
    basis, kidx, _ = conv_basis(rel, params, domain)
    return conv_op(Y, neighborhood, basis, kidx, params.weights, params.bias)


# -- pooling ---------------------------------------------------------------

@dataclass
class ClusterAssignment:
    S: Value

    def __post_init__(self):
        self.S = as_value(self.S)
        if self.S.data.ndim != 2:
            raise ShapeError(f"assignment must be N x C, got {self.S.shape}")

    @property
    def n(self):
        return self.S.shape[0]

    @property
    def n_clusters(self):
        return self.S.shape[1]

    def hard_labels(self):
        return np.argmax(self.S.data, axis=1)

    def masses(self):
        return self.S.data.sum(axis=0)


@dataclass
class PooledGraph:
    features: Value
    adjacency: Value
    coords: Value
    empty: np.ndarray  # boolean mask of empty clusters


def _assignment(S):
    return S.S if isinstance(S, ClusterAssignment) else as_value(S)


def pool_features(S, Y):
    S, Y = _assignment(S), as_value(Y)
    if S.shape[0] != Y.shape[0]:
        raise ShapeError(f"assignment has {S.shape[0]} rows, features have {Y.shape[0]}")
    return transpose_matmul(S, Y)


def pool_adjacency(S, A):
    """S^T A S, symmetrized so the result is exactly symmetric."""
    S = _assignment(S)
    A = A.adjacency if hasattr(A, "adjacency") else A
    if A.shape != (S.shape[0], S.shape[0]):
        raise ShapeError(f"adjacency {A.shape} does not match assignment {S.shape}")
    AS = np.asarray(A @ S.data)
    M = S.data.T @ AS
    M = 0.5 * (M + M.T)

    def back(g):
        return (AS @ (g + g.T),)

    return record(M, (S,), back, "pool_adjacency")


def pool_coords(S, U):
    """Mass-weighted mean coordinates per cluster; empty clusters keep a zero row."""
    S = _assignment(S)
    U = np.asarray(U.data if isinstance(U, Value) else U, dtype=np.float64)
    mass = S.data.sum(axis=0)
    empty = mass < EMPTY_CLUSTER_MASS
    if np.any(empty):
        warnings.warn(f"{int(empty.sum())} empty cluster(s): {np.flatnonzero(empty).tolist()}",
                      EmptyClusterWarning, stacklevel=2)
    inv = np.where(empty, 0.0, 1.0 / np.where(empty, 1.0, mass))
    coords = (S.data.T @ U) * inv[:, None]

    def back(g):
        gs = g * inv[:, None]
        return (U @ gs.T - (coords * gs).sum(axis=1)[None, :],)

    return record(coords, (S,), back, "pool_coords")


def laplacian_reg(S, graph):
    """sum_i sum_j a_ij ||s_i - s_j||^2 over both directions of every edge."""
    S = _assignment(S)
    adj = graph.adjacency
    if S.shape[0] != adj.shape[0]:
        raise ShapeError(f"assignment has {S.shape[0]} rows, graph has {adj.shape[0]} nodes")
    value = kernels.laplacian_edge_sum(S.data, adj.indptr, adj.indices, adj.data)

    def back(g):
        return (kernels.laplacian_edge_sum_grad(S.data, adj.indptr, adj.indices, adj.data,
                                                float(g)),)

    return record(np.array(value), (S,), back, "laplacian_reg")


def dense_neighborhood(active):
    """Every active node neighbors every active node (itself included)."""
    from .spectral import Neighborhood

    active = np.asarray(active, dtype=bool)
    ids = np.flatnonzero(active)
    lists = [ids.tolist() if a else [] for a in active]
    return Neighborhood.from_lists(lists)


def pool_graph(S, Y, graph, coords):
    """Pool features, adjacency and coordinates with one assignment."""
    S = _assignment(S)
    return PooledGraph(
        features=pool_features(S, Y),
        adjacency=pool_adjacency(S, graph),
        coords=pool_coords(S, coords),
        empty=S.data.sum(axis=0) < EMPTY_CLUSTER_MASS,
    )
