"""Two-block convolution/pooling network, its baselines, losses and checkpoints.

Per-mesh preprocessing (embedding, alignment, k-NN neighborhoods, block-1
kernel responses) happens once in :func:`build_input`; :func:`forward`
then only runs the learnable part.
"""
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .clustering import kmeans
from .errors import ArgumentError, ParseError, StateError
from .layers import (
    GeometricConvParams, KernelDomain, conv_basis, conv_op, dense_neighborhood, init_conv_params,
    kernel_spec_from_dict, laplacian_reg, pool_adjacency, pool_coords, pool_features,
)
from .mesh.core import build_weighted_graph
from .spectral import (
    SpectralEmbedding, align_to_reference, edge_relative_coords, embed_graph,
    knn_in_embedding,
)

POOLING_MODES = ("learnable", "global_average", "fixed_parcellation", "spectral_kmeans")
TASK_MODES = ("classify", "regress")
CHECKPOINT_MAGIC = b"MESHPOOL-CHECKPOINT\n"
CHECKPOINT_VERSION = 1
LEAKY_SLOPE = 0.01
KMEANS_SEED = 0


@dataclass
class ModelConfig:
    field_names: list = field(default_factory=lambda: ["thickness", "depth"])
    spectral_dim: int = 3
    block1_channels: int = 8
    block1_clusters: int = 16
    block2_channels: int = 16
    block2_clusters: int = 1
    fc1_width: int = 8
    n_outputs: int = 2
    kernel: dict = field(default_factory=lambda: {"kind": "bspline", "degree": 1,
                                                  "grid": [5, 5, 5]})
    k_neighbors: int = 5
    alpha: float = 1e-3
    task: str = "classify"
    pooling_mode: str = "learnable"
    n_parcels: int = 8
    # fitted on the training split by fit_normalization
    input_mean: list = None
    input_std: list = None
    domain1: dict = None
    domain2: dict = None

    def __post_init__(self):
        widths = (self.block1_channels, self.block1_clusters, self.block2_channels,
                  self.block2_clusters, self.fc1_width, self.n_outputs, self.spectral_dim)
        if min(widths) < 1:
            raise ArgumentError("all layer widths must be >= 1")
        if self.alpha < 0:
            raise ArgumentError(f"alpha must be >= 0, got {self.alpha}")
        if self.task not in TASK_MODES:
            raise ArgumentError(f"task must be one of {TASK_MODES}, got {self.task!r}")
        if self.pooling_mode not in POOLING_MODES:
            raise ArgumentError(f"pooling_mode must be one of {POOLING_MODES}, "
                                f"got {self.pooling_mode!r}")
        if self.k_neighbors < 1:
            raise ArgumentError(f"k_neighbors must be >= 1, got {self.k_neighbors}")
        self.field_names = list(self.field_names)
        spec = kernel_spec_from_dict(self.kernel)
        if spec.dim != self.spectral_dim:
            raise ArgumentError(f"kernel dimension {spec.dim} != spectral_dim {self.spectral_dim}")
        self.kernel = spec.to_dict()

    @property
    def input_channels(self):
        return self.spectral_dim + len(self.field_names)

    @property
    def kernel_spec(self):
        return kernel_spec_from_dict(self.kernel)

    def cache_key(self):
        return (tuple(self.input_mean or ()), tuple(self.input_std or ()),
                json.dumps(self.domain1, sort_keys=True), json.dumps(self.kernel, sort_keys=True))

    @property
    def fitted(self):
        return self.input_mean is not None and self.domain1 is not None

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(d) - known)
        if unknown:
            raise ArgumentError(f"unknown model config key(s): {', '.join(unknown)}")
        return cls(**d)


class ModelState:
    """Named parameter tensors plus the alignment reference they were trained against."""

    def __init__(self, config, params, reference=None):
        self.config = config
        self.params = dict(params)
        self.reference = reference

    def names(self):
        return list(self.params)

    def values(self):
        return list(self.params.values())

    def __getitem__(self, name):
        return self.params[name]

    def copy(self):
        params = {k: Value(v.data.copy(), True, k) for k, v in self.params.items()}
        return ModelState(self.config, params, self.reference)

    def conv(self, prefix):
        spec = self.config.kernel_spec
        p = self.params
        if spec.kind == "gaussian":
            return GeometricConvParams(p[prefix + ".weights"], p[prefix + ".bias"], spec,
                                       p[prefix + ".mu"], p[prefix + ".log_var"])
        return GeometricConvParams(p[prefix + ".weights"], p[prefix + ".bias"], spec)


def parameter_layout(config):
    """(prefix, kind, in, out) for every layer of the configured model."""
    c = config
    layers = [("block1.feature", "conv", c.input_channels, c.block1_channels)]
    if c.pooling_mode == "learnable":
        layers.append(("block1.cluster", "conv", c.input_channels, c.block1_clusters))
    layers.append(("block2.feature", "conv", c.block1_channels, c.block2_channels))
    if c.pooling_mode == "learnable":
        layers.append(("block2.cluster", "conv", c.block1_channels, c.block2_clusters))
    if c.pooling_mode == "global_average":
        fc_in = c.block2_channels
    elif c.pooling_mode == "fixed_parcellation":
        fc_in = c.n_parcels * c.block2_channels
    else:
        fc_in = c.block2_clusters * c.block2_channels
    layers.append(("fc1", "fc", fc_in, c.fc1_width))
    layers.append(("fc2", "fc", c.fc1_width, c.n_outputs))
    return layers


def init_model(config, seed):
    rng = np.random.default_rng([int(seed), 17])
    spec = config.kernel_spec
    params = {}
    for prefix, kind, n_in, n_out in parameter_layout(config):
        if kind == "conv":
            conv = init_conv_params(spec, n_in, n_out, rng, prefix)
            for v in conv.values():
                params[v.name] = v
        else:
            s = n_in ** -0.5
            params[prefix + ".weights"] = Value(rng.uniform(-s, s, (n_in, n_out)), True,
                                                prefix + ".weights")
            params[prefix + ".bias"] = Value(rng.uniform(-s, s, n_out), True, prefix + ".bias")
    return ModelState(config, params)


# -- per-mesh inputs -------------------------------------------------------

@dataclass(eq=False)
class MeshInput:
    raw: np.ndarray  # N x F unstandardized inputs: spectral coords then fields
    coords: np.ndarray  # aligned spectral coordinates, N x d
    graph: object
    neighborhood: object
    rel: np.ndarray  # per-edge pseudo-coordinates
    parcels: np.ndarray = None
    target: object = None
    name: str = None
    # filled lazily from a fitted config
    X: np.ndarray = None
    basis1: tuple = None
    kmeans_labels: np.ndarray = None
    cache_key: tuple = None

    @property
    def n(self):
        return self.coords.shape[0]


def embed_mesh(mesh, reference=None, d=3, graph=None):
    """Weighted graph plus spectral embedding, aligned to ``reference`` when given."""
    graph = graph or build_weighted_graph(mesh)
    emb = embed_graph(graph, d=d)
    if reference is not None:
        emb, corr = align_to_reference(emb, reference)
        return graph, emb, corr
    return graph, emb, None


def build_input(mesh, emb, graph, config, target=None, name=None):
    if not emb.aligned:
        raise StateError("model inputs need an aligned embedding")
    if mesh.n < config.k_neighbors + 1:
        raise ArgumentError(f"mesh has {mesh.n} nodes; need at least k_neighbors+1 = "
                            f"{config.k_neighbors + 1}")
    missing = [f for f in config.field_names if f not in mesh.fields]
    if missing:
        raise ArgumentError(f"mesh lacks input fields {missing}")
    nb = knn_in_embedding(emb, config.k_neighbors)
    raw = np.column_stack([emb.coords] + [mesh.fields[f] for f in config.field_names])
    return MeshInput(raw=raw, coords=emb.coords, graph=graph, neighborhood=nb,
                     rel=edge_relative_coords(emb, nb), parcels=mesh.parcels,
                     target=target, name=name)


def fit_normalization(config, inputs):
    """Fit input standardization and kernel domains on training inputs (in place)."""
    raw = np.concatenate([x.raw for x in inputs])
    std = raw.std(axis=0)
    config.input_mean = [float(v) for v in raw.mean(axis=0)]
    config.input_std = [float(v) if v > 0 else 1.0 for v in std]
    config.domain1 = KernelDomain.fit(np.concatenate([x.rel for x in inputs])).to_dict()
    coords = np.concatenate([x.coords for x in inputs])
    span = coords.max(axis=0) - coords.min(axis=0)
    config.domain2 = KernelDomain(-span, span).to_dict()
    return config


def _domain(d):
    return KernelDomain(d["lo"], d["hi"])


def ready(inp, config):
    """Attach standardized inputs and cached block-1 kernel responses."""
    if not config.fitted:
        raise StateError("model config has no fitted normalization; call fit_normalization")
    key = config.cache_key()
    if inp.cache_key != key:
        inp.X = (inp.raw - np.asarray(config.input_mean)) / np.asarray(config.input_std)
        inp.basis1 = None
        inp.cache_key = key
    spec = config.kernel_spec
    if inp.basis1 is None and spec.kind == "bspline":
        with ad.no_grad():
            basis, kidx, sat = conv_basis(inp.rel, _Frozen(spec), _domain(config.domain1))
        inp.basis1 = (basis, kidx, sat)
    if inp.kmeans_labels is None and config.pooling_mode == "spectral_kmeans":
        c = min(config.block1_clusters, inp.n)
        inp.kmeans_labels = kmeans(inp.coords, c, seed=KMEANS_SEED).labels
    return inp


class _Frozen:
    # stands in for conv params when only B-spline responses are needed
    def __init__(self, kernel):
        self.kernel = kernel


# -- forward ---------------------------------------------------------------

def _conv(state, prefix, Y, nb, rel, domain, cached=None):
    params = state.conv(prefix)
    if cached is not None:
        basis, kidx, sat = cached
    else:
        basis, kidx, sat = conv_basis(rel, params, domain)
    return conv_op(Y, nb, basis, kidx, params.weights, params.bias), sat


def _fc(state, prefix, h):
    return ad.add(ad.matmul(h, state[prefix + ".weights"]), state[prefix + ".bias"])


def _pooled_rel(coords, nb):
    rows = nb.rows()
    return ad.sub(ad.gather_rows(coords, nb.indices), ad.gather_rows(coords, rows))


def _mean_pool_matrix(labels, n_groups):
    counts = np.bincount(labels, minlength=n_groups).astype(np.float64)
    M = np.zeros((labels.size, n_groups))
    M[np.arange(labels.size), labels] = 1.0
    M[:, counts > 0] /= counts[counts > 0]
    return M, counts


@dataclass
class ForwardResult:
    output: Value  # 1 x n_outputs
    S1: Value = None
    S2: Value = None
    diagnostics: dict = field(default_factory=dict)


def forward(inp, state):
    config = state.config
    ready(inp, config)
    mode = config.pooling_mode
    dom1, dom2 = _domain(config.domain1), _domain(config.domain2)
    X = Value(inp.X)
    nb = inp.neighborhood
    diag = {"saturated": 0, "empty_clusters": 0}

    z, sat = _conv(state, "block1.feature", X, nb, inp.rel, dom1, inp.basis1)
    H1 = ad.leaky_relu(z, LEAKY_SLOPE)
    diag["saturated"] += sat
    S1 = S2 = None

    if mode == "learnable":
        z, _ = _conv(state, "block1.cluster", X, nb, inp.rel, dom1, inp.basis1)
        S1 = ad.row_softmax(z)
        pooled = pool_features(S1, H1)
        coords = pool_coords(S1, inp.coords)
        a_pool = pool_adjacency(S1, inp.graph)
        empty = S1.data.sum(axis=0) < 1e-12
        diag["empty_clusters"] = int(empty.sum())
        diag["adjacency_mass"] = (float(a_pool.data.sum()), float(inp.graph.adjacency.sum()))
        nb2 = dense_neighborhood(~empty & (a_pool.data.sum(axis=1) > 0))
        rel2 = _pooled_rel(coords, nb2)
        spec = config.kernel_spec
        basis2 = conv_basis(rel2, state.conv("block2.feature"), dom2)
        diag["saturated"] += basis2[2]
        p = state.conv("block2.feature")
        H2 = ad.leaky_relu(conv_op(pooled, nb2, basis2[0], basis2[1], p.weights, p.bias),
                           LEAKY_SLOPE)
        if spec.kind == "gaussian":
            basis2c = conv_basis(rel2, state.conv("block2.cluster"), dom2)
        else:
            basis2c = basis2
        p = state.conv("block2.cluster")
        S2 = ad.row_softmax(conv_op(pooled, nb2, basis2c[0], basis2c[1], p.weights, p.bias))
        if np.any(empty):
            H2 = ad.scale_rows(H2, Value((~empty).astype(np.float64)))
        h = pool_features(S2, H2)
        h = ad.reshape(h, (1, -1))
    elif mode == "spectral_kmeans":
        labels = inp.kmeans_labels
        C = config.block1_clusters
        M, counts = _mean_pool_matrix(labels, C)
        active = counts > 0
        diag["empty_clusters"] = int((~active).sum())
        pooled = ad.transpose_matmul(Value(M), H1)
        centers = Value(M.T @ inp.coords)
        nb2 = dense_neighborhood(active)
        z, sat = _conv(state, "block2.feature", pooled, nb2, _pooled_rel(centers, nb2), dom2)
        diag["saturated"] += sat
        H2 = ad.leaky_relu(z, LEAKY_SLOPE)
        # second level: k-means on pooled coordinates with C2 clusters, mean pooling
        c2 = config.block2_clusters
        if c2 > int(active.sum()):
            raise ArgumentError(f"{int(active.sum())} non-empty clusters cannot form {c2} groups")
        labels2 = np.zeros(C, dtype=np.int64)
        if c2 > 1:
            labels2[active] = kmeans(centers.data[active], c2, seed=KMEANS_SEED).labels
        M2 = np.zeros((C, c2))
        M2[np.flatnonzero(active), labels2[active]] = 1.0
        M2 /= M2.sum(axis=0, keepdims=True)
        h = ad.reshape(ad.transpose_matmul(Value(M2), H2), (1, -1))
    else:
        z, sat = _conv(state, "block2.feature", H1, nb, inp.rel, dom1, inp.basis1)
        H2 = ad.leaky_relu(z, LEAKY_SLOPE)
        if mode == "global_average":
            h = baseline_global_average(H2)
        else:
            if inp.parcels is None:
                raise ArgumentError("fixed_parcellation pooling needs parcel labels")
            h = ad.reshape(baseline_fixed_parcellation(H2, inp.parcels, config.n_parcels),
                           (1, -1))
    h = ad.leaky_relu(_fc(state, "fc1", h), LEAKY_SLOPE)
    out = _fc(state, "fc2", h)
    return ForwardResult(output=out, S1=S1, S2=S2, diagnostics=diag)


def baseline_global_average(features):
    Y = ad.as_value(features)
    n = Y.shape[0]
    return ad.transpose_matmul(Value(np.full((n, 1), 1.0 / n)), Y)


def baseline_fixed_parcellation(features, parcels, n_parcels=None):
    """Per-parcel feature means, P x M; parcels absent from the mesh give zero rows."""
    Y = ad.as_value(features)
    parcels = np.asarray(parcels, dtype=np.int64)
    if parcels.shape != (Y.shape[0],):
        raise ArgumentError(f"need one parcel label per node, got {parcels.shape}")
    P = int(parcels.max()) + 1 if n_parcels is None else int(n_parcels)
    if parcels.min() < 0 or parcels.max() >= P:
        raise ArgumentError(f"parcel labels must lie in [0, {P})")
    M, _ = _mean_pool_matrix(parcels, P)
    return ad.transpose_matmul(Value(M), Y)


def baseline_spectral_kmeans(embedding, features, C, seed=KMEANS_SEED):
    """Hard k-means clusters on spectral coordinates, features pooled by mean."""
    coords = embedding.coords if isinstance(embedding, SpectralEmbedding) else embedding
    coords = np.asarray(coords, dtype=np.float64)
    if not 1 <= C <= coords.shape[0]:
        raise ArgumentError(f"C must lie in [1, {coords.shape[0]}], got {C}")
    labels = kmeans(coords, C, seed=seed).labels
    M, _ = _mean_pool_matrix(labels, C)
    return ad.transpose_matmul(Value(M), ad.as_value(features)), labels


def loss(result, target, S1, graph, config):
    out = result.output if isinstance(result, ForwardResult) else result
    if config.task == "classify":
        t = int(target)
        if not 0 <= t < config.n_outputs:
            raise ArgumentError(f"class {t} out of range for {config.n_outputs} outputs")
        value = ad.cross_entropy_logits(out, t)
    else:
        t = np.asarray(target, dtype=np.float64).reshape(-1)
        if t.size != config.n_outputs:
            raise ArgumentError(f"target has {t.size} values, model has {config.n_outputs}")
        value = ad.mean_squared_error(out, t)
    if S1 is not None and config.alpha > 0:
        value = ad.add(value, ad.scalar_mul(laplacian_reg(S1, graph), config.alpha))
    return value


def predict(inp, state):
    with ad.no_grad():
        result = forward(inp, state)
    out = result.output.data.reshape(-1)
    if state.config.task == "classify":
        return int(np.argmax(out)), out
    return out.copy(), out


# -- checkpoints -----------------------------------------------------------

def save_checkpoint(state, path, extra=None):
    """Binary checkpoint: magic line, one JSON header line, raw little-endian doubles.

    The header lists every tensor as ``[name, shape, offset]`` with offsets
    counted in doubles from the start of the payload.
    """
    tensors = [(k, v.data) for k, v in state.params.items()]
    if state.reference is not None:
        tensors.append(("reference.coords", state.reference.coords))
        tensors.append(("reference.eigenvalues", state.reference.eigenvalues))
    index, offset = [], 0
    for name, arr in tensors:
        index.append([name, list(arr.shape), offset])
        offset += int(arr.size)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": state.config.to_dict(),
        "tensors": index,
        "extra": extra or {},
    }
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in tensors)
    blob = CHECKPOINT_MAGIC + json.dumps(header, sort_keys=True).encode() + b"\n" + payload
    Path(path).write_bytes(blob)


def load_checkpoint(path):
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise ParseError(str(exc), path) from None
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise ParseError("not a meshpool checkpoint", path, 1)
    rest = blob[len(CHECKPOINT_MAGIC):]
    end = rest.find(b"\n")
    try:
        header = json.loads(rest[:end])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ParseError(f"bad checkpoint header: {exc}", path, 2) from None
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ParseError(f"unsupported checkpoint version {header.get('format_version')}", path, 2)
    payload = rest[end + 1:]
    total = sum(int(np.prod(shape)) for _, shape, _ in header["tensors"])
    if len(payload) != 8 * total:
        raise ParseError(f"payload has {len(payload)} bytes, header promises {8 * total}", path)
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    config = ModelConfig.from_dict(header["config"])
    params, buffers = {}, {}
    for name, shape, offset in header["tensors"]:
        arr = flat[offset:offset + int(np.prod(shape))].reshape(shape).copy()
        if name.startswith("reference."):
            buffers[name] = arr
        else:
            params[name] = Value(arr, True, name)
    expected = {v.name for v in init_model(config, 0).values()}
    if set(params) != expected:
        raise ParseError(f"checkpoint tensors {sorted(params)} do not match the config", path)
    reference = None
    if "reference.coords" in buffers:
        reference = SpectralEmbedding(coords=buffers["reference.coords"],
                                      eigenvalues=buffers["reference.eigenvalues"],
                                      aligned=True)
    return ModelState(config, params, reference), header.get("extra", {})


def gradcheck_network(size=30, seed=0, kernel=None, alpha=1e-3, pooling_mode="learnable",
                      h=1e-5, floor=1e-8):
    """Finite-difference check of the full network on a seeded synthetic blob.

    Returns ``[(parameter name, max relative error, worst flat index), ...]``.
    """
    from .mesh.synthetic import gen_synthetic_mesh
    from .spectral import as_reference

    mesh = gen_synthetic_mesh("blob", size, seed)
    graph, emb, _ = embed_mesh(mesh)
    emb = as_reference(emb)
    config = ModelConfig(kernel=kernel or {"kind": "bspline", "degree": 1, "grid": [3, 3, 3]},
                         alpha=alpha, pooling_mode=pooling_mode,
                         k_neighbors=min(5, size - 1))
    rng = np.random.default_rng([seed, 29])
    mesh_fields = dict(mesh.fields)
    mesh_fields["thickness"] = mesh_fields["thickness"] + rng.normal(size=mesh.n)
    inp = build_input(type(mesh)(vertices=mesh.vertices, faces=mesh.faces, fields=mesh_fields),
                      emb, graph, config, target=int(seed) % 2)
    fit_normalization(config, [inp])
    state = init_model(config, seed)

    def objective():
        result = forward(inp, state)
        return loss(result, inp.target, result.S1, inp.graph, config)

    return ad.grad_check_per_param(objective, state.values(), h=h, names=state.names(),
                                   floor=floor)
