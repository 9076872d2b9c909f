"""Shared builders for model-level tests."""
import numpy as np

from meshpool.mesh import gen_synthetic_mesh
from meshpool.mesh.dataset import anchored_parcels
from meshpool.model import (
    ModelConfig, build_input, embed_mesh, fit_normalization, init_model,
)
from meshpool.spectral import as_reference


def labelled_blob(n, seed, n_parcels=8):
    mesh = gen_synthetic_mesh("blob", n, seed)
    return type(mesh)(vertices=mesh.vertices, faces=mesh.faces, fields=mesh.fields,
                      parcels=anchored_parcels(mesh, n_parcels))


def model_setup(mesh, seed=0, reference=None, **cfg):
    """Fitted config, initialized state and input for a single mesh."""
    cfg.setdefault("kernel", {"kind": "bspline", "grid": [3, 3, 3]})
    config = ModelConfig(**cfg)
    if reference is None:
        _, emb, _ = embed_mesh(mesh)
        reference = as_reference(emb)
    graph, emb, _ = embed_mesh(mesh, reference)
    inp = build_input(mesh, emb, graph, config, target=seed % 2)
    fit_normalization(config, [inp])
    state = init_model(config, seed)
    state.reference = reference
    return config, state, inp, reference


def permuted_input(mesh, perm, config, reference):
    pm = mesh.permuted(perm)
    graph, emb, _ = embed_mesh(pm, reference)
    return build_input(pm, emb, graph, config)


def rng_perm(n, seed):
    return np.random.default_rng([seed, 99]).permutation(n)
