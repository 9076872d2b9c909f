import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import special_ortho_group

from meshpool.errors import ArgumentError, DegreeError, DisconnectedError, ParseError, StateError
from meshpool.mesh import SurfaceMesh, WeightedGraph, build_weighted_graph, gen_synthetic_mesh
from meshpool.spectral import (
    Neighborhood, SpectralEmbedding, align_to_reference, as_reference, build_laplacian,
    edge_relative_coords, embed_graph, knn_in_embedding, read_embedding, relative_coords,
    smallest_eigenpairs, write_embedding,
)

from conftest import random_connected_graph


def path_graph(n, w=1.0):
    return WeightedGraph(n, [[i, i + 1] for i in range(n - 1)], [w] * (n - 1))


def eigen_residuals(graph, emb):
    L = build_laplacian(graph).matrix
    U = emb.eigenvectors()
    return [np.linalg.norm(L @ U[:, c] - emb.eigenvalues[c] * U[:, c]) for c in range(emb.d)]


# -- Laplacian -------------------------------------------------------------

def test_two_node_laplacian():
    L = build_laplacian(WeightedGraph(2, [[0, 1]], [3.7])).dense()
    np.testing.assert_allclose(L, [[1, -1], [-1, 1]], atol=1e-15)
    np.testing.assert_allclose(np.linalg.eigvalsh(L), [0, 2], atol=1e-14)


def test_triangle_laplacian():
    L = build_laplacian(WeightedGraph(3, [[0, 1], [1, 2], [0, 2]], [1, 1, 1])).dense()
    np.testing.assert_allclose(L[~np.eye(3, dtype=bool)], -0.5, atol=1e-15)
    np.testing.assert_allclose(np.linalg.eigvalsh(L), [0, 1.5, 1.5], atol=1e-14)


def test_random_laplacian_dense_oracle():
    rng = np.random.default_rng(0)
    g = random_connected_graph(rng, 50)
    L = build_laplacian(g).dense()
    assert np.max(np.abs(L - L.T)) == 0
    A = g.dense()
    dinv = 1 / np.sqrt(A.sum(axis=1))
    np.testing.assert_allclose(L, np.eye(50) - dinv[:, None] * A * dinv[None, :], atol=1e-15)
    w = np.linalg.eigvalsh(L)
    assert w.min() > -1e-12 and w.max() < 2 + 1e-12


def test_zero_degree_node():
    g = WeightedGraph(3, [[0, 1]], [1.0])
    with pytest.raises(DegreeError):
        build_laplacian(g)


# -- eigenpairs ------------------------------------------------------------

def test_path3_eigenvalues():
    emb = embed_graph(path_graph(3), d=2)
    np.testing.assert_allclose(emb.eigenvalues, [1.0, 2.0], atol=1e-12)
    dense = np.linalg.eigvalsh(build_laplacian(path_graph(3)).dense())
    np.testing.assert_allclose(emb.eigenvalues, dense[1:], atol=1e-12)


def test_triangle_degenerate_eigenspace():
    g = WeightedGraph(3, [[0, 1], [1, 2], [0, 2]], [1, 1, 1])
    emb = embed_graph(g, d=2)
    np.testing.assert_allclose(emb.eigenvalues, [1.5, 1.5], atol=1e-12)
    assert max(eigen_residuals(g, emb)) <= 1e-8
    U = emb.eigenvectors()
    np.testing.assert_allclose(U.T @ U, np.eye(2), atol=1e-12)


def test_icosphere_spectrum(sphere162):
    g = build_weighted_graph(sphere162)
    emb = embed_graph(g)
    dense = np.linalg.eigvalsh(build_laplacian(g).dense())
    np.testing.assert_allclose(emb.eigenvalues, dense[1:4], atol=1e-10)
    assert np.ptp(emb.eigenvalues) < 1e-3 * emb.eigenvalues[0]
    assert max(eigen_residuals(g, emb)) <= 1e-8


def test_column_norms_are_inverse_sqrt_eigenvalues(blob200):
    emb = embed_graph(build_weighted_graph(blob200))
    np.testing.assert_allclose(np.linalg.norm(emb.coords, axis=0), emb.eigenvalues ** -0.5,
                               rtol=1e-12)
    assert np.all(np.diff(emb.eigenvalues) >= 0) and emb.eigenvalues[0] > 0


def test_sign_convention(blob200):
    U = embed_graph(build_weighted_graph(blob200)).eigenvectors()
    for c in range(U.shape[1]):
        assert U[np.argmax(np.abs(U[:, c])), c] > 0


def test_sparse_solver_matches_dense(blob200):
    g = build_weighted_graph(blob200)
    dense = embed_graph(g)
    sparse = embed_graph(g, dense_max=10)
    np.testing.assert_allclose(sparse.eigenvalues, dense.eigenvalues, rtol=1e-10)
    assert max(eigen_residuals(g, sparse)) <= 1e-8


def test_disconnected_raises():
    g = WeightedGraph(6, [[0, 1], [1, 2], [0, 2], [3, 4], [4, 5], [3, 5]], [1.0] * 6)
    with pytest.raises(DisconnectedError):
        embed_graph(g, d=2)


def test_bad_dimension():
    with pytest.raises(ArgumentError):
        embed_graph(path_graph(5), d=0)


@settings(max_examples=15, deadline=None)
@given(st.integers(8, 40), st.integers(0, 10_000))
def test_connectedness_contract(n, seed):
    from meshpool.mesh import check_connected

    rng = np.random.default_rng(seed)
    pairs = {tuple(sorted(rng.choice(n, 2, replace=False).tolist())) for _ in range(n + 4)}
    g = WeightedGraph(n, np.array(sorted(pairs)), rng.uniform(0.5, 1.5, len(pairs)))
    if np.any(g.degrees == 0):
        with pytest.raises(DegreeError):
            embed_graph(g, d=2)
    elif check_connected(g):
        embed_graph(g, d=2)
    else:
        with pytest.raises(DisconnectedError):
            embed_graph(g, d=2)


def test_scale_invariance(blob200):
    g = build_weighted_graph(blob200)
    g2 = WeightedGraph(g.n, g.edges, g.weights * 13.5)
    e1, e2 = embed_graph(g), embed_graph(g2)
    np.testing.assert_allclose(e2.eigenvalues, e1.eigenvalues, atol=1e-10)
    a1, _ = align_to_reference(e1, as_reference(e1))
    a2, _ = align_to_reference(e2, as_reference(e1))
    np.testing.assert_allclose(a2.coords, a1.coords, atol=1e-6)


# -- alignment -------------------------------------------------------------

def test_self_alignment(blob200):
    emb = embed_graph(build_weighted_graph(blob200))
    aligned, corr = align_to_reference(emb, as_reference(emb))
    assert np.max(np.abs(aligned.transform - np.eye(3))) <= 1e-6
    assert corr.residual <= 1e-10
    np.testing.assert_array_equal(corr.pi, np.arange(blob200.n))


def test_planted_rotation_recovered(blob200):
    emb = embed_graph(build_weighted_graph(blob200))
    for seed in range(5):
        Q = special_ortho_group.rvs(3, random_state=seed)
        ref = as_reference(SpectralEmbedding(emb.coords @ Q, emb.eigenvalues))
        aligned, corr = align_to_reference(emb, ref)
        assert corr.residual <= 1e-8
        assert np.linalg.norm(aligned.transform - Q) <= 1e-6


def test_permutation_realignment(blob200):
    g = build_weighted_graph(blob200)
    emb = embed_graph(g)
    perm = np.random.default_rng(1).permutation(g.n)
    emb_p = embed_graph(g.permuted(perm))
    aligned, _ = align_to_reference(emb_p, as_reference(emb))
    np.testing.assert_allclose(aligned.coords, emb.coords[perm], atol=1e-6)


def test_icp_beats_sign_flips_between_spheres():
    a = embed_graph(build_weighted_graph(gen_synthetic_mesh("sphere", 162, 0)))
    b = embed_graph(build_weighted_graph(gen_synthetic_mesh("sphere", 642, 0)))
    ref = as_reference(b)
    _, corr = align_to_reference(a, ref)
    best_flip = np.inf
    for s in itertools.product((1.0, -1.0), repeat=3):
        moved = a.coords * np.array(s)
        d2 = ((moved[:, None, :] - b.coords[None]) ** 2).sum(axis=2)
        best_flip = min(best_flip, d2.min(axis=1).mean())
    assert corr.residual < best_flip


def test_icp_history_monotone():
    ref = embed_graph(build_weighted_graph(gen_synthetic_mesh("blob", 400, 1)))
    for seed in range(2, 6):
        emb = embed_graph(build_weighted_graph(gen_synthetic_mesh("blob", 300, seed)))
        _, corr = align_to_reference(emb, as_reference(ref))
        assert all(b <= a for a, b in zip(corr.history, corr.history[1:]))
        assert corr.residual == corr.history[-1]


def test_orthogonal_mode_gives_orthogonal_transform():
    ref = embed_graph(build_weighted_graph(gen_synthetic_mesh("blob", 400, 1)))
    emb = embed_graph(build_weighted_graph(gen_synthetic_mesh("blob", 300, 2)))
    aligned, _ = align_to_reference(emb, as_reference(ref), orthogonal=True)
    R = aligned.transform
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)


def test_alignment_errors(blob200):
    emb = embed_graph(build_weighted_graph(blob200))
    ref = as_reference(emb)
    with pytest.raises(StateError):
        align_to_reference(ref, ref)
    with pytest.raises(ArgumentError):
        align_to_reference(emb, as_reference(SpectralEmbedding(emb.coords[:, :2],
                                                               emb.eigenvalues[:2])))


# -- neighborhoods ---------------------------------------------------------

def test_knn_collinear():
    emb = SpectralEmbedding(np.array([[0.0], [1.0], [3.0]]), [1.0], aligned=True)
    nb = knn_in_embedding(emb, 1)
    assert nb.lists() == [[1, 0], [0, 1], [1, 2]]


def test_knn_all_nodes():
    emb = SpectralEmbedding(np.random.default_rng(0).normal(size=(7, 3)), [1, 2, 3])
    for row in knn_in_embedding(emb, 6).lists():
        assert sorted(row) == list(range(7))


@pytest.mark.parametrize("n", [200, 1200])
def test_knn_brute_force_oracle(n):
    X = np.random.default_rng(n).normal(size=(n, 3))
    nb = knn_in_embedding(SpectralEmbedding(X, [1, 2, 3]), 5)
    for i, row in enumerate(nb.lists()):
        d = np.linalg.norm(X - X[i], axis=1)
        d[i] = np.inf
        order = sorted(range(n), key=lambda j: (d[j], j))[:5]
        assert row == order + [i]


def test_knn_ties_prefer_smaller_index():
    X = np.array([[0.0], [1.0], [-1.0], [2.0]])
    nb = knn_in_embedding(SpectralEmbedding(X, [1.0]), 1)
    assert nb.lists()[0] == [1, 0]


def test_relative_coords():
    rng = np.random.default_rng(0)
    emb = SpectralEmbedding(rng.normal(size=(10, 3)), [1, 2, 3], aligned=True)
    assert np.all(relative_coords(emb, 4, 4) == 0)
    for i, j in rng.integers(0, 10, size=(20, 2)):
        np.testing.assert_array_equal(relative_coords(emb, i, j), -relative_coords(emb, j, i))
        np.testing.assert_array_equal(relative_coords(emb, i, j), emb.coords[j] - emb.coords[i])
    nb = knn_in_embedding(emb, 3)
    rel = edge_relative_coords(emb, nb)
    for e, (i, j) in enumerate(zip(nb.rows(), nb.indices)):
        np.testing.assert_array_equal(rel[e], relative_coords(emb, i, j))


def test_relative_coords_need_alignment():
    emb = SpectralEmbedding(np.zeros((3, 2)), [1, 2])
    with pytest.raises(StateError):
        relative_coords(emb, 0, 1)


def test_neighborhood_from_lists():
    nb = Neighborhood.from_lists([[1, 0], [2, 0, 1], [2]])
    assert nb.n == 3 and nb.n_edges == 6
    assert nb.lists() == [[1, 0], [2, 0, 1], [2]]


# -- embedding files -------------------------------------------------------

def test_embedding_file_roundtrip_and_bit_stability(tmp_path, blob200):
    g = build_weighted_graph(blob200)
    emb = embed_graph(g)
    aligned, corr = align_to_reference(emb, as_reference(emb), reference_id="ref")
    write_embedding(aligned, tmp_path / "a.tsv", residual=corr.residual)
    write_embedding(embed_graph(g), tmp_path / "b.tsv")
    write_embedding(embed_graph(g), tmp_path / "c.tsv")
    assert (tmp_path / "b.tsv").read_bytes() == (tmp_path / "c.tsv").read_bytes()
    back, header = read_embedding(tmp_path / "a.tsv")
    np.testing.assert_array_equal(back.coords, aligned.coords)
    np.testing.assert_array_equal(back.eigenvalues, aligned.eigenvalues)
    np.testing.assert_array_equal(back.transform, aligned.transform)
    assert back.aligned and header["reference"] == "ref"
    lines = (tmp_path / "a.tsv").read_text().splitlines()
    assert lines[1] == "u1\tu2\tu3" and len(lines) == blob200.n + 2
    assert json.loads(lines[0][2:])["d"] == 3


def test_embedding_file_errors(tmp_path):
    (tmp_path / "bad.tsv").write_text("u1\n0.1\n")
    with pytest.raises(ParseError):
        read_embedding(tmp_path / "bad.tsv")
    emb = SpectralEmbedding(np.zeros((2, 2)), [1, 2])
    write_embedding(emb, tmp_path / "x.tsv")
    text = (tmp_path / "x.tsv").read_text().replace("0.0\t0.0\n", "0.0\tnope\n", 1)
    (tmp_path / "x.tsv").write_text(text)
    with pytest.raises(ParseError) as info:
        read_embedding(tmp_path / "x.tsv")
    assert info.value.line == 3
