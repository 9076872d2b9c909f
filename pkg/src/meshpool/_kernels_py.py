"""Pure numpy implementations of the hot kernels.

Used when the compiled ``_kernels`` extension is unavailable, and as the
reference path in tests. Signatures and outputs match ``_kernels.pyx``;
only the floating point summation order differs.
"""
import numpy as np
import scipy.sparse as sp


def _edge_rows(indptr):
    n = len(indptr) - 1
    return np.repeat(np.arange(n, dtype=np.int64), np.diff(indptr))


def _row_reducer(indptr):
    # (n x E) matrix summing edge rows into their owning node
    n_edges = int(indptr[-1])
    return sp.csr_matrix(
        (np.ones(n_edges), np.arange(n_edges), indptr),
        shape=(len(indptr) - 1, n_edges),
    )


def conv_forward(Y, W, b, basis, kidx, indptr, indices):
    n_edges = int(indptr[-1])
    acc = np.zeros((n_edges, W.shape[2]))
    Yj = Y[indices]
    for c in range(basis.shape[1]):
        acc += np.einsum("eq,eqp->ep", Yj * basis[:, c:c + 1], W[kidx[:, c]])
    return _row_reducer(indptr) @ acc + b


def conv_backward(Y, W, basis, kidx, indptr, indices, dZ):
    n_edges = int(indptr[-1])
    n_kernels, m_in, m_out = W.shape
    rows = _edge_rows(indptr)
    Yj = Y[indices]
    dacc = dZ[rows]
    dYj = np.zeros_like(Yj)
    dW = np.zeros_like(W)
    dbasis = np.empty_like(basis)
    edge_ids = np.arange(n_edges)
    for c in range(basis.shape[1]):
        Wk = W[kidx[:, c]]
        t = np.einsum("ep,eqp->eq", dacc, Wk)
        dbasis[:, c] = np.einsum("eq,eq->e", Yj, t)
        dYj += basis[:, c:c + 1] * t
        outer = (Yj * basis[:, c:c + 1])[:, :, None] * dacc[:, None, :]
        select = sp.csr_matrix(
            (np.ones(n_edges), (kidx[:, c], edge_ids)), shape=(n_kernels, n_edges)
        )
        dW += (select @ outer.reshape(n_edges, m_in * m_out)).reshape(W.shape)
    scatter = sp.csr_matrix(
        (np.ones(n_edges), (indices, edge_ids)), shape=(Y.shape[0], n_edges)
    )
    dY = scatter @ dYj
    return dY, dW, dbasis


def bspline_basis(U, grid):
    """Degree-1 open-uniform B-spline basis products.

    ``U`` is (E, d) in [0, 1]; coordinates outside are clamped and counted.
    Returns ``(basis, kidx, dbasis, n_saturated)`` where ``basis`` and
    ``kidx`` are (E, 2**d) and ``dbasis`` is (E, 2**d, d), the derivative of
    each product w.r.t. the normalized coordinate.
    """
    U = np.asarray(U, dtype=np.float64)
    grid = np.asarray(grid, dtype=np.int64)
    n_edges, d = U.shape
    n_corners = 1 << d
    clamped = np.clip(U, 0.0, 1.0)
    saturated = clamped != U
    n_saturated = int(np.count_nonzero(saturated))
    x = clamped * (grid - 1)
    lower = np.minimum(np.floor(x).astype(np.int64), grid - 2)
    frac = x - lower
    slope = np.where(saturated, 0.0, (grid - 1).astype(np.float64))

    strides = np.ones(d, dtype=np.int64)
    for c in range(d - 2, -1, -1):
        strides[c] = strides[c + 1] * grid[c + 1]

    basis = np.ones((n_edges, n_corners))
    dbasis = np.ones((n_edges, n_corners, d))
    kidx = np.zeros((n_edges, n_corners), dtype=np.int64)
    for corner in range(n_corners):
        for c in range(d):
            upper = (corner >> (d - 1 - c)) & 1
            w = frac[:, c] if upper else 1.0 - frac[:, c]
            dw = slope[:, c] if upper else -slope[:, c]
            basis[:, corner] *= w
            for c2 in range(d):
                dbasis[:, corner, c2] *= dw if c2 == c else w
            kidx[:, corner] += (lower[:, c] + upper) * strides[c]
    return basis, kidx, dbasis, n_saturated


def laplacian_edge_sum(S, indptr, indices, weights):
    rows = _edge_rows(indptr)
    diff = S[rows] - S[indices]
    return float(np.dot(weights, np.einsum("ec,ec->e", diff, diff)))


def laplacian_edge_sum_grad(S, indptr, indices, weights, scale):
    rows = _edge_rows(indptr)
    diff = (2.0 * scale) * weights[:, None] * (S[rows] - S[indices])
    dS = np.zeros_like(S)
    np.add.at(dS, rows, diff)
    np.add.at(dS, indices, -diff)
    return dS
