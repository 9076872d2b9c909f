# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: geometric convolution, B-spline basis, edge-sum
Laplacian penalty. Mirrors ``_kernels_py`` exactly in semantics."""
import numpy as np
from libc.math cimport floor


def conv_forward(const double[:, ::1] Y, const double[:, :, ::1] W,
                 const double[::1] b, const double[:, ::1] basis,
                 const long long[:, ::1] kidx, const long long[::1] indptr,
                 const long long[::1] indices):
    cdef Py_ssize_t n = indptr.shape[0] - 1
    cdef Py_ssize_t m_in = W.shape[1], m_out = W.shape[2]
    cdef Py_ssize_t n_corners = basis.shape[1]
    cdef Py_ssize_t i, e, j, c, k, q, p
    cdef double phi, yq
    cdef double* zrow
    cdef const double* wrow
    Z_arr = np.empty((n, m_out), dtype=np.float64)
    cdef double[:, ::1] Z = Z_arr
    if n == 0 or m_out == 0:
        return Z_arr
    with nogil:
        for i in range(n):
            zrow = &Z[i, 0]
            for p in range(m_out):
                zrow[p] = b[p]
            for e in range(indptr[i], indptr[i + 1]):
                j = indices[e]
                for c in range(n_corners):
                    phi = basis[e, c]
                    if phi == 0.0:
                        continue
                    k = kidx[e, c]
                    for q in range(m_in):
                        yq = Y[j, q] * phi
                        wrow = &W[k, q, 0]
                        for p in range(m_out):
                            zrow[p] += wrow[p] * yq
    return Z_arr


def conv_backward(const double[:, ::1] Y, const double[:, :, ::1] W,
                  const double[:, ::1] basis, const long long[:, ::1] kidx,
                  const long long[::1] indptr, const long long[::1] indices,
                  const double[:, ::1] dZ):
    cdef Py_ssize_t n = indptr.shape[0] - 1
    cdef Py_ssize_t m_in = W.shape[1], m_out = W.shape[2]
    cdef Py_ssize_t n_corners = basis.shape[1]
    cdef Py_ssize_t i, e, j, c, k, q, p
    cdef double phi, t, s, yq
    cdef const double* grow
    cdef const double* wrow
    cdef double* dwrow
    dY_arr = np.zeros((Y.shape[0], m_in), dtype=np.float64)
    dW_arr = np.zeros((W.shape[0], m_in, m_out), dtype=np.float64)
    dB_arr = np.empty((basis.shape[0], n_corners), dtype=np.float64)
    cdef double[:, ::1] dY = dY_arr
    cdef double[:, :, ::1] dW = dW_arr
    cdef double[:, ::1] dbasis = dB_arr
    if n == 0 or m_out == 0 or m_in == 0:
        dB_arr[:] = 0.0
        return dY_arr, dW_arr, dB_arr
    with nogil:
        for i in range(n):
            grow = &dZ[i, 0]
            for e in range(indptr[i], indptr[i + 1]):
                j = indices[e]
                for c in range(n_corners):
                    phi = basis[e, c]
                    k = kidx[e, c]
                    s = 0.0
                    for q in range(m_in):
                        wrow = &W[k, q, 0]
                        dwrow = &dW[k, q, 0]
                        yq = Y[j, q] * phi
                        t = 0.0
                        for p in range(m_out):
                            t = t + wrow[p] * grow[p]
                        if phi != 0.0:
                            for p in range(m_out):
                                dwrow[p] += yq * grow[p]
                        s = s + Y[j, q] * t
                        dY[j, q] += phi * t
                    dbasis[e, c] = s
    return dY_arr, dW_arr, dB_arr


def bspline_basis(U, grid):
    cdef const double[:, ::1] u = np.ascontiguousarray(U, dtype=np.float64)
    cdef const long long[::1] g = np.ascontiguousarray(grid, dtype=np.int64)
    cdef Py_ssize_t n_edges = u.shape[0], d = u.shape[1]
    cdef Py_ssize_t n_corners = 1 << d
    cdef Py_ssize_t e, c, c2, corner, upper
    cdef long long stride, idx
    cdef double val, x, w, dw
    cdef long n_saturated = 0
    basis_arr = np.empty((n_edges, n_corners), dtype=np.float64)
    kidx_arr = np.empty((n_edges, n_corners), dtype=np.int64)
    dbasis_arr = np.empty((n_edges, n_corners, d), dtype=np.float64)
    cdef double[:, ::1] basis = basis_arr
    cdef long long[:, ::1] kidx = kidx_arr
    cdef double[:, :, ::1] dbasis = dbasis_arr
    frac_arr = np.empty(d, dtype=np.float64)
    slope_arr = np.empty(d, dtype=np.float64)
    lower_arr = np.empty(d, dtype=np.int64)
    strides_arr = np.ones(d, dtype=np.int64)
    cdef double[::1] frac = frac_arr
    cdef double[::1] slope = slope_arr
    cdef long long[::1] lower = lower_arr
    cdef long long[::1] strides = strides_arr
    for c in range(d - 2, -1, -1):
        strides[c] = strides[c + 1] * g[c + 1]
    with nogil:
        for e in range(n_edges):
            for c in range(d):
                val = u[e, c]
                slope[c] = <double>(g[c] - 1)
                if val < 0.0:
                    val = 0.0
                    slope[c] = 0.0
                    n_saturated += 1
                elif val > 1.0:
                    val = 1.0
                    slope[c] = 0.0
                    n_saturated += 1
                x = val * (g[c] - 1)
                lower[c] = <long long>floor(x)
                if lower[c] > g[c] - 2:
                    lower[c] = g[c] - 2
                frac[c] = x - lower[c]
            for corner in range(n_corners):
                basis[e, corner] = 1.0
                idx = 0
                for c2 in range(d):
                    dbasis[e, corner, c2] = 1.0
                for c in range(d):
                    upper = (corner >> (d - 1 - c)) & 1
                    if upper:
                        w = frac[c]
                        dw = slope[c]
                    else:
                        w = 1.0 - frac[c]
                        dw = -slope[c]
                    basis[e, corner] *= w
                    for c2 in range(d):
                        if c2 == c:
                            dbasis[e, corner, c2] *= dw
                        else:
                            dbasis[e, corner, c2] *= w
                    idx += (lower[c] + upper) * strides[c]
                kidx[e, corner] = idx
    return basis_arr, kidx_arr, dbasis_arr, int(n_saturated)


def laplacian_edge_sum(const double[:, ::1] S, const long long[::1] indptr,
                       const long long[::1] indices, const double[::1] weights):
    cdef Py_ssize_t n = indptr.shape[0] - 1, n_cols = S.shape[1]
    cdef Py_ssize_t i, e, j, c
    cdef double total = 0.0, sq, diff
    with nogil:
        for i in range(n):
            for e in range(indptr[i], indptr[i + 1]):
                j = indices[e]
                sq = 0.0
                for c in range(n_cols):
                    diff = S[i, c] - S[j, c]
                    sq = sq + diff * diff
                total = total + weights[e] * sq
    return total


def laplacian_edge_sum_grad(const double[:, ::1] S, const long long[::1] indptr,
                            const long long[::1] indices,
                            const double[::1] weights, double scale):
    cdef Py_ssize_t n = indptr.shape[0] - 1, n_cols = S.shape[1]
    cdef Py_ssize_t i, e, j, c
    cdef double g
    dS_arr = np.zeros((S.shape[0], n_cols), dtype=np.float64)
    cdef double[:, ::1] dS = dS_arr
    with nogil:
        for i in range(n):
            for e in range(indptr[i], indptr[i + 1]):
                j = indices[e]
                for c in range(n_cols):
                    g = 2.0 * scale * weights[e] * (S[i, c] - S[j, c])
                    dS[i, c] += g
                    dS[j, c] -= g
    return dS_arr
