"""Backend selection for the hot kernels.

The compiled extension is used when it imports; otherwise the numpy
fallback. Setting ``MESHPOOL_PURE_PYTHON=1`` forces the fallback, and
:func:`use_backend` switches at runtime (tests and the benchmark use it).
"""
import os

import numpy as np

from . import _kernels_py

try:
    from . import _kernels as _compiled
except ImportError:  # pragma: no cover - depends on build
    _compiled = None

_BACKENDS = {"python": _kernels_py}
if _compiled is not None:
    _BACKENDS["compiled"] = _compiled

if _compiled is not None and os.environ.get("MESHPOOL_PURE_PYTHON", "") in ("", "0"):
    _impl = _compiled
    BACKEND = "compiled"
else:
    _impl = _kernels_py
    BACKEND = "python"


def available_backends():
    return sorted(_BACKENDS)


def use_backend(name):
    """Switch the active backend; returns the previous backend name."""
    global _impl, BACKEND
    if name not in _BACKENDS:
        raise ValueError(f"backend {name!r} not available; have {available_backends()}")
    previous = BACKEND
    _impl = _BACKENDS[name]
    BACKEND = name
    return previous


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _i64(a):
    return np.ascontiguousarray(a, dtype=np.int64)


def conv_forward(Y, W, b, basis, kidx, indptr, indices):
    return _impl.conv_forward(_f64(Y), _f64(W), _f64(b), _f64(basis), _i64(kidx),
                              _i64(indptr), _i64(indices))


def conv_backward(Y, W, basis, kidx, indptr, indices, dZ):
    return _impl.conv_backward(_f64(Y), _f64(W), _f64(basis), _i64(kidx),
                               _i64(indptr), _i64(indices), _f64(dZ))


def bspline_basis(U, grid):
    return _impl.bspline_basis(_f64(U), _i64(grid))


def laplacian_edge_sum(S, indptr, indices, weights):
    return _impl.laplacian_edge_sum(_f64(S), _i64(indptr), _i64(indices), _f64(weights))


def laplacian_edge_sum_grad(S, indptr, indices, weights, scale=1.0):
    return _impl.laplacian_edge_sum_grad(_f64(S), _i64(indptr), _i64(indices),
                                         _f64(weights), float(scale))
