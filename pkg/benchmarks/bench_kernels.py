"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--nodes 2000] [--repeat 20]

Inputs mirror the first convolution block: k=5 spectral neighbours plus
self, 5 input channels, 8 output channels, degree-1 B-splines on a 5^3 grid.
"""
import argparse
import timeit

import numpy as np

from meshpool import kernels
from meshpool.spectral import Neighborhood


def make_inputs(n, k=6, m_in=5, m_out=8, grid=5, seed=0):
    rng = np.random.default_rng(seed)
    lists = [[int(j) for j in rng.choice(n, k - 1, replace=False)] + [i] for i in range(n)]
    nb = Neighborhood.from_lists(lists)
    U = rng.uniform(0.0, 1.0, size=(nb.n_edges, 3))
    grid_arr = np.array([grid] * 3)
    basis, kidx, _, _ = kernels.bspline_basis(U, grid_arr)
    K = grid ** 3
    Y = rng.normal(size=(n, m_in))
    W = rng.normal(size=(K, m_in, m_out))
    b = rng.normal(size=m_out)
    dZ = rng.normal(size=(n, m_out))
    S = rng.dirichlet(np.ones(16), size=n)
    weights = rng.uniform(0.1, 1.0, size=nb.n_edges)
    return dict(nb=nb, U=U, grid=grid_arr, basis=basis, kidx=kidx, Y=Y, W=W, b=b, dZ=dZ,
                S=S, weights=weights)


def cases(x):
    nb = x["nb"]
    return {
        "bspline_basis": lambda: kernels.bspline_basis(x["U"], x["grid"]),
        "conv_forward": lambda: kernels.conv_forward(x["Y"], x["W"], x["b"], x["basis"],
                                                     x["kidx"], nb.indptr, nb.indices),
        "conv_backward": lambda: kernels.conv_backward(x["Y"], x["W"], x["basis"], x["kidx"],
                                                       nb.indptr, nb.indices, x["dZ"]),
        "laplacian_edge_sum": lambda: kernels.laplacian_edge_sum(x["S"], nb.indptr, nb.indices,
                                                                 x["weights"]),
        "laplacian_edge_sum_grad": lambda: kernels.laplacian_edge_sum_grad(
            x["S"], nb.indptr, nb.indices, x["weights"], 1.0),
    }


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--nodes", type=int, default=2000)
    p.add_argument("--repeat", type=int, default=20)
    args = p.parse_args()
    x = make_inputs(args.nodes)
    backends = kernels.available_backends()
    timings = {}
    for backend in backends:
        kernels.use_backend(backend)
        for name, fn in cases(x).items():
            fn()  # warm up
            best = min(timeit.repeat(fn, number=1, repeat=args.repeat))
            timings[(name, backend)] = best
    print(f"nodes={args.nodes}, edges={x['nb'].n_edges}, best of {args.repeat} (ms)")
    print(f"{'kernel':26s}" + "".join(f"{b:>12s}" for b in backends) +
          ("     speedup" if len(backends) > 1 else ""))
    for name in cases(x):
        row = [timings[(name, b)] * 1e3 for b in backends]
        line = f"{name:26s}" + "".join(f"{t:12.3f}" for t in row)
        if "compiled" in backends and "python" in backends:
            line += f"{timings[(name, 'python')] / timings[(name, 'compiled')]:11.1f}x"
        print(line)


if __name__ == "__main__":
    main()
