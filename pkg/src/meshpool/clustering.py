"""Seeded, deterministic k-means."""
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError


@dataclass
class KMeansResult:
    labels: np.ndarray
    centers: np.ndarray
    objective: float
    trace: list  # objective after every assignment step of the kept restart


def _sq_dists(X, centers):
    return ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)


def _plusplus(X, k, rng):
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers.append(X[idx])
        d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def _lloyd(X, centers, max_iter, tol):
    centers = centers.copy()
    k = centers.shape[0]
    trace = []
    labels = None
    for _ in range(max_iter):
        d2 = _sq_dists(X, centers)
        labels = d2.argmin(axis=1)
        point_cost = d2[np.arange(X.shape[0]), labels]
        trace.append(float(point_cost.sum()))
        counts = np.bincount(labels, minlength=k)
        new_centers = np.zeros_like(centers)
        np.add.at(new_centers, labels, X)
        for c in range(k):
            if counts[c]:
                new_centers[c] /= counts[c]
            else:
                # re-seed an empty cluster from the currently worst-served point
                far = int(point_cost.argmax())
                new_centers[c] = X[far]
                point_cost[far] = 0.0
        shift = np.abs(new_centers - centers).max()
        centers = new_centers
        if shift <= tol:
            break
    d2 = _sq_dists(X, centers)
    labels = d2.argmin(axis=1)
    objective = float(d2[np.arange(X.shape[0]), labels].sum())
    trace.append(objective)
    return labels, centers, objective, trace


def kmeans(X, k, seed=0, n_init=4, max_iter=100, tol=0.0, init=None):
    """Lloyd's k-means with k-means++ starts; keeps the lowest-objective restart.

    ``init`` (k, dim) fixes the starting centers and disables restarts.
    Cluster ids are relabelled in order of first appearance along the rows
    of ``X`` so the output does not depend on the random start.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if not 1 <= k <= n:
        raise ArgumentError(f"k must lie in [1, {n}], got {k}")
    if init is not None:
        starts = [np.asarray(init, dtype=np.float64)]
    else:
        rng = np.random.default_rng(seed)
        starts = [_plusplus(X, k, rng) for _ in range(max(1, n_init))]
    best = None
    for start in starts:
        result = _lloyd(X, start, max_iter, tol)
        if best is None or result[2] < best[2]:
            best = result
    labels, centers, objective, trace = best
    if init is None:
        _, first = np.unique(labels, return_index=True)
        order = labels[np.sort(first)]
        remap = np.full(k, -1, dtype=np.int64)
        remap[order] = np.arange(order.size)
        unused = np.flatnonzero(remap < 0)
        remap[unused] = np.arange(order.size, k)
        labels = remap[labels]
        reordered = np.empty_like(centers)
        reordered[remap] = centers
        centers = reordered
    return KMeansResult(labels=labels, centers=centers, objective=objective, trace=trace)
