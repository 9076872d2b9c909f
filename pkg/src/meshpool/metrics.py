"""Accuracy, mean absolute error and adjusted mutual information."""
import numpy as np
from scipy.special import gammaln

from .errors import ArgumentError


def accuracy(predicted, target):
    predicted, target = np.asarray(predicted), np.asarray(target)
    if predicted.shape != target.shape:
        raise ArgumentError(f"shape mismatch {predicted.shape} vs {target.shape}")
    if predicted.size == 0:
        raise ArgumentError("accuracy of an empty set is undefined")
    return 100.0 * float(np.mean(predicted == target))


def mean_absolute_error(predicted, target):
    predicted = np.asarray(predicted, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if predicted.shape != target.shape:
        raise ArgumentError(f"shape mismatch {predicted.shape} vs {target.shape}")
    if predicted.size == 0:
        raise ArgumentError("MAE of an empty set is undefined")
    return float(np.mean(np.abs(predicted - target)))


def contingency(a, b):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape or a.ndim != 1:
        raise ArgumentError(f"label arrays must be 1-D and equally long, got {a.shape}, {b.shape}")
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ia.max() + 1 if ia.size else 0, ib.max() + 1 if ib.size else 0),
                     dtype=np.int64)
    np.add.at(table, (ia, ib), 1)
    return table


def _entropy(counts):
    counts = counts[counts > 0].astype(np.float64)
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())


def mutual_information(table):
    n = table.sum()
    rows, cols = table.sum(axis=1), table.sum(axis=0)
    nz = table > 0
    nij = table[nz].astype(np.float64)
    outer = np.outer(rows, cols)[nz].astype(np.float64)
    return float(np.sum(nij / n * (np.log(nij * n) - np.log(outer))))


def expected_mutual_information(table):
    """E[MI] when both marginals are fixed and labels are permuted at random."""
    n = int(table.sum())
    a = table.sum(axis=1).astype(np.int64)
    b = table.sum(axis=0).astype(np.int64)
    emi = 0.0
    lg_n = gammaln(n + 1)
    for ai in a:
        for bj in b:
            lo = max(1, ai + bj - n)
            hi = min(ai, bj)
            if lo > hi:
                continue
            nij = np.arange(lo, hi + 1, dtype=np.float64)
            log_p = (gammaln(ai + 1) + gammaln(bj + 1) + gammaln(n - ai + 1)
                     + gammaln(n - bj + 1) - lg_n - gammaln(nij + 1) - gammaln(ai - nij + 1)
                     - gammaln(bj - nij + 1) - gammaln(n - ai - bj + nij + 1))
            term = nij / n * (np.log(n * nij) - np.log(float(ai) * float(bj)))
            emi += float(np.sum(term * np.exp(log_p)))
    return emi


def ami(labels_a, labels_b):
    """Adjusted mutual information with the arithmetic-mean normalizer.

    When the normalizer vanishes (both partitions trivial) the score is 1
    for identical partitions and 0 otherwise, by convention.
    """
    table = contingency(labels_a, labels_b)
    if table.size == 0:
        raise ArgumentError("AMI of empty labelings is undefined")
    identical = bool(np.all((table > 0).sum(axis=0) == 1) and np.all((table > 0).sum(axis=1) == 1))
    h_a, h_b = _entropy(table.sum(axis=1)), _entropy(table.sum(axis=0))
    mi = mutual_information(table)
    emi = expected_mutual_information(table)
    denom = 0.5 * (h_a + h_b) - emi
    if abs(denom) < 1e-15:
        return 1.0 if identical else 0.0
    if identical:
        return 1.0
    return float((mi - emi) / denom)
