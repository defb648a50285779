"""Brute-force oracles shared by the unit and acceptance suites.

Everything here recomputes objectives from scratch, independent of the
library's incremental bookkeeping, so agreement is meaningful.
"""

import numpy as np

from netquant import Codebook
from netquant.coding import entropy_bits


def iter_partitions(n: int, max_k: int):
    """All assignments of n items into at most max_k unlabeled clusters,
    as restricted growth strings."""
    labels = [0] * n

    def rec(i, used):
        if i == n:
            yield tuple(labels)
            return
        for c in range(min(used + 1, max_k)):
            labels[i] = c
            yield from rec(i + 1, max(used, c + 1))

    yield from rec(0, 0)


def weighted_cost(v, h, assign, k):
    """Curvature-weighted distortion with centers recomputed as weighted
    means, from scratch."""
    total = 0.0
    for j in range(k):
        member = np.asarray(assign) == j
        if not member.any():
            continue
        c = np.sum(h[member] * v[member]) / np.sum(h[member])
        total += float(np.sum(h[member] * (v[member] - c) ** 2))
    return total


def lagrangian_cost(v, h, assign, k, lam):
    counts = np.bincount(np.asarray(assign), minlength=k)
    return weighted_cost(v, h, assign, k) / v.size + lam * entropy_bits(counts)


def global_optimum(v, h, k, lam=None):
    """Exhaustive best partition; exponential, keep n small."""
    best = np.inf
    best_assign = None
    for assign in iter_partitions(v.size, k):
        cost = (
            weighted_cost(v, h, assign, k)
            if lam is None
            else lagrangian_cost(v, h, assign, k, lam)
        )
        if cost < best - 1e-15:
            best = cost
            best_assign = assign
    return best, best_assign


def one_move_stable(v, h, assign, k, lam=None, rel_tol=1e-9):
    """No reassignment of a single value (with centers re-optimized)
    improves the objective.

    For the rate-penalized objective, empty clusters are retired and not a
    legal destination. For plain clustering a cluster's only member may not
    leave (the solver keeps k live clusters), though such a move could
    never improve anyway.
    """
    assign = np.asarray(assign)
    counts = np.bincount(assign, minlength=k)
    base = (
        weighted_cost(v, h, assign, k)
        if lam is None
        else lagrangian_cost(v, h, assign, k, lam)
    )
    tol = rel_tol * max(abs(base), 1.0)
    for i in range(v.size):
        for j in range(k):
            if j == assign[i]:
                continue
            if counts[j] == 0:
                continue
            trial = assign.copy()
            trial[i] = j
            cost = (
                weighted_cost(v, h, trial, k)
                if lam is None
                else lagrangian_cost(v, h, trial, k, lam)
            )
            if cost < base - tol:
                return False
    return True


def rounded32(codebook: Codebook) -> Codebook:
    """Centers at storage precision, the model the bitstream describes."""
    return Codebook(
        codebook.centers.astype(np.float32).astype(np.float64), codebook.counts
    )
