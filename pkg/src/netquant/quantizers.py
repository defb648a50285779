"""Scalar codebook quantizers over flat parameter vectors.

Four schemes share one assignment/codebook representation:

* ``kmeans_lloyd`` - classic Lloyd iteration minimizing the plain sum of
  squared errors.
* ``hw_kmeans_lloyd`` - the same iteration under a curvature-weighted
  distortion: each squared error is scaled by that parameter's curvature,
  and cluster centers are curvature-weighted means. Parameters the loss is
  sensitive to are kept closer to their original values.
* ``uniform_quantize`` - equal-width bins over the value range, centers by
  plain or curvature-weighted mean. One shot, no iteration.
* ``ecsq_iterate`` - entropy-penalized clustering: each point pays its
  weighted squared error plus ``lam`` times the codeword cost
  ``-log2(p_j)`` of its cluster, so the converged codebook trades
  distortion against the rate a variable-length code will achieve.

All iterative solvers are deterministic (ties resolve to the lowest
cluster index), record a non-increasing objective trace, and finish with a
single-move stabilization pass: a converged result cannot be improved by
reassigning any one parameter (with the affected centers re-optimized).
Plain Lloyd fixed points do not guarantee that on their own.

Internally everything runs in float64 regardless of the storage precision
of the inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .params import CurvatureDiag, ParamSet

# Improvements smaller than this (relative to the current objective) are
# treated as float noise by the stabilization pass.
_MOVE_REL_TOL = 1e-12


@dataclass(frozen=True)
class Codebook:
    """Cluster centers plus how many parameters map to each."""

    centers: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        centers = np.ascontiguousarray(self.centers, dtype=np.float64)
        counts = np.ascontiguousarray(self.counts, dtype=np.int64)
        if centers.ndim != 1 or counts.shape != centers.shape:
            raise ValueError("centers and counts must be matching 1-d arrays")
        if centers.size < 1:
            raise ValueError("empty codebook")
        if not np.all(np.isfinite(centers)):
            raise ValueError("non-finite center")
        if np.any(counts < 0):
            raise ValueError("negative count")
        centers.setflags(write=False)
        counts.setflags(write=False)
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "counts", counts)

    @property
    def k(self) -> int:
        return int(self.centers.size)

    @property
    def n_params(self) -> int:
        return int(self.counts.sum())

    @property
    def proportions(self) -> np.ndarray:
        total = self.counts.sum()
        if total == 0:
            raise ValueError("codebook has no members")
        return self.counts / float(total)


@dataclass(frozen=True)
class ClusterConfig:
    """Knobs shared by the iterative quantizers."""

    k: int
    init: str = "linspace"
    max_iters: int = 200
    rel_tol: float = 1e-7
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if self.rel_tol <= 0:
            raise ValueError("rel_tol must be positive")
        if self.init not in ("linspace", "quantile", "seeded_random"):
            raise ValueError(f"unknown init {self.init!r}")


@dataclass(frozen=True)
class EcsqConfig(ClusterConfig):
    """ClusterConfig plus the bits-to-distortion exchange rate ``lam``."""

    lam: float = 0.0

    def __post_init__(self):
        super().__post_init__()
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")


class QuantizeResult(NamedTuple):
    assignment: np.ndarray
    codebook: Codebook
    trace: np.ndarray


class LambdaResult(NamedTuple):
    lam: float
    result: QuantizeResult
    met: bool
    entropy: float


def _values64(x) -> np.ndarray:
    if isinstance(x, ParamSet):
        return x.as_f64()
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError("expected a flat 1-d vector")
    return arr


def _curvature64(x, n: int) -> np.ndarray:
    if isinstance(x, CurvatureDiag):
        arr = x.as_f64()
    else:
        arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.shape != (n,):
        raise ValueError(f"curvature length {arr.size} != n_params {n}")
    if np.any(arr <= 0) or not np.all(np.isfinite(arr)):
        raise ValueError("curvature must be strictly positive and finite")
    return arr


def msqe(values, assignment, codebook: Codebook) -> float:
    """Sum of squared errors between values and their cluster centers."""
    v = _values64(values)
    r = v - codebook.centers[np.asarray(assignment)]
    return float(np.dot(r, r))


def hw_distortion(values, curvature, assignment, codebook: Codebook) -> float:
    """Curvature-weighted sum of squared errors (uniform curvature -> msqe)."""
    v = _values64(values)
    h = _curvature64(curvature, v.size)
    r = v - codebook.centers[np.asarray(assignment)]
    return float(np.sum(h * r * r))


def dequantize(assignment, codebook: Codebook) -> np.ndarray:
    """Reconstruct each parameter as its cluster center."""
    a = np.ascontiguousarray(assignment, dtype=np.int64)
    if a.size and (a.min() < 0 or a.max() >= codebook.k):
        raise ValueError("assignment index out of range")
    return codebook.centers[a]


def scatter_dequantize(
    total: int, assignment, codebook: Codebook, positions=None
) -> np.ndarray:
    """Dequantize into a length-``total`` vector, zeros where pruned."""
    out = np.zeros(total, dtype=np.float64)
    deq = dequantize(assignment, codebook)
    if positions is None:
        if deq.size != total:
            raise ValueError("assignment length != total without positions")
        return deq
    out[np.asarray(positions, dtype=np.int64)] = deq
    return out


def compact_codebook(assignment, codebook: Codebook) -> tuple[np.ndarray, Codebook]:
    """Drop zero-count clusters, renumbering the assignment to match."""
    a = np.ascontiguousarray(assignment, dtype=np.int64)
    keep = codebook.counts > 0
    if keep.all():
        return a, codebook
    remap = -np.ones(codebook.k, dtype=np.int64)
    remap[keep] = np.arange(int(keep.sum()))
    return remap[a], Codebook(codebook.centers[keep], codebook.counts[keep])


# ---------------------------------------------------------------------------
# Shared iteration machinery
# ---------------------------------------------------------------------------


def _initial_centers(v: np.ndarray, cfg: ClusterConfig) -> np.ndarray:
    lo, hi = float(v.min()), float(v.max())
    if cfg.init == "linspace":
        return np.linspace(lo, hi, cfg.k)
    if cfg.init == "quantile":
        return np.quantile(v, (np.arange(cfg.k) + 0.5) / cfg.k)
    rng = np.random.default_rng(cfg.seed)
    if cfg.k > v.size:
        raise ValueError("seeded_random init needs k <= n_params")
    return np.sort(v[rng.choice(v.size, size=cfg.k, replace=False)])


def _nearest(v: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d = np.abs(v[:, None] - centers[None, :])
    return np.argmin(d, axis=1).astype(np.int64)


def _weighted_centers(
    v: np.ndarray, h: np.ndarray, assign: np.ndarray, k: int, fallback: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    wsum = np.bincount(assign, weights=h, minlength=k)
    wval = np.bincount(assign, weights=h * v, minlength=k)
    centers = fallback.copy()
    nz = wsum > 0
    centers[nz] = wval[nz] / wsum[nz]
    return centers, wsum


def _distortion(v, h, assign, centers) -> float:
    r = v - centers[assign]
    return float(np.sum(h * r * r))


def _entropy_from_counts(counts: np.ndarray) -> float:
    total = counts.sum()
    if total <= 0:
        return 0.0
    p = counts[counts > 0] / float(total)
    return float(-np.sum(p * np.log2(p)))


def _reseed_empty_clusters(
    v: np.ndarray, h: np.ndarray, assign: np.ndarray, centers: np.ndarray, k: int
) -> tuple[np.ndarray, np.ndarray, bool]:
    """Move empty clusters onto the worst-fit parameters.

    Each reseeded center lands on the value with the largest individual
    weighted distortion (ties favor the lowest index), which strictly
    reduces the objective. Gives up when no positive-distortion candidates
    remain, e.g. fewer distinct values than clusters.
    """
    reseeded = False
    for _ in range(k):
        counts = np.bincount(assign, minlength=k)
        empty = np.flatnonzero(counts == 0)
        if empty.size == 0:
            break
        r = v - centers[assign]
        dist = h * r * r
        order = np.lexsort((np.arange(v.size), -dist))
        candidates = [i for i in order[: empty.size] if dist[i] > 0]
        if not candidates:
            break
        centers = centers.copy()
        for slot, point in zip(empty, candidates):
            centers[slot] = v[point]
        assign = _nearest(v, centers)
        reseeded = True
    return assign, centers, reseeded


class _MoveStats:
    """Incremental per-cluster sums used by the stabilization pass.

    Tracks, per cluster, the weight sum, weighted value sum, and member
    count, from which move deltas follow in O(1) without re-scanning.
    """

    def __init__(self, v, h, assign, k):
        self.v = v
        self.h = h
        self.k = k
        self.assign = assign.copy()
        self.wsum = np.bincount(assign, weights=h, minlength=k)
        self.wval = np.bincount(assign, weights=h * v, minlength=k)
        self.counts = np.bincount(assign, minlength=k).astype(np.int64)

    @property
    def centers(self) -> np.ndarray:
        c = np.zeros(self.k)
        nz = self.wsum > 0
        c[nz] = self.wval[nz] / self.wsum[nz]
        return c

    def apply(self, i: int, dst: int) -> None:
        src = self.assign[i]
        hi, vi = self.h[i], self.v[i]
        self.wsum[src] -= hi
        self.wval[src] -= hi * vi
        self.counts[src] -= 1
        self.wsum[dst] += hi
        self.wval[dst] += hi * vi
        self.counts[dst] += 1
        self.assign[i] = dst


def _move_deltas(stats: _MoveStats, lam: float | None) -> np.ndarray:
    """Objective change for moving each point to each cluster.

    Distortion deltas use the standard incremental identities: removing a
    point with weight ``h`` from a cluster with weight sum ``S`` and
    post-removal mean ``c'`` changes the cluster cost by
    ``-h (v - c')^2 (S - h) / S``; adding it to a cluster with weight ``S``
    and mean ``c`` costs ``+h (v - c)^2 S / (S + h)``. With ``lam`` set, the
    codeword-rate change (from the two affected cluster sizes) is added in
    unnormalized units, and empty (retired) clusters are off limits.
    """
    v, h, k = stats.v, stats.h, stats.k
    assign = stats.assign
    centers = stats.centers
    S = stats.wsum
    Sa = S[assign]
    ca = centers[assign]

    with np.errstate(invalid="ignore", divide="ignore"):
        # Mean of the source cluster after removing each point.
        c_rest = (Sa * ca - h * v) / (Sa - h)
        removal = -h * (v - c_rest) ** 2 * (Sa - h) / Sa
    singleton = stats.counts[assign] <= 1
    removal = np.where(singleton, 0.0, removal)

    add = h[:, None] * (v[:, None] - centers[None, :]) ** 2
    add *= S[None, :] / (S[None, :] + h[:, None])
    delta = removal[:, None] + add

    if lam is not None:
        def f(c):
            c = np.asarray(c, dtype=np.float64)
            return np.where(c > 0, c * np.log2(np.maximum(c, 1)), 0.0)

        na = stats.counts[assign].astype(np.float64)
        nj = stats.counts.astype(np.float64)
        # Unnormalized rate change: -lam * delta(sum n log2 n).
        rate = -lam * (f(na - 1) - f(na))[:, None] - lam * (
            f(nj + 1) - f(nj)
        )[None, :]
        delta = delta + rate
        delta[:, stats.counts == 0] = np.inf
    else:
        # Keep exactly k clusters: a singleton may not abandon its cluster.
        delta[singleton, :] = np.inf

    delta[np.arange(v.size), assign] = np.inf
    return delta


def _stabilize(
    v: np.ndarray,
    h: np.ndarray,
    assign: np.ndarray,
    k: int,
    lam: float | None,
    obj_scale: float,
) -> tuple[np.ndarray, int]:
    """Apply single-point moves until none improves the objective.

    Each scan computes every point's best move, then applies them best
    first, skipping any move that touches a cluster already changed in
    this scan; skipped deltas would be stale, applied ones are exact, so
    the objective strictly decreases by their sum. Returns the (possibly
    updated) assignment and the number of moves made.
    """
    stats = _MoveStats(v, h, assign, k)
    tol = _MOVE_REL_TOL * max(abs(obj_scale), 1.0)
    moves = 0
    for _ in range(v.size):
        delta = _move_deltas(stats, lam)
        best_dst = np.argmin(delta, axis=1)
        best_delta = delta[np.arange(v.size), best_dst]
        candidates = np.flatnonzero(best_delta < -tol)
        if candidates.size == 0:
            break
        order = candidates[np.argsort(best_delta[candidates], kind="stable")]
        dirty = np.zeros(k, dtype=bool)
        applied = 0
        for i in order:
            src, dst = stats.assign[i], best_dst[i]
            if dirty[src] or dirty[dst]:
                continue
            stats.apply(i, dst)
            dirty[src] = dirty[dst] = True
            applied += 1
        if applied == 0:
            break
        moves += applied
    return stats.assign, moves


def _lloyd_weighted(v: np.ndarray, h: np.ndarray, cfg: ClusterConfig) -> QuantizeResult:
    """Weighted Lloyd iteration plus the stabilization pass."""
    k = cfg.k
    centers = _initial_centers(v, cfg)
    assign = _nearest(v, centers)
    assign, centers, _ = _reseed_empty_clusters(v, h, assign, centers, k)
    obj = _distortion(v, h, assign, centers)
    trace = [obj]

    budget = cfg.max_iters
    while budget > 0:
        # Alternate center updates and nearest-center assignment.
        while budget > 0:
            budget -= 1
            new_centers, _ = _weighted_centers(v, h, assign, k, centers)
            new_assign = _nearest(v, new_centers)
            new_assign, new_centers, reseeded = _reseed_empty_clusters(
                v, h, new_assign, new_centers, k
            )
            new_obj = _distortion(v, h, new_assign, new_centers)
            if new_obj > obj:
                break  # below float resolution; keep the previous state
            improved = (obj - new_obj) > cfg.rel_tol * max(abs(obj), 1e-300)
            unchanged = np.array_equal(new_assign, assign)
            assign, centers, obj = new_assign, new_centers, new_obj
            trace.append(obj)
            if unchanged and not reseeded:
                break
            if not improved and not reseeded:
                break

        assign, moves = _stabilize(v, h, assign, k, None, trace[0])
        if moves == 0:
            break
        centers, _ = _weighted_centers(v, h, assign, k, centers)
        new_obj = _distortion(v, h, assign, centers)
        if new_obj <= obj:
            obj = new_obj
            trace.append(obj)

    centers, _ = _weighted_centers(v, h, assign, k, centers)
    counts = np.bincount(assign, minlength=k)
    return QuantizeResult(assign, Codebook(centers, counts), np.asarray(trace))


def kmeans_lloyd(values, cfg: ClusterConfig) -> QuantizeResult:
    """Cluster values into ``cfg.k`` groups minimizing the squared-error sum.

    Ties in the assignment step go to the lowest cluster index; a cluster
    that empties is reseeded at the worst-fit value, keeping exactly ``k``
    live clusters whenever the data has enough distinct values. The returned
    trace holds the objective after the initial assignment and after each
    accepted iteration, and is non-increasing.
    """
    v = _values64(values)
    return _lloyd_weighted(v, np.ones_like(v), cfg)


def hw_kmeans_lloyd(values, curvature, cfg: ClusterConfig) -> QuantizeResult:
    """Curvature-weighted Lloyd clustering.

    Identical to :func:`kmeans_lloyd` except that the objective weights each
    squared error by the parameter's curvature and centers are
    curvature-weighted means, so high-sensitivity parameters pull centers
    toward themselves. With constant curvature the assignments match plain
    k-means exactly.
    """
    v = _values64(values)
    h = _curvature64(curvature, v.size)
    return _lloyd_weighted(v, h, cfg)


def uniform_quantize(
    values, curvature=None, k: int = 8, center_rule: str = "mean"
) -> QuantizeResult:
    """Equal-width binning over ``[min, max]`` with per-bin centers.

    ``center_rule`` picks plain means or curvature-weighted means (the
    latter requires ``curvature``). Empty bins are dropped and the codebook
    compacted, so the effective cluster count may be below ``k``. A
    degenerate all-equal input collapses to a single cluster.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    if center_rule not in ("mean", "hessian_weighted_mean"):
        raise ValueError(f"unknown center_rule {center_rule!r}")
    v = _values64(values)
    if center_rule == "hessian_weighted_mean":
        if curvature is None:
            raise ValueError("hessian_weighted_mean needs a curvature vector")
        h = _curvature64(curvature, v.size)
    else:
        h = np.ones_like(v)

    lo, hi = float(v.min()), float(v.max())
    if hi == lo or k == 1:
        assign = np.zeros(v.size, dtype=np.int64)
        k_bins = 1
    else:
        width = (hi - lo) / k
        assign = np.minimum((v - lo) // width, k - 1).astype(np.int64)
        k_bins = k

    centers, _ = _weighted_centers(v, h, assign, k_bins, np.zeros(k_bins))
    counts = np.bincount(assign, minlength=k_bins)
    assign, codebook = compact_codebook(assign, Codebook(centers, counts))
    return QuantizeResult(assign, codebook, np.asarray([], dtype=np.float64))


def ecsq_iterate(values, curvature, cfg: EcsqConfig) -> QuantizeResult:
    """Entropy-penalized clustering for rate-aware codebooks.

    Alternates three steps: assign each point to the cluster minimizing
    ``h_i (v_i - c_j)^2 - lam * log2(p_j)``, recompute centers as
    curvature-weighted means, and refresh the proportions ``p_j`` from the
    new cluster sizes (initially uniform). The per-iteration objective
    ``J = D/n + lam * H`` never increases; clusters that empty are retired
    for good since their codeword cost is infinite. With ``lam == 0`` the
    entropy term vanishes and the run is exactly the curvature-weighted
    Lloyd iteration, empty-cluster reseeding included.

    Returns the assignment, a codebook that may contain retired zero-count
    slots (see :func:`compact_codebook`), and the trace of ``J``.
    """
    v = _values64(values)
    h = _curvature64(curvature, v.size)
    n, k, lam = v.size, cfg.k, cfg.lam

    if lam == 0.0:
        res = _lloyd_weighted(v, h, cfg)
        return QuantizeResult(res.assignment, res.codebook, res.trace / n)

    centers = _initial_centers(v, cfg)
    p = np.full(k, 1.0 / k)

    def assign_step(centers, p):
        cost = h[:, None] * (v[:, None] - centers[None, :]) ** 2
        penalty = np.where(p > 0, -lam * np.log2(np.maximum(p, 1e-300)), np.inf)
        return np.argmin(cost + penalty[None, :], axis=1).astype(np.int64)

    def objective(assign, centers, counts):
        return _distortion(v, h, assign, centers) / n + lam * _entropy_from_counts(
            counts
        )

    assign = assign_step(centers, p)
    centers, _ = _weighted_centers(v, h, assign, k, centers)
    counts = np.bincount(assign, minlength=k)
    p = counts / n
    obj = objective(assign, centers, counts)
    trace = [obj]

    budget = cfg.max_iters
    while budget > 0:
        while budget > 0:
            budget -= 1
            new_assign = assign_step(centers, p)
            new_centers, _ = _weighted_centers(v, h, new_assign, k, centers)
            new_counts = np.bincount(new_assign, minlength=k)
            new_p = new_counts / n
            new_obj = objective(new_assign, new_centers, new_counts)
            if new_obj > obj:
                break
            improved = (obj - new_obj) > cfg.rel_tol * max(abs(obj), 1e-300)
            unchanged = np.array_equal(new_assign, assign)
            assign, centers, counts, p = new_assign, new_centers, new_counts, new_p
            obj = new_obj
            trace.append(obj)
            if unchanged or not improved:
                break

        new_assign, moves = _stabilize(v, h, assign, k, lam, trace[0] * n)
        if moves == 0:
            break
        assign = new_assign
        centers, _ = _weighted_centers(v, h, assign, k, centers)
        counts = np.bincount(assign, minlength=k)
        p = counts / n
        new_obj = objective(assign, centers, counts)
        if new_obj <= obj:
            obj = new_obj
            trace.append(obj)

    centers, _ = _weighted_centers(v, h, assign, k, centers)
    counts = np.bincount(assign, minlength=k)
    return QuantizeResult(assign, Codebook(centers, counts), np.asarray(trace))


def solve_lambda(
    values,
    curvature,
    k: int,
    target_entropy: float,
    init: str = "linspace",
    seed: int = 0,
    max_iters: int = 200,
    rel_tol: float = 1e-7,
    entropy_slack: float = 0.05,
    max_rounds: int = 60,
) -> LambdaResult:
    """Find the smallest entropy penalty meeting a codeword-rate budget.

    Bisects ``lam`` over ``[0, lam_max]``, exploiting the downward trend of
    the achieved entropy as the penalty grows. Returns the lowest-distortion
    solution whose entropy is at most ``target_entropy + entropy_slack``
    bits; if even the collapse bound fails the budget, the endpoint solution
    comes back flagged ``met=False``.
    """
    if target_entropy <= 0:
        raise ValueError("target entropy must be positive")
    v = _values64(values)
    h = _curvature64(curvature, v.size)

    def run(lam: float) -> QuantizeResult:
        cfg = EcsqConfig(
            k=k, init=init, max_iters=max_iters, rel_tol=rel_tol, seed=seed, lam=lam
        )
        return ecsq_iterate(v, h, cfg)

    budget = target_entropy + entropy_slack
    res0 = run(0.0)
    h0 = _entropy_from_counts(res0.codebook.counts)
    if h0 <= budget:
        return LambdaResult(0.0, res0, True, h0)

    # Beyond this the rate term dominates any distortion difference.
    lam_max = 10.0 * float(h.max()) * (float(v.max()) - float(v.min())) ** 2
    res_hi = run(lam_max)
    h_hi = _entropy_from_counts(res_hi.codebook.counts)
    if h_hi > budget:
        return LambdaResult(lam_max, res_hi, False, h_hi)

    lo, hi = 0.0, lam_max
    best_lam, best_res, best_h = lam_max, res_hi, h_hi
    for _ in range(max_rounds):
        if best_h >= target_entropy - entropy_slack:
            break  # close enough to the budget from below
        if (hi - lo) <= 1e-9 * max(hi, 1e-300):
            break
        mid = 0.5 * (lo + hi)
        res = run(mid)
        h_mid = _entropy_from_counts(res.codebook.counts)
        if h_mid <= budget:
            hi, best_lam, best_res, best_h = mid, mid, res, h_mid
        else:
            lo = mid
    return LambdaResult(best_lam, best_res, True, best_h)
