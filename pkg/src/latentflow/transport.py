"""Exact optimal-transport assignment and the recoupling-ratio layer predictor.

The assignment solver is a shortest-augmenting-path Hungarian run over
lexicographic (cost, off-diagonal) pairs: the float component minimizes
transport cost, the integer component counts non-fixed-point edges, so among
all minimum-cost matchings the solver returns one with the most fixed points.
That makes the recoupling ratio insensitive to resolvable ties (a tied batch
whose original pairing is optimal reports zero recoupling instead of noise).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import DimensionError, InputError
from .rng import stream


class Metric(str, Enum):
    SQEUCLIDEAN = "sqeuclidean"
    EUCLIDEAN = "euclidean"


@dataclass
class CostMatrix:
    entries: np.ndarray
    metric: Metric

    def __post_init__(self):
        e = self.entries
        if e.ndim != 2 or e.shape[0] != e.shape[1]:
            raise DimensionError(f"cost matrix must be square, got {e.shape}")
        if not np.all(np.isfinite(e)):
            raise InputError("cost matrix has non-finite entries")
        if e.min() < 0:
            raise InputError("cost matrix has negative entries")


@dataclass
class AssignmentPlan:
    perm: np.ndarray  # perm[i] = target index matched to source i
    total_cost: float


@dataclass
class RecouplingReport:
    ratio: float
    batch_size: int
    n_batches: int
    fixed_point_fractions: list[float]


def cost_matrix(src: np.ndarray, dst: np.ndarray,
                metric: Metric = Metric.SQEUCLIDEAN) -> CostMatrix:
    """Pairwise transport costs C[i, j] = d(src[i], dst[j])."""
    src, dst = np.asarray(src, dtype=np.float64), np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape:
        raise DimensionError(f"cost_matrix: shapes differ, {src.shape} vs {dst.shape}")
    if src.ndim != 2:
        raise DimensionError(f"cost_matrix expects (N, D) inputs, got {src.shape}")
    diff = src[:, None, :] - dst[None, :, :]
    sq = np.einsum("ijk,ijk->ij", diff, diff)
    metric = Metric(metric)
    entries = np.sqrt(sq) if metric == Metric.EUCLIDEAN else sq
    return CostMatrix(entries, metric)


def _hungarian_lex(cost: np.ndarray, pen: np.ndarray) -> np.ndarray:
    """Min-cost perfect matching, ties broken by the secondary penalty matrix.

    Shortest augmenting paths with potentials, O(N^3); all scans run in
    ascending index order so results are deterministic.
    """
    n = cost.shape[0]
    u_f = np.zeros(n + 1)
    u_p = np.zeros(n + 1)
    v_f = np.zeros(n + 1)
    v_p = np.zeros(n + 1)
    match = np.zeros(n + 1, dtype=np.int64)  # match[j] = row assigned to column j (1-based)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv_f = np.full(n + 1, np.inf)
        minv_p = np.full(n + 1, np.inf)
        way = np.zeros(n + 1, dtype=np.int64)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            free = ~used[1:]
            cur_f = cost[i0 - 1] - u_f[i0] - v_f[1:]
            cur_p = pen[i0 - 1] - u_p[i0] - v_p[1:]
            better = free & ((cur_f < minv_f[1:])
                             | ((cur_f == minv_f[1:]) & (cur_p < minv_p[1:])))
            minv_f[1:][better] = cur_f[better]
            minv_p[1:][better] = cur_p[better]
            way[1:][better] = j0
            cand = np.where(free, minv_f[1:], np.inf)
            delta_f = cand.min()
            tie = free & (minv_f[1:] == delta_f)
            delta_p = np.where(tie, minv_p[1:], np.inf).min()
            j1 = int(np.nonzero(tie & (minv_p[1:] == delta_p))[0][0]) + 1
            rows_used = match[used]
            u_f[rows_used] += delta_f
            u_p[rows_used] += delta_p
            v_f[used] -= delta_f
            v_p[used] -= delta_p
            minv_f[1:][free] -= delta_f
            minv_p[1:][free] -= delta_p
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    perm = np.zeros(n, dtype=np.int64)
    for j in range(1, n + 1):
        perm[match[j] - 1] = j - 1
    return perm


def ot_assign(c: CostMatrix | np.ndarray) -> AssignmentPlan:
    """Minimal-cost perfect matching; among ties, the most identity-preserving."""
    entries = c.entries if isinstance(c, CostMatrix) else np.asarray(c, dtype=np.float64)
    if entries.ndim != 2 or entries.shape[0] != entries.shape[1]:
        raise DimensionError(f"assignment needs a square matrix, got {entries.shape}")
    if entries.shape[0] < 1:
        raise InputError("assignment needs at least one row")
    if not np.all(np.isfinite(entries)):
        raise InputError("assignment cost has non-finite entries")
    n = entries.shape[0]
    pen = 1.0 - np.eye(n)
    perm = _hungarian_lex(entries, pen)
    total = 0.0
    for i in range(n):
        total += float(entries[i, perm[i]])
    return AssignmentPlan(perm, total)


def recoupling_ratio(pair_batches, metric: Metric = Metric.SQEUCLIDEAN) -> RecouplingReport:
    """One minus the mean fixed-point fraction of OT matchings over the batches."""
    batches = list(pair_batches)
    if not batches:
        raise InputError("recoupling_ratio needs at least one batch")
    fracs = []
    size = None
    for src, dst in batches:
        src, dst = np.asarray(src), np.asarray(dst)
        if src.shape != dst.shape:
            raise DimensionError(f"batch shapes differ: {src.shape} vs {dst.shape}")
        plan = ot_assign(cost_matrix(src, dst, metric))
        n = src.shape[0]
        size = n if size is None else size
        fracs.append(float((plan.perm == np.arange(n)).mean()))
    return RecouplingReport(ratio=1.0 - float(np.mean(fracs)), batch_size=size,
                            n_batches=len(batches), fixed_point_fractions=fracs)


def recoupling_matrix(latents: np.ndarray, o_m: int = 256,
                      metric: Metric = Metric.SQEUCLIDEAN, n_batches: int = 8,
                      seed: int = 0) -> list[tuple[int, int, float, int, int]]:
    """Recoupling ratio for every ordered latent-stream pair (m < n).

    ``latents`` is (n_streams, n_tokens, d); token batches are drawn without
    replacement from a per-pair stream so pairs can be evaluated independently.
    Returns rows (m, n, ratio, o_m, n_batches).
    """
    latents = np.asarray(latents)
    if latents.ndim != 3:
        raise DimensionError(f"latents must be (streams, tokens, d), got {latents.shape}")
    n_streams, n_tokens, _ = latents.shape
    if o_m * n_batches > n_tokens:
        raise InputError(
            f"need {o_m * n_batches} tokens for {n_batches} disjoint batches of {o_m}, "
            f"have {n_tokens}")
    rows = []
    for m in range(n_streams):
        for n in range(m + 1, n_streams):
            rng = stream(seed, f"recouple/{m}-{n}")
            idx = rng.permutation(n_tokens)[: o_m * n_batches].reshape(n_batches, o_m)
            report = recoupling_ratio(
                [(latents[m, batch], latents[n, batch]) for batch in idx], metric)
            rows.append((m, n, report.ratio, o_m, n_batches))
    return rows


def write_recoupling_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["m", "n", "ratio", "o_m", "n_batches"])
        for m, n, ratio, o_m, n_batches in rows:
            w.writerow([m, n, repr(float(ratio)), o_m, n_batches])
