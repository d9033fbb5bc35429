"""Paired 2-D experiments: crossing geometries, training, trajectory diagnostics.

Three generators elicit the qualitative training phenomena: ParallelLines has
no interpolant crossings (straight matching succeeds), CrossingX funnels every
interpolant through one point, and SwappedClusters anti-aligns two clusters so
the straight pairings collide mid-path. Diagnostics quantify what the figures
show: endpoint error, whether each point still reaches its own target, and how
far trajectories bend away from the chord.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import InputError
from .flow import ArrayPairs, FlowConfig, StepRule, TrainLog, take_step, train
from .metrics import nmse
from .nets import VelocityMlp
from .rng import stream
from .tensor import Tensor, no_grad


class ToyKind(str, Enum):
    CROSSING_X = "crossing_x"
    PARALLEL_LINES = "parallel_lines"
    SWAPPED_CLUSTERS = "swapped_clusters"


@dataclass
class ToyDataset:
    kind: ToyKind
    n_pairs: int
    noise_sigma: float
    seed: int
    x0: np.ndarray
    x1: np.ndarray


@dataclass
class TrajectoryDiag:
    endpoint_nmse: float
    pair_preservation: float
    straightness: float


def gen_pairs(kind: ToyKind, n: int, sigma: float, seed: int) -> ToyDataset:
    """Deterministic paired 2-D points for the given geometry.

    Noise perturbs the source points; each target is the exact geometric image
    of its noisy source. Independent endpoint noise would shuffle the pairing
    among close neighbours into micro-crossings that no continuous flow can
    realize, which would turn pair preservation into a coin flip instead of a
    trainability signal. Chord crossings between the two families remain.
    """
    if n < 2:
        raise InputError("toy datasets need at least 2 pairs")
    kind = ToyKind(kind)
    rng = stream(seed, f"toy/{kind.value}")
    if kind == ToyKind.CROSSING_X:
        # sources on the segment x=0, targets mirrored so every chord passes
        # near (0.5, 0.5)
        y = np.linspace(0.0, 1.0, n)
        x0 = np.stack([np.zeros(n), y], axis=1) + sigma * rng.normal(size=(n, 2))
        x1 = np.stack([1.0 + x0[:, 0], 1.0 - x0[:, 1]], axis=1)
    elif kind == ToyKind.PARALLEL_LINES:
        y = np.linspace(0.0, 1.0, n)
        x0 = np.stack([np.zeros(n), y], axis=1) + sigma * rng.normal(size=(n, 2))
        x1 = x0 + np.array([1.0, 0.0])
    else:  # SWAPPED_CLUSTERS
        half = n // 2
        ups = np.full(n, -1.0)
        ups[:half] = 1.0
        x0 = np.stack([np.zeros(n), ups], axis=1) + sigma * rng.normal(size=(n, 2))
        x1 = x0 + np.stack([np.ones(n), -2.0 * ups], axis=1)
    return ToyDataset(kind, n, sigma, seed, x0, x1)


def crossing_fraction(ds: ToyDataset, t_lo: float = 0.3, t_hi: float = 0.7) -> float:
    """Fraction of opposite-cluster chord pairs intersecting within (t_lo, t_hi)."""
    half = ds.n_pairs // 2
    a0, a1 = ds.x0[:half], ds.x1[:half]
    b0, b1 = ds.x0[half:], ds.x1[half:]
    da = a1 - a0
    db = b1 - b0
    hits = 0
    for i in range(a0.shape[0]):
        # solve a0 + t*da = b0 + s*db for each opposing chord
        rhs = b0 - a0[i]
        det = da[i, 0] * (-db[:, 1]) - da[i, 1] * (-db[:, 0])
        ok = np.abs(det) > 1e-12
        t = (rhs[:, 0] * (-db[:, 1]) - rhs[:, 1] * (-db[:, 0])) / np.where(ok, det, 1.0)
        s = (da[i, 0] * rhs[:, 1] - da[i, 1] * rhs[:, 0]) / np.where(ok, det, 1.0)
        inside = ok & (t > t_lo) & (t < t_hi) & (s > 0.0) & (s < 1.0)
        hits += int(inside.sum())
    return hits / (a0.shape[0] * b0.shape[0])


def straightness(trajectories: np.ndarray) -> float:
    """Mean over trajectories of (polyline length / chord length) - 1."""
    trajectories = np.asarray(trajectories)
    if trajectories.ndim != 3 or trajectories.shape[1] < 2:
        raise InputError("trajectories must be (n, steps>=2, d)")
    seg = np.linalg.norm(np.diff(trajectories, axis=1), axis=-1).sum(axis=1)
    chord = np.linalg.norm(trajectories[:, -1] - trajectories[:, 0], axis=-1)
    keep = chord > 0
    if not keep.all():
        warnings.warn(f"skipping {int((~keep).sum())} zero-chord trajectories")
    if not keep.any():
        raise InputError("all trajectories have zero chord length")
    return float((seg[keep] / chord[keep] - 1.0).mean())


def infer_trajectories(estimator, x0: np.ndarray, k: int,
                       rule: StepRule) -> np.ndarray:
    """Integrate all points over the uniform k-step grid; (n, k+1, d)."""
    out = np.empty((x0.shape[0], k + 1, x0.shape[1]))
    out[:, 0] = x0
    with no_grad():
        x = Tensor(x0)
        for i in range(k):
            x = take_step(estimator, x, i / k, (i + 1) / k, rule)
            out[:, i + 1] = x.data
    return out


def toy_diagnostics(estimator, ds: ToyDataset, k_infer: int,
                    rule: StepRule) -> tuple[TrajectoryDiag, np.ndarray]:
    """Run inference for every pair and summarize endpoint fidelity."""
    traj = infer_trajectories(estimator, ds.x0, k_infer, rule)
    endpoints = traj[:, -1]
    dist = ((endpoints[:, None, :] - ds.x1[None, :, :]) ** 2).sum(axis=-1)
    nearest = dist.argmin(axis=1)
    diag = TrajectoryDiag(
        endpoint_nmse=nmse(endpoints, ds.x1),
        pair_preservation=float((nearest == np.arange(ds.n_pairs)).mean()),
        straightness=straightness(traj),
    )
    return diag, traj


def run_toy(config: FlowConfig, ds: ToyDataset,
            k_infer: int | None = None) -> tuple[TrajectoryDiag, np.ndarray, TrainLog]:
    """Train a velocity MLP on the dataset, then report trajectory diagnostics."""
    estimator = VelocityMlp(dim=2, seed=config.seed)
    log = train(estimator, ArrayPairs(ds.x0, ds.x1), config)
    diag, traj = toy_diagnostics(estimator, ds, k_infer or config.k_train, config.step_rule)
    return diag, traj, log


def write_trajectories_csv(path, traj: np.ndarray, k_infer: int) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pair_id", "step", "t", "x", "y"])
        for pid in range(traj.shape[0]):
            for s in range(traj.shape[1]):
                w.writerow([pid, s, repr(s / k_infer),
                            repr(traj[pid, s, 0]), repr(traj[pid, s, 1])])


DIAG_CSV_HEADER = ["method", "k_train", "k_infer", "endpoint_nmse",
                   "pair_preservation", "straightness"]


def write_diagnostics_csv(path, rows) -> None:
    """Rows are (method, k_train, k_infer, TrajectoryDiag)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DIAG_CSV_HEADER)
        for method, k_train, k_infer, diag in rows:
            w.writerow([method, k_train, k_infer, repr(diag.endpoint_nmse),
                        repr(diag.pair_preservation), repr(diag.straightness)])
