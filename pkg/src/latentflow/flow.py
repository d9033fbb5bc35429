"""Flow losses, integration step rules, training loops, and unrolled inference.

Estimators are callables ``est(x, t, context) -> Tensor`` with a
``parameters()`` method; ``t`` may be a scalar (shared across rows) or a
per-row array. Endpoint training walks a chain of steps
0 -> t_1 -> ... -> t_{k-1} -> 1 with the interior times sampled uniformly
and sorted, penalizing only the final endpoint error; gradients flow through
every step of the chain.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import ContractError, DimensionError, InputError, NonFiniteError, TrainingDiverged
from .rng import stream
from .tensor import AdamW, Tensor, as_tensor, backward, no_grad


class StepRule(str, Enum):
    EULER = "euler"
    MIDPOINT = "midpoint"


@dataclass
class PairBatch:
    """Matched source/target latent rows for one training batch."""

    x0: np.ndarray
    x1: np.ndarray
    context: np.ndarray | None = None
    positions: np.ndarray | None = None

    def __post_init__(self):
        if self.x0.shape != self.x1.shape:
            raise DimensionError(f"pair shapes differ: {self.x0.shape} vs {self.x1.shape}")

    @property
    def size(self) -> int:
        return self.x0.shape[0]


@dataclass
class FlowConfig:
    method: str = "fw"  # sfm | fw | hybrid
    k_train: int = 3
    alpha: float = 0.001
    step_rule: StepRule = StepRule.MIDPOINT
    train_steps: int = 5000
    batch_size: int = 128
    seed: int = 0
    lr: float = 1e-3
    weight_decay: float = 0.01
    log_every: int = 10

    def __post_init__(self):
        if self.method not in ("sfm", "fw", "hybrid"):
            raise InputError(f"unknown training method {self.method!r}")
        if self.k_train < 1:
            raise ContractError("k_train must be >= 1")
        if self.alpha < 0:
            raise ContractError("alpha must be >= 0")
        self.step_rule = StepRule(self.step_rule)


def interpolate_linear(x0: np.ndarray, x1: np.ndarray, t: np.ndarray):
    """Straight-path state and velocity: x_t = (1-t) x0 + t x1, v = x1 - x0."""
    x0, x1 = np.asarray(x0), np.asarray(x1)
    if x0.shape != x1.shape:
        raise DimensionError(f"interpolate: shapes differ, {x0.shape} vs {x1.shape}")
    t = np.asarray(t, dtype=np.float64)
    if t.min() < 0.0 or t.max() > 1.0:
        raise ContractError("interpolation times must lie in [0, 1]")
    tt = t.reshape(-1, *([1] * (x0.ndim - 1)))
    return (1.0 - tt) * x0 + tt * x1, x1 - x0


def _mean_sq_endpoint(pred: Tensor, target: np.ndarray, n_rows: int) -> Tensor:
    diff = pred - Tensor(target)
    return (diff * diff).sum() * (1.0 / n_rows)


def fm_loss(estimator, batch: PairBatch, t: np.ndarray) -> Tensor:
    """Mean squared error between estimated and straight-path target velocity."""
    x_t, v_t = interpolate_linear(batch.x0, batch.x1, t)
    pred = estimator(Tensor(x_t), t, batch.context)
    return _mean_sq_endpoint(pred, v_t, batch.size)


def euler_step(estimator, x_t, t: float, t_next: float, context=None) -> Tensor:
    """x + d * u(x, t) with d = t_next - t."""
    if t_next < t:
        raise ContractError(f"euler_step: t'={t_next} < t={t}")
    x_t = as_tensor(x_t)
    d = t_next - t
    return x_t + estimator(x_t, t, context) * d


def midpoint_step(estimator, x_t, t: float, t_next: float, context=None) -> Tensor:
    """x + d * u(x + (d/2) u(x, t), t + d/2)."""
    if t_next < t:
        raise ContractError(f"midpoint_step: t'={t_next} < t={t}")
    x_t = as_tensor(x_t)
    d = t_next - t
    x_mid = x_t + estimator(x_t, t, context) * (d / 2.0)
    return x_t + estimator(x_mid, t + d / 2.0, context) * d


def take_step(estimator, x_t, t: float, t_next: float, rule: StepRule, context=None) -> Tensor:
    if rule == StepRule.EULER:
        return euler_step(estimator, x_t, t, t_next, context)
    return midpoint_step(estimator, x_t, t, t_next, context)


def walk(estimator, x0, times, rule: StepRule, context=None) -> Tensor:
    """Chain steps along the given increasing time grid (first 0, last 1)."""
    x = as_tensor(x0)
    for t, t_next in zip(times[:-1], times[1:]):
        x = take_step(estimator, x, t, t_next, rule, context)
    return x


def fw_chain_loss(estimator, batch: PairBatch, interior_times, rule: StepRule) -> Tensor:
    """Endpoint loss through the chained steps 0 -> t_1 ... t_{k-1} -> 1."""
    times = [0.0, *interior_times, 1.0]
    for a, b in zip(times[:-1], times[1:]):
        if b < a:
            raise ContractError(f"walk times must be sorted, got {times}")
    if times[0] < 0.0 or times[-1] > 1.0:
        raise ContractError("walk times must lie in [0, 1]")
    x_hat = walk(estimator, batch.x0, times, rule, batch.context)
    return _mean_sq_endpoint(x_hat, batch.x1, batch.size)


def fw_loss(estimator, batch: PairBatch, t1: float, t2: float, rule: StepRule) -> Tensor:
    """Three-step endpoint loss with sampled interior times t1 <= t2."""
    if not 0.0 <= t1 <= t2 <= 1.0:
        raise ContractError(f"fw_loss needs 0 <= t1 <= t2 <= 1, got ({t1}, {t2})")
    return fw_chain_loss(estimator, batch, (t1, t2), rule)


def hybrid_loss(estimator, batch: PairBatch, alpha: float, interior_times,
                fm_t: np.ndarray, rule: StepRule) -> Tensor:
    """Endpoint-walk loss plus alpha times the straight-path matching loss.

    The two terms use independently drawn time samples.
    """
    if alpha < 0:
        raise ContractError("alpha must be >= 0")
    return fw_chain_loss(estimator, batch, interior_times, rule) \
        + fm_loss(estimator, batch, fm_t) * alpha


def sample_fm_times(rng: np.random.Generator, n_rows: int) -> np.ndarray:
    """Per-row uniform times for straight-path matching."""
    return rng.uniform(0.0, 1.0, size=n_rows)


def sample_fw_times(rng: np.random.Generator, k: int) -> tuple[float, ...]:
    """k-1 sorted uniform interior times for a k-step walk."""
    if k < 1:
        raise ContractError("k must be >= 1")
    return tuple(np.sort(rng.uniform(0.0, 1.0, size=k - 1)).tolist())


# -- pair sources ----------------------------------------------------------------


class ArrayPairs:
    """Row-sampling source over in-memory (x0, x1) arrays.

    ``val_fraction`` reserves a trailing slice as the fixed validation batch;
    with 0 the full set doubles as validation (fine at toy scale).
    """

    def __init__(self, x0: np.ndarray, x1: np.ndarray, val_fraction: float = 0.0):
        if x0.shape != x1.shape:
            raise DimensionError(f"pair shapes differ: {x0.shape} vs {x1.shape}")
        n = x0.shape[0]
        cut = n - int(round(n * val_fraction))
        self.x0, self.x1 = x0[:cut], x1[:cut]
        self._val = PairBatch(x0[cut:], x1[cut:]) if cut < n else PairBatch(x0, x1)

    def sample(self, rng: np.random.Generator, batch_size: int) -> PairBatch:
        n = self.x0.shape[0]
        idx = rng.choice(n, size=min(batch_size, n), replace=False)
        return PairBatch(self.x0[idx], self.x1[idx])

    def val_batch(self) -> PairBatch:
        return self._val


class SequencePairs:
    """Source over per-sequence PairBatches; each step samples one sequence."""

    def __init__(self, batches: list[PairBatch], val: PairBatch | None = None):
        if not batches:
            raise InputError("SequencePairs needs at least one batch")
        self.batches = batches
        self._val = val

    def sample(self, rng: np.random.Generator, batch_size: int) -> PairBatch:
        return self.batches[int(rng.integers(0, len(self.batches)))]

    def val_batch(self) -> PairBatch | None:
        return self._val


# -- training -------------------------------------------------------------------


@dataclass
class TrainLog:
    records: list[tuple[int, float, float]] = field(default_factory=list)

    def add(self, step: int, loss: float, val_nmse: float):
        self.records.append((step, loss, val_nmse))

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "loss", "val_nmse"])
            for step, loss, val in self.records:
                w.writerow([step, repr(loss), repr(val)])

    @property
    def losses(self):
        return [r[1] for r in self.records]


def _step_loss(estimator, batch: PairBatch, config: FlowConfig, rng) -> Tensor:
    if config.method == "sfm":
        return fm_loss(estimator, batch, sample_fm_times(rng, batch.size))
    if config.method == "fw":
        return fw_chain_loss(estimator, batch, sample_fw_times(rng, config.k_train),
                             config.step_rule)
    fw_times = sample_fw_times(rng, config.k_train)
    fm_t = sample_fm_times(rng, batch.size)
    return hybrid_loss(estimator, batch, config.alpha, fw_times, fm_t, config.step_rule)


def _endpoint_nmse(estimator, batch: PairBatch, k: int, rule: StepRule) -> float:
    with no_grad():
        x_hat = lft_infer(estimator, Tensor(batch.x0), k, rule, batch.context).data
    denom = float((batch.x1 ** 2).sum())
    return float(((x_hat - batch.x1) ** 2).sum()) / denom


def train(estimator, pair_source, config: FlowConfig) -> TrainLog:
    """Optimize the estimator with the configured objective; deterministic per seed.

    ``pair_source.sample(rng, batch_size)`` yields a PairBatch per step;
    ``pair_source.val_batch()`` (optional) provides a fixed validation batch
    for the endpoint-NMSE column of the log.
    """
    rng = stream(config.seed, f"flow-train/{config.method}")
    opt = AdamW(estimator.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    log = TrainLog()
    val = pair_source.val_batch() if hasattr(pair_source, "val_batch") else None
    last_lr = config.lr
    for step in range(1, config.train_steps + 1):
        batch = pair_source.sample(rng, config.batch_size)
        opt.zero_grad()
        try:
            loss = _step_loss(estimator, batch, config, rng)
        except NonFiniteError as exc:
            raise TrainingDiverged(f"non-finite loss at step {step} (lr={last_lr})") from exc
        if not np.isfinite(loss.data):
            raise TrainingDiverged(f"non-finite loss at step {step} (lr={last_lr})")
        backward(loss)
        opt.step()
        if step % config.log_every == 0 or step == config.train_steps:
            val_nmse = (_endpoint_nmse(estimator, val, config.k_train, config.step_rule)
                        if val is not None else float("nan"))
            log.add(step, float(loss.data), val_nmse)
    return log


# -- inference ------------------------------------------------------------------


def lft_infer(estimator, x0, k: int, rule: StepRule, context=None) -> Tensor:
    """Transport x0 to the estimated endpoint in k equal-width steps."""
    if k < 1:
        raise ContractError("lft_infer: k must be >= 1")
    x = as_tensor(x0)
    for i in range(k):
        x = take_step(estimator, x, i / k, (i + 1) / k, rule, context)
    return x


@dataclass
class StepBlock:
    t0: float
    t1: float
    rule: StepRule

    @property
    def estimator_calls(self) -> int:
        return 1 if self.rule == StepRule.EULER else 2


class UnrolledFlow:
    """The inference time grid hardened into a static stack of step blocks."""

    def __init__(self, estimator, k: int, rule: StepRule):
        if k < 1:
            raise ContractError("unroll_graph: k must be >= 1")
        self.estimator = estimator
        self.rule = StepRule(rule)
        self.blocks = [StepBlock(i / k, (i + 1) / k, self.rule) for i in range(k)]

    @property
    def estimator_calls(self) -> int:
        return sum(b.estimator_calls for b in self.blocks)

    def __call__(self, x0, context=None) -> Tensor:
        x = as_tensor(x0)
        for block in self.blocks:
            x = take_step(self.estimator, x, block.t0, block.t1, block.rule, context)
        return x


def unroll_graph(estimator, k: int, rule: StepRule) -> UnrolledFlow:
    return UnrolledFlow(estimator, k, rule)
