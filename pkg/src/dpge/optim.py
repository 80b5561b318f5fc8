"""DP-SGD: per-example clipping, sharded accumulation, one Gaussian draw per
logical batch, and AdamW with linear warmup/decay."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .model import PerSampleGradMatrix, loss_and_per_sample_gradients
from .params import ParamVector


class ProtocolError(RuntimeError):
    """Accumulator used out of order (overflow, or noise before the batch is complete)."""


class NumericError(FloatingPointError):
    """NaN or Inf reached a gradient."""


@dataclass(frozen=True)
class DpSgdConfig:
    noise_multiplier: float
    logical_batch_size: int
    shard_size: int
    peak_lr: float
    total_steps: int
    clip_norm: float = 1.0
    weight_decay: float = 0.5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not self.noise_multiplier >= 0:
            raise ValueError(f"noise_multiplier must be >= 0, got {self.noise_multiplier!r}")
        # clip_norm=inf is the no-clip sentinel used in tests
        if not self.clip_norm > 0:
            raise ValueError(f"clip_norm must be > 0, got {self.clip_norm!r}")
        if self.logical_batch_size < 1 or self.shard_size < 1:
            raise ValueError("batch and shard sizes must be positive")
        if self.shard_size > self.logical_batch_size:
            raise ValueError(
                f"shard_size {self.shard_size} exceeds logical_batch_size "
                f"{self.logical_batch_size}")
        if not self.peak_lr > 0:
            raise ValueError(f"peak_lr must be > 0, got {self.peak_lr!r}")
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be >= 1, got {self.total_steps!r}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay!r}")
        for name in ("adam_beta1", "adam_beta2"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (0, 1)")
        if not self.adam_eps > 0:
            raise ValueError("adam_eps must be > 0")


# -- clipping ---------------------------------------------------------------

def _scaled_norms(rows: np.ndarray) -> np.ndarray:
    scale = np.abs(rows).max(axis=1, initial=0.0)
    safe = np.where(scale > 0, scale, 1.0)
    with np.errstate(invalid="ignore"):
        r = rows / safe[:, None]
        return scale * np.sqrt(np.add.reduce(r * r, axis=1))


def _row_norms(rows: np.ndarray) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    # a plain row reduction is computed identically whatever the row count
    with np.errstate(over="ignore", under="ignore"):
        norms = np.sqrt(np.add.reduce(rows * rows, axis=1))
    # squares overflow above ~1e154 and underflow below ~1e-154
    redo = ~np.isfinite(norms) | (norms < 1e-150)
    if redo.any():
        norms[redo] = _scaled_norms(rows[redo])
    return norms


def check_finite(rows: np.ndarray, norms: Optional[np.ndarray] = None) -> None:
    if norms is None:
        norms = _row_norms(rows)
    suspect = np.flatnonzero(~np.isfinite(norms))
    if suspect.size:
        bad = suspect[~np.isfinite(rows[suspect]).all(axis=1)]
        if bad.size:
            raise NumericError(f"non-finite per-example gradient in rows {bad[:10].tolist()}")


def clip_rows(grads: PerSampleGradMatrix, C: float) -> PerSampleGradMatrix:
    """Scale each row g by min(1, C/||g||). Output is float64; rows already
    within the bound are returned exactly (float32 -> float64 is lossless)."""
    rows = np.array(grads.rows, dtype=np.float64)
    norms = _row_norms(rows)
    check_finite(rows, norms)
    if math.isinf(C):
        return PerSampleGradMatrix(rows)
    over = norms > C
    if over.any():
        # rows within the bound are multiplied by exactly 1.0
        rows *= np.where(over, C / np.where(over, norms, 1.0), 1.0)[:, None]
        # a rounding overshoot of ~1 ulp is pulled back under the bound
        renorm = _row_norms(rows)
        fix = np.flatnonzero(over & (renorm > C))
        if fix.size:
            rows[fix] *= np.nextafter(C / renorm[fix], 0.0)[:, None]
    return PerSampleGradMatrix(rows)


# -- accumulation -------------------------------------------------------------

@dataclass(frozen=True)
class AccumulatorState:
    """Running sum of clipped rows for one logical batch.

    Rows are folded into a binary-counter of pairwise partial sums keyed by the
    row's position in the logical batch, so the summation tree (and therefore
    every bit of ``clipped_sum``) depends only on row order, never on how the
    rows were split into shards. Memory is O(P log B).
    """
    param_count: int
    capacity: int
    examples_seen: int = 0
    blocks: Tuple[Tuple[int, np.ndarray], ...] = ()

    @classmethod
    def empty(cls, param_count: int, capacity: int) -> "AccumulatorState":
        return cls(param_count, capacity)

    @property
    def clipped_sum(self) -> np.ndarray:
        total = np.zeros(self.param_count)
        for _, block in self.blocks:
            total = total + block
        return total

    @property
    def complete(self) -> bool:
        return self.examples_seen == self.capacity


def accumulate_shard(state: AccumulatorState, clipped: PerSampleGradMatrix) -> AccumulatorState:
    rows = np.asarray(clipped.rows, dtype=np.float64)
    n = rows.shape[0]
    if rows.ndim != 2 or (n and rows.shape[1] != state.param_count):
        raise ProtocolError(f"shard shape {rows.shape} does not match P={state.param_count}")
    if state.examples_seen + n > state.capacity:
        raise ProtocolError(
            f"shard of {n} rows overflows the logical batch "
            f"({state.examples_seen}/{state.capacity} already seen)")
    blocks = list(state.blocks)
    for r in range(n):
        size, vec = 1, rows[r].copy()
        while blocks and blocks[-1][0] == size:
            left = blocks.pop()[1]
            size, vec = 2 * size, left + vec
        blocks.append((size, vec))
    return AccumulatorState(state.param_count, state.capacity, state.examples_seen + n,
                            tuple(blocks))


def clip_and_accumulate(state: AccumulatorState, grads: PerSampleGradMatrix, C: float,
                        block_rows: Optional[int] = None) -> AccumulatorState:
    """clip_rows + accumulate_shard over a shard, a few rows at a time.

    Clipping is row-local and the accumulator is keyed by row position, so the
    result is bit-identical to clipping the whole shard at once; working in
    small row blocks just keeps the float64 copies cache-sized.
    """
    rows = np.asarray(grads.rows)
    if block_rows is None:
        block_rows = max(1, (1 << 18) // max(1, rows.shape[1]))
    for start in range(0, rows.shape[0], block_rows):
        chunk = PerSampleGradMatrix(rows[start:start + block_rows])
        state = accumulate_shard(state, clip_rows(chunk, C))
    if rows.shape[0] == 0:
        state = accumulate_shard(state, PerSampleGradMatrix(rows.reshape(0, state.param_count)))
    return state


# -- noise --------------------------------------------------------------------

class NoiseStream:
    """Counter-based Gaussian stream: the draw for (seed, step) is fixed, and
    ``draws`` counts how many vectors have been requested."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.draws = 0

    def normal(self, size: int, step: int) -> np.ndarray:
        self.draws += 1
        bitgen = np.random.Philox(np.random.SeedSequence([self.seed, int(step)]))
        return np.random.Generator(bitgen).standard_normal(size)


def noisy_mean(state: AccumulatorState, sigma: float, C: float, B: int,
               noise_stream: NoiseStream, step: int = 0, return_noise: bool = False):
    """(clipped_sum + xi) / B with xi ~ N(0, sigma^2 C^2 I), one draw per call."""
    if not state.complete:
        raise ProtocolError(
            f"logical batch incomplete: {state.examples_seen}/{state.capacity} rows")
    z = noise_stream.normal(state.param_count, step)
    xi = z * (sigma * C) if sigma > 0 else np.zeros(state.param_count)
    mean = (state.clipped_sum + xi) / B
    return (mean, xi) if return_noise else mean


# -- schedule & AdamW -----------------------------------------------------------

def warmup_steps(total_steps: int) -> int:
    """About 5% of training, never fewer than 25 steps."""
    return max(25, math.ceil(0.05 * total_steps))


def lr_at(step: int, total_steps: int, peak_lr: float) -> float:
    if step < 0 or step > total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warm = warmup_steps(total_steps)
    if step <= warm or warm >= total_steps:
        return peak_lr * step / warm
    return peak_lr * (total_steps - step) / (total_steps - warm)


@dataclass
class OptimizerState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0

    @classmethod
    def zeros(cls, param_count: int) -> "OptimizerState":
        return cls(np.zeros(param_count), np.zeros(param_count), 0)


def adamw_step(opt: OptimizerState, params: ParamVector, grad: np.ndarray, lr: float,
               weight_decay: float, betas: Tuple[float, float] = (0.9, 0.999),
               eps: float = 1e-8) -> Tuple[OptimizerState, ParamVector]:
    """Bias-corrected Adam step plus decoupled decay theta -= lr * wd * theta."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != (len(params),):
        raise ValueError(f"gradient shape {grad.shape} != ({len(params)},)")
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient passed to adamw_step")
    b1, b2 = betas
    t = opt.step_count + 1
    m = b1 * opt.first_moment + (1 - b1) * grad
    v = b2 * opt.second_moment + (1 - b2) * grad * grad
    m_hat = m / (1 - b1**t)
    v_hat = v / (1 - b2**t)
    theta = params.values.astype(np.float64)
    theta = theta - lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * theta)
    return (OptimizerState(m, v, t),
            params.with_values(theta.astype(params.dtype)))


# -- sampling & the training step -------------------------------------------------

class PoissonSampler:
    """Each of n records joins the step-t batch independently with probability q."""

    def __init__(self, n: int, q: float, seed: int):
        self.n, self.q, self.seed = n, q, int(seed)

    def sample(self, step: int) -> np.ndarray:
        rng = np.random.default_rng([self.seed, int(step)])
        return np.flatnonzero(rng.random(self.n) < self.q)


class FixedSampler:
    def __init__(self, indices: Sequence[int]):
        self.indices = np.asarray(indices, dtype=np.int64)

    def sample(self, step: int) -> np.ndarray:
        return self.indices


@dataclass
class StepReport:
    step: int
    loss: float
    batch_size: int
    signal_norm: float
    noise_norm: float
    lr: float
    param_count: int

    @property
    def snr(self) -> Optional[float]:
        return self.signal_norm / self.noise_norm if self.noise_norm > 0 else None


PerSampleFn = Callable[..., Tuple[object, PerSampleGradMatrix]]


def dp_train_step(params: ParamVector, opt: OptimizerState, config: DpSgdConfig,
                  dataset, sampler, noise: NoiseStream, step: int, mode: str,
                  per_sample_fn: PerSampleFn = loss_and_per_sample_gradients,
                  dropout_seed: Optional[int] = None
                  ) -> Tuple[ParamVector, OptimizerState, StepReport]:
    """One logical DP-SGD step (1-based `step`).

    Samples a lot, walks it in shards of ``config.shard_size`` (forward,
    per-example gradients, clipping, accumulation), adds a single noise draw,
    divides by the configured batch size and applies AdamW with ``lr_at(step)``.
    Dropout (if the model uses it) is keyed by (dropout_seed, step, shard offset).
    """
    idx = sampler.sample(step)
    P = len(params)
    acc = AccumulatorState.empty(P, len(idx))
    losses = []
    for start in range(0, len(idx), config.shard_size):
        batch = dataset.batch(idx[start:start + config.shard_size])
        if dropout_seed is None:
            out, grads = per_sample_fn(params, batch, mode)
        else:
            shard_seed = int(np.random.SeedSequence(
                [int(dropout_seed), int(step), start]).generate_state(1)[0])
            out, grads = per_sample_fn(params, batch, mode, shard_seed)
        losses.append(np.asarray(out.losses, dtype=np.float64))
        acc = clip_and_accumulate(acc, grads, config.clip_norm)
    mean, xi = noisy_mean(acc, config.noise_multiplier, config.clip_norm,
                          config.logical_batch_size, noise, step, return_noise=True)
    lr = lr_at(step, config.total_steps, config.peak_lr)
    opt, params = adamw_step(opt, params, mean, lr, config.weight_decay,
                             (config.adam_beta1, config.adam_beta2), config.adam_eps)
    all_losses = np.concatenate(losses) if losses else np.zeros(0)
    report = StepReport(
        step=step,
        loss=float(all_losses.mean()) if all_losses.size else float("nan"),
        batch_size=len(idx),
        signal_norm=float(np.linalg.norm(acc.clipped_sum)),
        noise_norm=float(np.linalg.norm(xi)),
        lr=lr,
        param_count=P,
    )
    return params, opt, report
