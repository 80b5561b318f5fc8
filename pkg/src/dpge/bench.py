"""Runtime comparison of per-example gradient strategies under DP-SGD.

Three execution modes train the same classifier with identical math:

* ``naive_loop``  one backward pass per example
* ``vectorized``  one per-example backward pass over the whole batch
* ``sharded``     the vectorised pass over fixed-size shards of the batch
"""

from __future__ import annotations

import csv
import statistics
import time
import tracemalloc
from dataclasses import dataclass, field
from typing import IO, Iterable, List, Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_info

from .data import NUM_SPECIAL, SPECIAL_TOKENS, Vocab, make_synthetic_classification
from .model import CLASSIFY, per_sample_gradients
from .optim import (AccumulatorState, NoiseStream, OptimizerState, adamw_step,
                    clip_and_accumulate, noisy_mean)
from .params import ModelConfig, ParamVector, init_params

MODES = ("naive_loop", "vectorized", "sharded")
BENCH_HEADER = ("mode", "batch_size", "median_epoch_seconds", "peak_memory_bytes",
                "epochs_measured")


@dataclass
class BenchResult:
    mode: str
    batch_size: int
    median_epoch_seconds: Optional[float]
    peak_memory_bytes: Optional[int]
    epochs_measured: int
    error: Optional[str] = None
    epoch_seconds: List[float] = field(default_factory=list, repr=False)
    final_params: Optional[ParamVector] = field(default=None, repr=False)
    blas_threads: Optional[int] = None

    @property
    def failed(self) -> bool:
        return self.error is not None


def toy_vocab(size: int) -> Vocab:
    return Vocab(list(SPECIAL_TOKENS) + [f"t{i:05d}" for i in range(size - NUM_SPECIAL)])


def _blas_threads() -> Optional[int]:
    info = threadpool_info()
    return max((i.get("num_threads", 1) for i in info), default=None)


def _train_epoch(params, opt, data, order, mode, batch_size, shard_size, sigma, clip_norm,
                 lr, weight_decay, noise, step0):
    step = step0
    for start in range(0, len(order) - batch_size + 1, batch_size):
        batch = data.batch(order[start:start + batch_size])
        acc = AccumulatorState.empty(len(params), batch_size)
        if mode == "naive_loop":
            for i in range(batch_size):
                g = per_sample_gradients(params, batch[i], CLASSIFY)
                acc = clip_and_accumulate(acc, g, clip_norm)
        elif mode == "vectorized":
            g = per_sample_gradients(params, batch, CLASSIFY)
            acc = clip_and_accumulate(acc, g, clip_norm)
        else:
            for s in range(0, batch_size, shard_size):
                g = per_sample_gradients(params, batch[np.arange(s, min(s + shard_size,
                                                                         batch_size))],
                                         CLASSIFY)
                acc = clip_and_accumulate(acc, g, clip_norm)
        step += 1
        grad = noisy_mean(acc, sigma, clip_norm, batch_size, noise, step)
        opt, params = adamw_step(opt, params, grad, lr, weight_decay)
    return params, opt, step


def run_bench(mode: str, batch_size: int, epochs: int = 20,
              model_config: Optional[ModelConfig] = None, dataset_size: int = 256,
              seed: int = 0, shard_size: Optional[int] = None, noise_multiplier: float = 1.0,
              clip_norm: float = 1.0, lr: float = 1e-3, weight_decay: float = 0.5,
              measure_memory: bool = False) -> BenchResult:
    """Train the classifier for ``epochs`` timed epochs (plus one discarded warm-up)
    and report the median epoch wall-clock time."""
    if mode not in MODES:
        raise ValueError(f"unknown bench mode {mode!r}; choose from {MODES}")
    if batch_size > dataset_size:
        raise ValueError(f"batch_size {batch_size} exceeds dataset_size {dataset_size}")
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    cfg = model_config or ModelConfig()
    shard_size = shard_size or max(1, batch_size // 4)
    vocab = toy_vocab(cfg.vocab_size)
    data = make_synthetic_classification(vocab, dataset_size, seed,
                                         seq_len=min(32, cfg.max_seq_len))
    params = init_params(cfg, seed)
    opt = OptimizerState.zeros(len(params))
    noise = NoiseStream(seed + 1)
    step = 0
    times = []
    peak = None
    try:
        for epoch in range(epochs + 1):
            order = np.random.default_rng([seed, epoch]).permutation(dataset_size)
            t0 = time.perf_counter()
            params, opt, step = _train_epoch(params, opt, data, order, mode, batch_size,
                                             shard_size, noise_multiplier, clip_norm, lr,
                                             weight_decay, noise, step)
            if epoch > 0:
                times.append(time.perf_counter() - t0)
        if measure_memory:
            # separate untimed pass; tracing slows allocation-heavy code
            order = np.random.default_rng([seed, epochs + 1]).permutation(dataset_size)
            tracemalloc.start()
            _train_epoch(params.copy(), opt, data, order, mode, batch_size, shard_size,
                         noise_multiplier, clip_norm, lr, weight_decay, NoiseStream(seed), 0)
            peak = tracemalloc.get_traced_memory()[1]
            tracemalloc.stop()
    except MemoryError as exc:
        return BenchResult(mode, batch_size, None, None, len(times),
                           error=f"MemoryError: {exc}", epoch_seconds=times)
    return BenchResult(mode, batch_size, statistics.median(times), peak, len(times),
                       epoch_seconds=times, final_params=params,
                       blas_threads=_blas_threads())


def run_sweep(modes: Sequence[str], batch_sizes: Sequence[int], **kwargs) -> List[BenchResult]:
    """Run every (mode, batch size) cell in isolation; failed cells are kept."""
    results = []
    for mode in modes:
        for bs in batch_sizes:
            try:
                results.append(run_bench(mode, bs, **kwargs))
            except MemoryError as exc:
                results.append(BenchResult(mode, bs, None, None, 0, error=str(exc)))
    return results


def emit_bench_csv(results: Iterable[BenchResult], sink: IO[str]) -> None:
    writer = csv.writer(sink, lineterminator="\n")
    writer.writerow(BENCH_HEADER)
    for r in sorted(results, key=lambda r: (r.mode, r.batch_size)):
        writer.writerow([
            r.mode,
            str(r.batch_size),
            "" if r.median_epoch_seconds is None else format(r.median_epoch_seconds, ".9g"),
            "" if r.peak_memory_bytes is None else str(int(r.peak_memory_bytes)),
            str(r.epochs_measured),
        ])


def read_bench_csv(source: IO[str]) -> List[BenchResult]:
    reader = csv.DictReader(source)
    if tuple(reader.fieldnames or ()) != BENCH_HEADER:
        raise ValueError(f"unexpected header {reader.fieldnames}")
    out = []
    for row in reader:
        out.append(BenchResult(
            mode=row["mode"],
            batch_size=int(row["batch_size"]),
            median_epoch_seconds=(float(row["median_epoch_seconds"])
                                  if row["median_epoch_seconds"] else None),
            peak_memory_bytes=(int(row["peak_memory_bytes"])
                               if row["peak_memory_bytes"] else None),
            epochs_measured=int(row["epochs_measured"]),
        ))
    return out
