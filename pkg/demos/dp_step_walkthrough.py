# One DP-SGD step, by hand and then through dp_train_step.

import numpy as np

from dpge.data import PretrainData, build_vocab, make_pretrain_examples, synthetic_corpus
from dpge.model import PRETRAIN, per_sample_gradients
from dpge.optim import (AccumulatorState, DpSgdConfig, NoiseStream, OptimizerState,
                        PoissonSampler, clip_and_accumulate, dp_train_step, noisy_mean)
from dpge.params import ModelConfig, init_params
from dpge.telemetry import gradient_snr

corpus = synthetic_corpus(5000, seed=0)
vocab = build_vocab(corpus, 200)
cfg = ModelConfig(vocab_size=len(vocab), max_seq_len=32, num_layers=1, hidden_dim=32,
                  num_heads=2, ff_dim=64)
data = PretrainData(make_pretrain_examples(corpus, vocab, cfg.max_seq_len, seed=0))
params = init_params(cfg, seed=0)
print(f"{len(data)} examples, {len(params)} parameters")

# Per-example gradients are rows of a B x P matrix.
batch = data.batch(np.arange(16))
g = per_sample_gradients(params, batch, PRETRAIN)
norms = np.linalg.norm(g.rows, axis=1)
print("per-example norms:", np.round(norms, 3))

# Clip to C, accumulate shard by shard. The sum does not depend on the split.
C = 0.5
whole = clip_and_accumulate(AccumulatorState.empty(len(params), 16), g, C)
halves = AccumulatorState.empty(len(params), 16)
for rows in (g.rows[:5], g.rows[5:]):
    halves = clip_and_accumulate(halves, type(g)(rows), C)
print("split-invariant sum:", np.array_equal(whole.clipped_sum, halves.clipped_sum))

# Add noise once per logical batch and divide by B.
mean, noise = noisy_mean(whole, sigma=1.0, C=C, B=16, noise_stream=NoiseStream(7), step=1,
                         return_noise=True)
print(f"snr of this step: {gradient_snr(whole.clipped_sum, noise):.4f}")

# The same thing, end to end, with Poisson sampling and AdamW.
dp = DpSgdConfig(noise_multiplier=1.0, logical_batch_size=64, shard_size=16,
                 peak_lr=1e-3, total_steps=30, clip_norm=C)
sampler = PoissonSampler(len(data), 64 / len(data), seed=1)
opt, noise = OptimizerState.zeros(len(params)), NoiseStream(2)
for step in range(1, 31):
    params, opt, rep = dp_train_step(params, opt, dp, data, sampler, noise, step, PRETRAIN)
    if step % 5 == 0:
        print(f"step {step:2d} loss {rep.loss:.4f} lot {rep.batch_size:3d} snr {rep.snr:.3f}")
