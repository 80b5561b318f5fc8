# How much does vectorizing per-sample gradients buy?
#
# All three modes compute the same update bit for bit, so only time differs.

import io

from dpge.bench import emit_bench_csv, run_sweep
from dpge.params import ModelConfig

cfg = ModelConfig(vocab_size=256, max_seq_len=32, num_layers=1, hidden_dim=32,
                  num_heads=2, ff_dim=64)
results = run_sweep(["naive_loop", "vectorized", "sharded"], [1, 8, 32],
                    epochs=3, model_config=cfg, dataset_size=64)

buf = io.StringIO()
emit_bench_csv(results, buf)
print(buf.getvalue())

by = {(r.mode, r.batch_size): r.median_epoch_seconds for r in results}
for b in (1, 8, 32):
    print(f"B={b:2d}  naive/vectorized = {by['naive_loop', b] / by['vectorized', b]:.2f}x")
