import io

import numpy as np
import pytest

from dpge.bench import (BENCH_HEADER, MODES, BenchResult, emit_bench_csv, read_bench_csv,
                        run_bench, run_sweep)
from dpge.params import ModelConfig

TINY = ModelConfig(vocab_size=40, max_seq_len=12, num_layers=1, hidden_dim=8, num_heads=2,
                   ff_dim=16)


def test_modes_agree_bit_for_bit():
    res = {m: run_bench(m, 8, epochs=2, model_config=TINY, dataset_size=24) for m in MODES}
    ref = res["naive_loop"].final_params.values
    for m in MODES:
        assert res[m].final_params.values.tobytes() == ref.tobytes()
        assert res[m].epochs_measured == 2 and len(res[m].epoch_seconds) == 2
        assert res[m].median_epoch_seconds > 0 and not res[m].failed


def test_batch_of_one_modes_agree():
    res = [run_bench(m, 1, epochs=1, model_config=TINY, dataset_size=6) for m in MODES]
    assert all(np.array_equal(r.final_params.values, res[0].final_params.values) for r in res)


def test_memory_measurement_is_optional():
    r = run_bench("vectorized", 4, epochs=1, model_config=TINY, dataset_size=8)
    assert r.peak_memory_bytes is None
    r = run_bench("vectorized", 4, epochs=1, model_config=TINY, dataset_size=8,
                  measure_memory=True)
    assert r.peak_memory_bytes > 0


def test_bad_arguments():
    with pytest.raises(ValueError):
        run_bench("vectorized", 10, epochs=1, model_config=TINY, dataset_size=8)
    with pytest.raises(ValueError):
        run_bench("jit", 1, epochs=1, model_config=TINY, dataset_size=8)


def test_sweep_covers_grid():
    res = run_sweep(["sharded", "vectorized"], [2, 4], epochs=1, model_config=TINY,
                    dataset_size=8)
    assert [(r.mode, r.batch_size) for r in res] == [("sharded", 2), ("sharded", 4),
                                                    ("vectorized", 2), ("vectorized", 4)]


def test_csv_empty_sorted_and_round_trip():
    buf = io.StringIO()
    emit_bench_csv([], buf)
    assert buf.getvalue() == ",".join(BENCH_HEADER) + "\n"
    rows = [BenchResult("vectorized", 8, 0.25, None, 20),
            BenchResult("naive_loop", 32, 1.0 / 3, 1234, 20),
            BenchResult("naive_loop", 8, None, None, 0, error="MemoryError")]
    buf = io.StringIO()
    emit_bench_csv(rows, buf)
    lines = buf.getvalue().splitlines()
    assert lines[1:] == ["naive_loop,8,,,0", "naive_loop,32,0.333333333,1234,20",
                         "vectorized,8,0.25,,20"]
    back = read_bench_csv(io.StringIO(buf.getvalue()))
    again = io.StringIO()
    emit_bench_csv(back, again)
    assert again.getvalue() == buf.getvalue()


def test_vectorized_cost_per_example_does_not_grow_with_batch():
    per_ex = []
    for b in (1, 8, 32):
        r = run_bench("vectorized", b, epochs=5, model_config=TINY, dataset_size=128)
        per_ex.append(r.median_epoch_seconds / 128)
    for small, big in zip(per_ex, per_ex[1:]):
        assert big <= small * 1.2
