import io
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from dpge.telemetry import (METRICS_HEADER, MetricError, MetricsRecord, emit_metrics_csv,
                            emit_snr_csv, expected_noise_norm, gradient_snr, macro_f1,
                            metrics_csv_text, mlm_accuracy, nsp_accuracy, read_metrics_csv)
from oracles import macro_f1_bruteforce


# -- SNR -----------------------------------------------------------------------------

def test_snr_examples():
    assert gradient_snr(np.array([3.0, 4.0]), np.array([0.0, 0.5])) == 10.0
    assert gradient_snr(np.zeros(3), np.ones(3)) == 0.0
    with pytest.raises(MetricError):
        gradient_snr(np.ones(2), np.zeros(2))


def test_expected_noise_norm():
    assert expected_noise_norm(0.5, 2.0, 100) == 10.0


vec = arrays(np.float64, 8, elements=st.floats(-100, 100))


@given(vec, vec, st.floats(0, 1e3))
def test_snr_scales_linearly(s, n, k):
    if np.linalg.norm(n) < 1e-6:
        return
    assert gradient_snr(k * s, n) == pytest.approx(k * gradient_snr(s, n), rel=1e-12, abs=1e-300)


@given(vec, vec, st.integers(0, 2 ** 31))
def test_snr_rotation_invariant(s, n, seed):
    if np.linalg.norm(n) < 1e-6:
        return
    q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((8, 8)))
    assert gradient_snr(q @ s, q @ n) == pytest.approx(gradient_snr(s, n), rel=1e-10, abs=1e-12)


# -- accuracies -------------------------------------------------------------------------

def test_mlm_accuracy_examples():
    logits = np.zeros((1, 4, 3))
    targets = np.array([[0, 1, 2, 1]])
    for i, t in enumerate(targets[0]):
        logits[0, i, t] = 1.0
    assert mlm_accuracy(logits, targets) == 1.0
    assert mlm_accuracy(logits, (targets + 1) % 3) == 0.0
    wrong = logits.copy()
    wrong[0, 3] = [0, 0, 1]
    assert mlm_accuracy(wrong, targets) == 0.75


def test_mlm_accuracy_ignores_unmasked_and_handles_empty():
    logits = np.zeros((2, 2, 3))
    assert mlm_accuracy(logits, np.full((2, 2), -1)) is None
    # ties resolve to index 0
    assert mlm_accuracy(logits, np.array([[0, -1], [-1, 2]])) == 0.5


def test_nsp_accuracy():
    logits = np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]])
    assert nsp_accuracy(logits, np.array([0, 1, 0])) == 1.0
    assert nsp_accuracy(logits, np.array([1, 0, 1])) == 0.0
    assert nsp_accuracy(np.zeros((0, 2)), np.array([])) is None


def test_record_validates_accuracy_range():
    with pytest.raises(MetricError):
        MetricsRecord(step=1, train_loss=1.0, lr=0.1, batch_size=4, mlm_acc=1.5)


# -- macro-F1 ----------------------------------------------------------------------------

def test_macro_f1_examples():
    assert macro_f1([0, 1, 1, 0], [0, 1, 1, 0], 2) == 1.0
    assert macro_f1([1, 1, 1, 1], [0, 0, 1, 1], 2) == pytest.approx(1 / 3, abs=1e-16)
    # class 2 absent everywhere contributes 0
    assert macro_f1([0, 1], [0, 1], 3) == pytest.approx(2 / 3)
    with pytest.raises(MetricError):
        macro_f1([], [], 2)
    with pytest.raises(MetricError):
        macro_f1([0], [2], 2)


@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=40),
       st.permutations(range(4)))
def test_macro_f1_permutation_symmetry_and_oracle(pairs, perm):
    pred, lab = map(list, zip(*pairs))
    base = macro_f1(pred, lab, 4)
    assert base == macro_f1_bruteforce(pred, lab, 4)
    assert macro_f1([perm[p] for p in pred], [perm[t] for t in lab], 4) == base
    assert 0.0 <= base <= 1.0


# -- CSV -----------------------------------------------------------------------------------

def _records():
    return [
        MetricsRecord(step=0, train_loss=None, lr=0.0, batch_size=0, eval_loss=6.1234567891,
                      mlm_acc=0.01, nsp_acc=0.5, epsilon_spent=0.0225),
        MetricsRecord(step=2, train_loss=5.5, lr=1e-4, batch_size=250, snr=0.123456789123,
                      epsilon_spent=0.5),
        MetricsRecord(step=1, train_loss=5.9, lr=4e-5, batch_size=262, snr=0.2,
                      epsilon_spent=0.3),
    ]


def test_empty_csv_is_header_only():
    assert metrics_csv_text([]) == ",".join(METRICS_HEADER) + "\n"
    buf = io.StringIO()
    emit_snr_csv([], buf)
    assert buf.getvalue() == "step,snr,batch_size,lr\n"


def test_csv_rows_sorted_and_formatted():
    text = metrics_csv_text(_records())
    lines = text.split("\n")
    assert lines[0] == "step,train_loss,eval_loss,mlm_acc,nsp_acc,snr,epsilon_spent,lr,batch_size"
    assert [l.split(",")[0] for l in lines[1:4]] == ["0", "1", "2"]
    assert lines[1] == "0,,6.12345679,0.01,0.5,,0.0225,0,0"
    assert text.endswith("\n") and "\r" not in text


def test_csv_round_trip_at_nine_digits():
    recs = read_metrics_csv(io.StringIO(metrics_csv_text(_records())))
    assert [r.step for r in recs] == [0, 1, 2]
    assert recs[0].train_loss is None and recs[0].snr is None
    assert recs[2].snr == float(format(0.123456789123, ".9g"))
    assert metrics_csv_text(recs) == metrics_csv_text(_records())


def test_snr_csv_skips_missing():
    buf = io.StringIO()
    emit_snr_csv(_records(), buf)
    assert buf.getvalue().splitlines() == ["step,snr,batch_size,lr", "1,0.2,262,4e-05",
                                           "2,0.123456789,250,0.0001"]


def test_read_rejects_wrong_header():
    with pytest.raises(MetricError):
        read_metrics_csv(io.StringIO("a,b\n1,2\n"))
