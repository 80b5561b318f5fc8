"""Training metrics: gradient SNR, MLM/NSP accuracy, macro-F1 and CSV output."""

from __future__ import annotations

import csv
import io
import math
from fractions import Fraction
from dataclasses import dataclass, fields
from typing import IO, Iterable, List, Optional, Sequence

import numpy as np

METRICS_HEADER = ("step", "train_loss", "eval_loss", "mlm_acc", "nsp_acc", "snr",
                  "epsilon_spent", "lr", "batch_size")
SNR_HEADER = ("step", "snr", "batch_size", "lr")


class MetricError(ValueError):
    pass


@dataclass
class MetricsRecord:
    step: int
    train_loss: float
    lr: float
    batch_size: int
    eval_loss: Optional[float] = None
    mlm_acc: Optional[float] = None
    nsp_acc: Optional[float] = None
    snr: Optional[float] = None
    epsilon_spent: Optional[float] = None

    def __post_init__(self):
        for name in ("mlm_acc", "nsp_acc"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise MetricError(f"{name}={v} outside [0, 1]")


def _norm(x) -> float:
    # rescale first so squares neither overflow nor underflow
    x = np.asarray(x, dtype=np.float64)
    scale = float(np.max(np.abs(x), initial=0.0))
    if scale == 0.0 or not math.isfinite(scale):
        return scale
    return scale * float(np.linalg.norm(x / scale))


def gradient_snr(clipped_sum: np.ndarray, noise: np.ndarray) -> float:
    """||aggregated clipped gradient|| / ||realised noise||."""
    n = _norm(noise)
    if n == 0.0:
        raise MetricError("noise has zero norm; SNR is undefined (sigma = 0?)")
    return _norm(clipped_sum) / n


def expected_noise_norm(sigma: float, clip_norm: float, param_count: int) -> float:
    """sigma * C * sqrt(P), the noise-norm scale used by the 'expected' SNR variant."""
    return sigma * clip_norm * math.sqrt(param_count)


def _argmax_first(logits: np.ndarray) -> np.ndarray:
    # np.argmax already returns the first maximum
    return np.argmax(logits, axis=-1)


def mlm_accuracy(logits: np.ndarray, targets: np.ndarray) -> Optional[float]:
    """Argmax accuracy over positions whose target is not -1; None if there are none."""
    targets = np.asarray(targets)
    logits = np.asarray(logits)
    if logits.shape[:-1] != targets.shape:
        raise MetricError(f"logits {logits.shape} do not match targets {targets.shape}")
    sel = targets >= 0
    if not sel.any():
        return None
    return float((_argmax_first(logits)[sel] == targets[sel]).mean())


def nsp_accuracy(logits: np.ndarray, labels: np.ndarray) -> Optional[float]:
    labels = np.asarray(labels)
    if len(labels) == 0:
        return None
    if np.asarray(logits).shape[0] != labels.shape[0]:
        raise MetricError("logits and labels differ in length")
    return float((_argmax_first(np.asarray(logits)) == labels).mean())


def macro_f1(predictions: Sequence[int], labels: Sequence[int], num_classes: int) -> float:
    """Unweighted mean of per-class F1; a class with no support and no
    predictions scores 0."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if labels.size == 0:
        raise MetricError("macro_f1 of an empty input")
    if predictions.shape != labels.shape:
        raise MetricError("predictions and labels differ in shape")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise MetricError("label outside [0, num_classes)")
    # exact rational arithmetic, rounded once at the end
    total = Fraction(0)
    for c in range(num_classes):
        tp = int(np.sum((predictions == c) & (labels == c)))
        fp = int(np.sum((predictions == c) & (labels != c)))
        fn = int(np.sum((predictions != c) & (labels == c)))
        denom = 2 * tp + fp + fn
        if denom:
            total += Fraction(2 * tp, denom)
    return float(total / num_classes)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return format(float(value), ".9g")


def emit_metrics_csv(records: Iterable[MetricsRecord], sink: IO[str]) -> None:
    """Write the metrics CSV; rows are emitted in step order."""
    records = sorted(records, key=lambda r: r.step)
    writer = csv.writer(sink, lineterminator="\n")
    writer.writerow(METRICS_HEADER)
    for r in records:
        writer.writerow([_fmt(getattr(r, name)) for name in METRICS_HEADER])


def emit_snr_csv(records: Iterable[MetricsRecord], sink: IO[str]) -> None:
    writer = csv.writer(sink, lineterminator="\n")
    writer.writerow(SNR_HEADER)
    for r in sorted(records, key=lambda r: r.step):
        if r.snr is not None:
            writer.writerow([_fmt(r.step), _fmt(r.snr), _fmt(r.batch_size), _fmt(r.lr)])


def read_metrics_csv(source: IO[str]) -> List[MetricsRecord]:
    reader = csv.DictReader(source)
    if tuple(reader.fieldnames or ()) != METRICS_HEADER:
        raise MetricError(f"unexpected header {reader.fieldnames}")
    ints = {"step", "batch_size"}
    out = []
    for row in reader:
        kw = {}
        for f in fields(MetricsRecord):
            raw = row[f.name]
            if raw == "":
                kw[f.name] = None
            else:
                kw[f.name] = int(raw) if f.name in ints else float(raw)
        out.append(MetricsRecord(**kw))
    return out


def metrics_csv_text(records: Iterable[MetricsRecord]) -> str:
    buf = io.StringIO()
    emit_metrics_csv(records, buf)
    return buf.getvalue()
