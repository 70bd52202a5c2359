"""Evaluation metrics, run records, aggregation and model selection.

All metrics are implemented directly from their definitions on integer
confusion counts or rank statistics, so they can be checked against
brute-force oracles. Run records use a fixed field vocabulary and a stable
JSONL encoding because downstream aggregation, reporting and resumable
sweeps all key on them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import UndefinedMetricError, ValidationError

METRIC_FIELDS = ("balanced_accuracy", "auc", "f1", "precision", "recall")

RUN_RECORD_KEYS = ("run_id", "config_hash", "seed", "epoch", "lr",
                   "balanced_accuracy", "auc", "precision", "recall", "f1")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fn: int
    tn: int
    fp: int

    @classmethod
    def from_predictions(cls, y_true: Sequence[int], y_pred: Sequence[int]) -> "ConfusionCounts":
        y_true = np.asarray(y_true)
        y_pred = np.asarray(y_pred)
        if y_true.shape != y_pred.shape:
            raise ValidationError(f"shape mismatch {y_true.shape} vs {y_pred.shape}")
        return cls(tp=int(np.sum((y_true == 1) & (y_pred == 1))),
                   fn=int(np.sum((y_true == 1) & (y_pred == 0))),
                   tn=int(np.sum((y_true == 0) & (y_pred == 0))),
                   fp=int(np.sum((y_true == 0) & (y_pred == 1))))

    @property
    def n(self) -> int:
        return self.tp + self.fn + self.tn + self.fp


def balanced_accuracy(counts: ConfusionCounts) -> float:
    """Mean of per-class recalls: 0.5 * (tp/(tp+fn) + tn/(tn+fp)).

    Undefined (raises) when either class is absent; a classifier that ignores
    the input scores 0.5 regardless of the label distribution.
    """
    pos = counts.tp + counts.fn
    neg = counts.tn + counts.fp
    if pos == 0 or neg == 0:
        raise UndefinedMetricError(f"balanced accuracy undefined: {pos} positives, {neg} negatives")
    return 0.5 * (counts.tp / pos + counts.tn / neg)


@dataclass(frozen=True)
class PrecisionRecallF1:
    precision: float
    recall: float
    f1: float
    precision_defined: bool = True
    recall_defined: bool = True


def precision_recall_f1(counts: ConfusionCounts) -> PrecisionRecallF1:
    """Precision, recall and their harmonic mean for the toxic class.

    Degenerate denominators (no predicted positives, no actual positives) are
    reported as 0.0 with the matching `*_defined` flag set to False rather
    than raised, so batch evaluation over early epochs never aborts.
    """
    pred_pos = counts.tp + counts.fp
    actual_pos = counts.tp + counts.fn
    precision_defined = pred_pos > 0
    recall_defined = actual_pos > 0
    precision = counts.tp / pred_pos if precision_defined else 0.0
    recall = counts.tp / actual_pos if recall_defined else 0.0
    f1 = (2 * precision * recall / (precision + recall)) if (precision + recall) > 0 else 0.0
    return PrecisionRecallF1(precision=precision, recall=recall, f1=f1,
                             precision_defined=precision_defined,
                             recall_defined=recall_defined)


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their group's average rank."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Probability that a random positive outscores a random negative,
    counting ties as half, computed via the rank-sum statistic."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValidationError(f"shape mismatch {scores.shape} vs {labels.shape}")
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(f"AUC undefined: {n_pos} positives, {n_neg} negatives")
    ranks = _average_ranks(scores)
    rank_sum = float(ranks[labels == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def pabak(labels_a: Sequence[int], labels_b: Sequence[int]) -> float:
    """Prevalence- and bias-adjusted kappa: 2 * observed_agreement - 1."""
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape or a.ndim != 1:
        raise ValidationError(f"pabak needs two equal-length 1-d label vectors")
    if a.size == 0:
        raise UndefinedMetricError("pabak undefined on empty input")
    return float(2.0 * np.mean(a == b) - 1.0)


def score_metrics(scores: Sequence[float], labels: Sequence[int],
                  threshold: float = 0.5) -> dict[str, float]:
    """All five report metrics from scores, thresholded at `threshold`."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pred = (scores > threshold).astype(int)
    counts = ConfusionCounts.from_predictions(labels, pred)
    prf = precision_recall_f1(counts)
    return {
        "balanced_accuracy": balanced_accuracy(counts),
        "auc": roc_auc(scores, labels),
        "precision": prf.precision,
        "recall": prf.recall,
        "f1": prf.f1,
    }


# --- run records and aggregation -------------------------------------------


@dataclass(frozen=True)
class RunMetrics:
    """One (run, epoch) evaluation row."""

    run_id: str
    config_hash: str
    seed: int
    epoch: int
    lr: float
    balanced_accuracy: float
    auc: float
    precision: float
    recall: float
    f1: float

    def to_record(self) -> dict:
        return {key: getattr(self, key) for key in RUN_RECORD_KEYS}

    @classmethod
    def from_record(cls, record: dict) -> "RunMetrics":
        missing = set(RUN_RECORD_KEYS) - set(record)
        if missing:
            raise ValidationError(f"run record missing keys {sorted(missing)}")
        return cls(**{key: record[key] for key in RUN_RECORD_KEYS})


def write_metrics_log(rows: Iterable[RunMetrics], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row.to_record()) + "\n")


def read_metrics_log(path: str | Path) -> list[RunMetrics]:
    rows = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rows.append(RunMetrics.from_record(json.loads(line)))
    return rows


@dataclass(frozen=True)
class AggregateRow:
    """Mean and population standard deviation per metric for one
    (config_hash, lr, epoch) group of runs."""

    config_hash: str
    lr: float
    epoch: int
    n_runs: int
    means: dict[str, float]
    stds: dict[str, float]


def aggregate_runs(rows: Sequence[RunMetrics]) -> list[AggregateRow]:
    """Group per-run rows by (config_hash, lr, epoch) and average them.

    Standard deviations are population (ddof=0) over the runs in the group.
    Output is sorted by the group key so aggregation is order-insensitive.
    """
    groups: dict[tuple[str, float, int], list[RunMetrics]] = {}
    for row in rows:
        groups.setdefault((row.config_hash, row.lr, row.epoch), []).append(row)
    out = []
    for (config_hash, lr, epoch) in sorted(groups):
        members = groups[(config_hash, lr, epoch)]
        seeds = [m.seed for m in members]
        if len(set(seeds)) != len(seeds):
            raise ValidationError(
                f"duplicate seeds {seeds} in group ({config_hash}, {lr}, {epoch})")
        means = {}
        stds = {}
        for metric in METRIC_FIELDS:
            values = np.array([getattr(m, metric) for m in members], dtype=np.float64)
            means[metric] = float(values.mean())
            stds[metric] = float(values.std(ddof=0))
        out.append(AggregateRow(config_hash=config_hash, lr=lr, epoch=epoch,
                                n_runs=len(members), means=means, stds=stds))
    return out


def select_best(rows: Sequence[AggregateRow]) -> AggregateRow:
    """Pick the (lr, epoch) cell with the best mean balanced accuracy.

    Ties break toward the earlier epoch, then the lower learning rate.
    Expects rows from a single experiment configuration.
    """
    if not rows:
        raise ValidationError("select_best called with no aggregate rows")
    hashes = {row.config_hash for row in rows}
    if len(hashes) > 1:
        raise ValidationError(f"select_best expects one config_hash, got {sorted(hashes)}")
    return min(rows, key=lambda r: (-r.means["balanced_accuracy"], r.epoch, r.lr))
