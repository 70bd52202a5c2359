"""Metric correctness against brute-force reference implementations.

The reference versions below recompute everything from first principles
(pair enumeration for AUC, raw confusion counts for the rest) so the
library implementations are checked against independent code, not
against themselves.
"""


import numpy as np
import pytest

from chattox.errors import UndefinedMetricError, ValidationError
from chattox.metrics import (
    AggregateRow,
    ConfusionCounts,
    RunMetrics,
    aggregate_runs,
    balanced_accuracy,
    pabak,
    precision_recall_f1,
    read_metrics_log,
    roc_auc,
    score_metrics,
    select_best,
    write_metrics_log,
)


# --- reference implementations ---

def ref_balanced_accuracy(labels, preds):
    tp = sum(1 for y, p in zip(labels, preds) if y == 1 and p == 1)
    fn = sum(1 for y, p in zip(labels, preds) if y == 1 and p == 0)
    tn = sum(1 for y, p in zip(labels, preds) if y == 0 and p == 0)
    fp = sum(1 for y, p in zip(labels, preds) if y == 0 and p == 1)
    return (tp / (tp + fn) + tn / (tn + fp)) / 2


def ref_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


def ref_pabak(a, b):
    agree = sum(1 for x, y in zip(a, b) if x == y) / len(a)
    return 2.0 * agree - 1.0


def ref_prf(labels, preds):
    tp = sum(1 for y, p in zip(labels, preds) if y == 1 and p == 1)
    fn = sum(1 for y, p in zip(labels, preds) if y == 1 and p == 0)
    fp = sum(1 for y, p in zip(labels, preds) if y == 0 and p == 1)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = (2 * precision * recall / (precision + recall)
          if precision + recall else 0.0)
    return precision, recall, f1


def counts_of(labels, preds):
    return ConfusionCounts.from_predictions(np.asarray(labels), np.asarray(preds))


# --- frozen hand-computed values ---

def test_balanced_accuracy_frozen():
    # tp=3 fn=1 tn=8 fp=2: sensitivity 0.75, specificity 0.8
    c = ConfusionCounts(tp=3, fn=1, tn=8, fp=2)
    assert balanced_accuracy(c) == pytest.approx(0.775, abs=1e-15)


def test_auc_frozen():
    scores = [0.1, 0.4, 0.35, 0.8]
    labels = [0, 0, 1, 1]
    assert roc_auc(scores, labels) == pytest.approx(0.75, abs=1e-15)


def test_auc_all_ties_is_half():
    assert roc_auc([0.3, 0.3, 0.3, 0.3], [0, 1, 0, 1]) == pytest.approx(0.5)


def test_pabak_frozen():
    a = [0, 1, 0, 1, 0, 1, 0, 1, 0, 1]
    b = [0, 1, 0, 1, 0, 1, 0, 1, 1, 0]  # 8 of 10 agree
    assert pabak(a, b) == pytest.approx(0.6, abs=1e-15)


def test_pabak_perfect_and_inverse():
    assert pabak([0, 1, 1], [0, 1, 1]) == 1.0
    assert pabak([0, 1, 1], [1, 0, 0]) == -1.0


# --- randomized equivalence with the references ---

def test_metrics_match_bruteforce_random():
    rng = np.random.default_rng(7)
    for _ in range(400):
        n = int(rng.integers(2, 30))
        labels = rng.integers(0, 2, n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        preds = rng.integers(0, 2, n)
        c = counts_of(labels, preds)
        assert abs(balanced_accuracy(c) - ref_balanced_accuracy(labels, preds)) <= 1e-12
        got = precision_recall_f1(c)
        want = ref_prf(labels, preds)
        assert abs(got.precision - want[0]) <= 1e-12
        assert abs(got.recall - want[1]) <= 1e-12
        assert abs(got.f1 - want[2]) <= 1e-12
        assert abs(pabak(labels, preds) - ref_pabak(labels, preds)) <= 1e-12


def test_auc_matches_pair_enumeration_random():
    rng = np.random.default_rng(11)
    for _ in range(400):
        n = int(rng.integers(2, 30))
        labels = rng.integers(0, 2, n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        # quantized scores so ties actually occur
        scores = np.round(rng.random(n), 1)
        assert abs(roc_auc(scores, labels) - ref_auc(scores, labels)) <= 1e-12


def test_constant_predictor_chance_level():
    # a predictor that always answers the same class scores exactly 0.5
    rng = np.random.default_rng(3)
    for _ in range(100):
        n = int(rng.integers(5, 200))
        p_pos = float(rng.uniform(0.05, 0.95))
        labels = (rng.random(n) < p_pos).astype(int)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        for const in (0, 1):
            preds = np.full(n, const)
            assert balanced_accuracy(counts_of(labels, preds)) == 0.5


# --- degenerate inputs ---

def test_balanced_accuracy_requires_both_classes():
    with pytest.raises(UndefinedMetricError):
        balanced_accuracy(ConfusionCounts(tp=3, fn=1, tn=0, fp=0))
    with pytest.raises(UndefinedMetricError):
        balanced_accuracy(ConfusionCounts(tp=0, fn=0, tn=5, fp=1))


def test_prf_degenerate_flags_instead_of_raising():
    # no predicted positives: precision undefined, reported as 0.0 + flag
    got = precision_recall_f1(ConfusionCounts(tp=0, fn=2, tn=5, fp=0))
    assert got.precision == 0.0 and not got.precision_defined
    assert got.recall == 0.0 and got.recall_defined
    assert got.f1 == 0.0


def test_auc_requires_both_classes():
    with pytest.raises(UndefinedMetricError):
        roc_auc([0.2, 0.4], [1, 1])


def test_pabak_empty_raises():
    with pytest.raises(UndefinedMetricError):
        pabak([], [])


def test_score_metrics_threshold_is_strictly_greater():
    scores = [0.5, 0.6, 0.4, 0.7]
    labels = [0, 1, 0, 1]
    out = score_metrics(scores, labels, threshold=0.5)
    # 0.5 is NOT above the threshold, so the first message is predicted benign
    assert out["balanced_accuracy"] == 1.0
    assert set(out) == {"balanced_accuracy", "auc", "f1", "precision", "recall"}


# --- run logs and aggregation ---

def _row(seed, epoch, lr, ba, config_hash="abc", run_id=None):
    return RunMetrics(run_id=run_id or f"r{seed}", config_hash=config_hash,
                      seed=seed, epoch=epoch, lr=lr,
                      balanced_accuracy=ba, auc=0.9, precision=0.5,
                      recall=0.5, f1=0.5)


def test_metrics_log_roundtrip(tmp_path):
    rows = [_row(0, 0, 1e-3, 0.7), _row(1, 0, 1e-3, 0.8)]
    path = tmp_path / "metrics.jsonl"
    write_metrics_log(rows, path)
    assert read_metrics_log(path) == rows


def test_aggregate_population_std():
    rows = [_row(0, 0, 1e-3, 0.7), _row(1, 0, 1e-3, 0.8), _row(2, 0, 1e-3, 0.9)]
    agg = aggregate_runs(rows)
    assert len(agg) == 1
    a = agg[0]
    assert a.n_runs == 3
    assert a.means["balanced_accuracy"] == pytest.approx(0.8)
    # population std (divide by n, not n-1)
    assert a.stds["balanced_accuracy"] == pytest.approx(np.std([0.7, 0.8, 0.9]), abs=1e-15)
    assert a.stds["auc"] == 0.0


def test_aggregate_rejects_duplicate_seed_in_group():
    rows = [_row(0, 0, 1e-3, 0.7), _row(0, 0, 1e-3, 0.8)]
    with pytest.raises(ValidationError):
        aggregate_runs(rows)


def test_aggregate_groups_by_lr_and_epoch():
    rows = [_row(0, 0, 1e-3, 0.7), _row(0, 1, 1e-3, 0.75), _row(0, 0, 1e-4, 0.6)]
    agg = aggregate_runs(rows)
    assert len(agg) == 3
    keys = {(a.lr, a.epoch) for a in agg}
    assert keys == {(1e-3, 0), (1e-3, 1), (1e-4, 0)}


def _agg(lr, epoch, ba, config_hash="abc"):
    means = {"balanced_accuracy": ba, "auc": 0.9, "f1": 0.5,
             "precision": 0.5, "recall": 0.5}
    stds = {k: 0.0 for k in means}
    return AggregateRow(config_hash=config_hash, lr=lr, epoch=epoch, n_runs=3,
                        means=means, stds=stds)


def test_select_best_argmax():
    rows = [_agg(1e-3, 0, 0.70), _agg(1e-3, 1, 0.82), _agg(1e-4, 1, 0.78)]
    best = select_best(rows)
    assert (best.lr, best.epoch) == (1e-3, 1)


def test_select_best_tie_prefers_earlier_epoch_then_lower_lr():
    rows = [_agg(1e-3, 2, 0.8), _agg(1e-3, 1, 0.8), _agg(1e-4, 1, 0.8)]
    best = select_best(rows)
    # same mean everywhere: earliest epoch wins, then the smaller LR
    assert (best.lr, best.epoch) == (1e-4, 1)


def test_select_best_rejects_mixed_configs():
    rows = [_agg(1e-3, 0, 0.7, config_hash="aaa"), _agg(1e-3, 0, 0.8, config_hash="bbb")]
    with pytest.raises(ValidationError):
        select_best(rows)


def test_select_best_empty_raises():
    with pytest.raises(ValidationError):
        select_best([])
