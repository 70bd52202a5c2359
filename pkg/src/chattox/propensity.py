"""Player-level propensity scoring built on the message classifier.

A player's propensity is the fraction of their unlabeled messages the
classifier flags as toxic (hard decisions at a fixed threshold by default;
a mean-probability variant is available behind a flag). A one-parameter
threshold model over this scalar then predicts message labels for unseen
players: every message by a player whose propensity exceeds the threshold is
predicted toxic.

The protocol is proactive, so leakage rules are enforced mechanically:
messages that already carry labels are excluded from scoring, the threshold
is fitted on training players only, and evaluation refuses to run when test
players overlap the players whose messages trained the classifier or the
threshold.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .data import Match
from .errors import (ConfigError, CoverageError, DisjointnessError,
                     UndefinedMetricError, ValidationError)
from .metrics import ConfusionCounts, balanced_accuracy
from .training import Checkpoint, predict_batch

logger = logging.getLogger(__name__)

PROPENSITY_KEYS = ("player_key", "period_id", "n_scored_messages", "propensity")

ScoreFn = Callable[[Sequence], np.ndarray]


@dataclass(frozen=True)
class PropensityRecord:
    """One player's score within one period."""

    player_key: str
    period_id: str | None
    n_scored_messages: int
    propensity: float

    def to_record(self) -> dict:
        return {key: getattr(self, key) for key in PROPENSITY_KEYS}

    @classmethod
    def from_record(cls, record: dict) -> "PropensityRecord":
        missing = set(PROPENSITY_KEYS) - set(record)
        if missing:
            raise ValidationError(f"propensity record missing keys {sorted(missing)}")
        return cls(**{key: record[key] for key in PROPENSITY_KEYS})


def write_propensity_table(records: Iterable[PropensityRecord], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_record()) + "\n")


def read_propensity_table(path: str | Path) -> list[PropensityRecord]:
    out = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(PropensityRecord.from_record(json.loads(line)))
    return out


def player_keys_of(matches: Iterable[Match], labeled_only: bool = False) -> set[str]:
    """All player_key values appearing as senders; raises if any are missing."""
    keys: set[str] = set()
    for match in matches:
        for msg in match.messages:
            if labeled_only and msg.label is None:
                continue
            if msg.player_key is None:
                raise ValidationError(
                    f"match {match.match_id!r} message {msg.index} has no player_key")
            keys.add(msg.player_key)
    return keys


def score_players(checkpoint: Checkpoint, matches: Sequence[Match],
                  assembler: Callable[[Match, int], object],
                  period_id: str | None = None, decision_threshold: float = 0.5,
                  use_hard_labels: bool = True) -> list[PropensityRecord]:
    """Score every sender's propensity over their unlabeled messages.

    `assembler(match, index)` builds the classifier input for one message,
    encapsulating context level, separator scheme and token budget. Messages
    that already carry a label are excluded from scoring (they belong to the
    supervised side of the protocol). Players whose messages are all labeled
    get no record.
    """
    per_player: dict[str, list[float]] = {}
    inputs = []
    owners = []
    for match in matches:
        if period_id is not None and match.period_id != period_id:
            continue
        for msg in match.messages:
            if msg.label is not None:
                continue
            if msg.player_key is None:
                raise ValidationError(
                    f"match {match.match_id!r} message {msg.index} has no player_key")
            inputs.append(assembler(match, msg.index))
            owners.append(msg.player_key)
    if inputs:
        scores = predict_batch(checkpoint, inputs)
        for key, score in zip(owners, scores):
            per_player.setdefault(key, []).append(float(score))

    records = []
    for key in sorted(per_player):
        scores = np.array(per_player[key], dtype=np.float64)
        if use_hard_labels:
            propensity = float(np.mean(scores > decision_threshold))
        else:
            propensity = float(np.mean(scores))
        records.append(PropensityRecord(player_key=key, period_id=period_id,
                                        n_scored_messages=len(scores),
                                        propensity=propensity))
    return records


@dataclass(frozen=True)
class ThresholdModel:
    """Predict 'every message toxic' for players above a propensity cut."""

    threshold: float
    fitted_on: frozenset[str]
    training_balanced_accuracy: float
    degenerate: bool = False

    def predict_player(self, propensity: float) -> int:
        return int(propensity > self.threshold)


def fit_threshold(records: Sequence[tuple[PropensityRecord, Sequence[int]]]) -> ThresholdModel:
    """Fit the propensity cut maximizing balanced accuracy on training players.

    Each element pairs a player's propensity record with the labels of that
    player's labeled messages. Candidate cuts are midpoints between adjacent
    distinct propensity values (plus the two outer extremes); message-level
    balanced accuracy decides. With single-class labels the model is flagged
    degenerate and the threshold set so every player lands on that class.
    """
    if not records:
        raise ConfigError("no players to fit the threshold on")
    props = np.array([rec.propensity for rec, _ in records], dtype=np.float64)
    labels = [np.asarray(lab, dtype=np.int64) for _, lab in records]
    if any(arr.size == 0 for arr in labels):
        raise ValidationError("every training player needs at least one labeled message")
    fitted_on = frozenset(rec.player_key for rec, _ in records)

    all_labels = np.concatenate(labels)
    if np.all(all_labels == all_labels[0]):
        # single-class training labels: no cut is informative
        threshold = float(props.min()) - 1.0 if all_labels[0] == 1 else float(props.max()) + 1.0
        return ThresholdModel(threshold=threshold, fitted_on=fitted_on,
                              training_balanced_accuracy=0.5, degenerate=True)

    distinct = np.unique(props)
    candidates = [float(distinct[0]) - 1.0]
    candidates += [float(0.5 * (a + b)) for a, b in zip(distinct[:-1], distinct[1:])]
    candidates += [float(distinct[-1]) + 1.0]

    best = None
    for cut in candidates:
        pred_rows = [np.full(arr.size, int(p > cut), dtype=np.int64)
                     for p, arr in zip(props, labels)]
        counts = ConfusionCounts.from_predictions(all_labels, np.concatenate(pred_rows))
        ba = balanced_accuracy(counts)
        if best is None or ba > best[0] + 1e-12:
            best = (ba, cut)
    assert best is not None
    return ThresholdModel(threshold=best[1], fitted_on=fitted_on,
                          training_balanced_accuracy=best[0])


@dataclass(frozen=True)
class PropensityEvaluation:
    counts: ConfusionCounts
    balanced_accuracy: float
    n_players: int


def evaluate_propensity(model: ThresholdModel, test_matches: Sequence[Match],
                        records: Mapping[str, PropensityRecord] | Sequence[PropensityRecord],
                        classifier_train_players: Iterable[str]) -> PropensityEvaluation:
    """Message-level evaluation of the threshold model on test players.

    Every labeled test message is predicted solely from its sender's
    propensity. Hard preconditions: each test sender must have a propensity
    record, and the test player set must be disjoint from both the players
    whose messages trained the classifier and the players the threshold was
    fitted on.
    """
    if not isinstance(records, Mapping):
        records = {rec.player_key: rec for rec in records}
    test_players = player_keys_of(test_matches, labeled_only=True)

    train_overlap = test_players & set(classifier_train_players)
    if train_overlap:
        raise DisjointnessError(
            f"test players overlap classifier training players: {sorted(train_overlap)[:5]}")
    fit_overlap = test_players & model.fitted_on
    if fit_overlap:
        raise DisjointnessError(
            f"test players overlap threshold-fitting players: {sorted(fit_overlap)[:5]}")
    missing = test_players - set(records)
    if missing:
        raise CoverageError(f"no propensity record for test players {sorted(missing)[:5]} "
                            f"({len(missing)} total)")

    y_true = []
    y_pred = []
    for match in test_matches:
        for msg in match.messages:
            if msg.label is None:
                continue
            y_true.append(msg.label)
            y_pred.append(model.predict_player(records[msg.player_key].propensity))
    if not y_true:
        raise UndefinedMetricError("no labeled messages in the test matches")
    counts = ConfusionCounts.from_predictions(y_true, y_pred)
    return PropensityEvaluation(counts=counts, balanced_accuracy=balanced_accuracy(counts),
                                n_players=len(test_players))
