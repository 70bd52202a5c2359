"""Canonical chat-corpus model: messages, matches, splits, statistics.

The interchange format is one JSON object per line, one match per object,
with bit-exact field names (`MATCH_KEYS`, `MESSAGE_KEYS`). Importers
normalize external dumps into this shape and the synthetic generator emits
it directly, so everything downstream reads a single format.
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, CorpusFormatError, SizingError, ValidationError

GAMES = ("dota2", "mwiii", "synthetic")

MATCH_KEYS = ("match_id", "game", "period_id", "messages")
MESSAGE_KEYS = ("index", "time_s", "player", "team", "text", "label",
                "context_dependent", "player_key")


@dataclass(frozen=True)
class ChatMessage:
    """One chat line within a match.

    `label` is 1 (toxic), 0 (non-toxic) or None (unlabeled).
    `context_dependent` is only meaningful for toxic messages: it records
    whether the toxicity is visible from the text alone (False) or only
    together with the surrounding conversation (True).
    `player_key` is an optional pseudonymous cross-match player identity;
    per-match slot numbers live in `player` / `team`.
    """

    index: int
    player: int
    team: int
    text: str
    time_s: float | None = None
    label: int | None = None
    context_dependent: bool | None = None
    player_key: str | None = None

    def words(self) -> list[str]:
        return self.text.split()


@dataclass(frozen=True)
class Match:
    """A full match transcript, messages sorted by their in-match index."""

    match_id: str
    game: str
    messages: tuple[ChatMessage, ...]
    period_id: str | None = None

    @property
    def labeled(self) -> bool:
        return all(m.label is not None for m in self.messages)

    @property
    def players(self) -> tuple[tuple[int, int], ...]:
        """Distinct (team, player) pairs in first-appearance order."""
        seen: dict[tuple[int, int], None] = {}
        for m in self.messages:
            seen.setdefault((m.team, m.player), None)
        return tuple(seen)


@dataclass(frozen=True)
class DatasetSplit:
    """Match-level train/test partition, stored as match id tuples."""

    train_matches: tuple[str, ...]
    test_matches: tuple[str, ...]
    seed: int

    def split_hash(self) -> str:
        payload = json.dumps(
            {"train": list(self.train_matches), "test": list(self.test_matches)},
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:12]


@dataclass(frozen=True)
class CorpusStats:
    """Corpus-level counts; rates are None when no labels exist to define them."""

    n_matches: int
    n_messages: int
    n_words: int
    n_labeled: int
    n_toxic: int
    toxicity_rate: float | None
    context_dependent_fraction: float | None


def _require_int(value, name: str, line: int | None) -> int:
    # bool is an int subclass; reject it explicitly
    if isinstance(value, bool) or not isinstance(value, int):
        raise CorpusFormatError(f"field '{name}' must be an integer, got {value!r}", line)
    return value


def _message_from_record(rec: dict, line: int | None) -> ChatMessage:
    if not isinstance(rec, dict):
        raise CorpusFormatError(f"message record must be an object, got {type(rec).__name__}", line)
    unknown = set(rec) - set(MESSAGE_KEYS)
    if unknown:
        raise CorpusFormatError(f"unknown message keys {sorted(unknown)}", line)
    for key in ("index", "player", "team", "text"):
        if key not in rec:
            raise CorpusFormatError(f"message missing required key '{key}'", line)

    index = _require_int(rec["index"], "index", line)
    player = _require_int(rec["player"], "player", line)
    team = _require_int(rec["team"], "team", line)
    text = rec["text"]
    if not isinstance(text, str):
        raise CorpusFormatError(f"field 'text' must be a string, got {text!r}", line)

    time_s = rec.get("time_s")
    if time_s is not None:
        if isinstance(time_s, bool) or not isinstance(time_s, (int, float)):
            raise CorpusFormatError(f"field 'time_s' must be a number or null, got {time_s!r}", line)
        time_s = float(time_s)

    label = rec.get("label")
    if label is not None:
        label = _require_int(label, "label", line)
        if label not in (0, 1):
            raise CorpusFormatError(f"field 'label' must be 0, 1 or null, got {label!r}", line)

    context_dependent = rec.get("context_dependent")
    if context_dependent is not None and not isinstance(context_dependent, bool):
        raise CorpusFormatError(
            f"field 'context_dependent' must be a boolean or null, got {context_dependent!r}", line)

    player_key = rec.get("player_key")
    if player_key is not None and not isinstance(player_key, str):
        raise CorpusFormatError(f"field 'player_key' must be a string or null, got {player_key!r}", line)

    return ChatMessage(index=index, player=player, team=team, text=text,
                       time_s=time_s, label=label,
                       context_dependent=context_dependent, player_key=player_key)


def validate_match(match: Match, line: int | None = None) -> None:
    """Check all per-match invariants; raise ValidationError on the first breach."""

    def fail(msg: str) -> None:
        prefix = f"line {line}: " if line is not None else ""
        raise ValidationError(f"{prefix}match {match.match_id!r}: {msg}")

    if not match.match_id:
        fail("empty match_id")
    if match.game not in GAMES:
        fail(f"unknown game {match.game!r}, expected one of {GAMES}")
    if not match.messages:
        fail("match has no messages")

    indices = [m.index for m in match.messages]
    if indices != sorted(indices):
        fail("message indices not sorted")
    if len(set(indices)) != len(indices):
        fail(f"duplicate message indices {sorted({i for i in indices if indices.count(i) > 1})}")
    if indices != list(range(len(indices))):
        fail(f"non-contiguous indices {indices}")

    team_of: dict[int, int] = {}
    key_of: dict[int, str | None] = {}
    player_of_key: dict[str, int] = {}
    for m in match.messages:
        if not m.text.strip():
            fail(f"message {m.index} has empty text")
        if m.context_dependent is True and m.label != 1:
            fail(f"message {m.index} marked context_dependent without label 1")
        if m.player in team_of and team_of[m.player] != m.team:
            fail(f"player {m.player} appears on teams {team_of[m.player]} and {m.team}")
        team_of[m.player] = m.team
        if m.player in key_of and key_of[m.player] != m.player_key:
            fail(f"player {m.player} has conflicting player_key values")
        key_of[m.player] = m.player_key
        if m.player_key is not None:
            if m.player_key in player_of_key and player_of_key[m.player_key] != m.player:
                fail(f"player_key {m.player_key!r} shared by multiple player slots")
            player_of_key[m.player_key] = m.player


def parse_matches(lines: Iterable[str | bytes]) -> list[Match]:
    """Parse a one-match-per-line JSON stream into validated matches.

    Raises CorpusFormatError (carrying the 1-based line number) for malformed
    records and ValidationError for invariant breaches such as duplicate
    match ids or non-contiguous message indices.
    """
    matches: list[Match] = []
    seen_ids: set[str] = set()
    for line_no, raw in enumerate(lines, start=1):
        if isinstance(raw, bytes):
            raw = raw.decode("utf-8")
        if not raw.strip():
            continue
        try:
            rec = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise CorpusFormatError(f"invalid JSON: {exc.msg}", line_no) from exc
        if not isinstance(rec, dict):
            raise CorpusFormatError(f"match record must be an object, got {type(rec).__name__}", line_no)
        unknown = set(rec) - set(MATCH_KEYS)
        if unknown:
            raise CorpusFormatError(f"unknown match keys {sorted(unknown)}", line_no)
        for key in ("match_id", "game", "messages"):
            if key not in rec:
                raise CorpusFormatError(f"match missing required key '{key}'", line_no)
        match_id = rec["match_id"]
        if not isinstance(match_id, str):
            raise CorpusFormatError(f"field 'match_id' must be a string, got {match_id!r}", line_no)
        game = rec["game"]
        if not isinstance(game, str):
            raise CorpusFormatError(f"field 'game' must be a string, got {game!r}", line_no)
        period_id = rec.get("period_id")
        if period_id is not None and not isinstance(period_id, str):
            raise CorpusFormatError(f"field 'period_id' must be a string or null, got {period_id!r}", line_no)
        raw_msgs = rec["messages"]
        if not isinstance(raw_msgs, list):
            raise CorpusFormatError("field 'messages' must be an array", line_no)

        messages = sorted((_message_from_record(m, line_no) for m in raw_msgs),
                          key=lambda m: m.index)
        match = Match(match_id=match_id, game=game, messages=tuple(messages),
                      period_id=period_id)
        if match.match_id in seen_ids:
            raise ValidationError(f"line {line_no}: duplicate match_id {match.match_id!r}")
        validate_match(match, line=line_no)
        seen_ids.add(match.match_id)
        matches.append(match)
    return matches


def match_to_record(match: Match) -> dict:
    """Serialize one match to a plain dict with the canonical key set."""
    return {
        "match_id": match.match_id,
        "game": match.game,
        "period_id": match.period_id,
        "messages": [
            {
                "index": m.index,
                "time_s": m.time_s,
                "player": m.player,
                "team": m.team,
                "text": m.text,
                "label": m.label,
                "context_dependent": m.context_dependent,
                "player_key": m.player_key,
            }
            for m in match.messages
        ],
    }


def matches_to_lines(matches: Iterable[Match]) -> Iterator[str]:
    for match in matches:
        yield json.dumps(match_to_record(match), separators=(",", ":"))


def save_matches(matches: Iterable[Match], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for line in matches_to_lines(matches):
            fh.write(line + "\n")


def load_matches(path: str | Path) -> list[Match]:
    with Path(path).open("rb") as fh:
        return parse_matches(fh)


def split_dataset(matches: Sequence[Match], n_train: int = 100, n_test: int = 100,
                  seed: int = 0) -> DatasetSplit:
    """Draw a disjoint match-level train/test split over the labeled matches.

    The permutation is a pure function of the sorted labeled match ids and
    the seed, so re-running on the same corpus reproduces the split exactly.
    Matches beyond n_train + n_test are left out of both sides.
    """
    if n_train <= 0 or n_test <= 0:
        raise ConfigError(f"split sizes must be positive, got {n_train}/{n_test}")
    labeled_ids = sorted(m.match_id for m in matches if m.labeled)
    if n_train + n_test > len(labeled_ids):
        raise SizingError(
            f"need {n_train + n_test} labeled matches, corpus has {len(labeled_ids)}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(labeled_ids))
    ordered = [labeled_ids[i] for i in perm]
    return DatasetSplit(train_matches=tuple(ordered[:n_train]),
                        test_matches=tuple(ordered[n_train:n_train + n_test]),
                        seed=seed)


def resolve_split(split: DatasetSplit, matches: Sequence[Match]) -> tuple[list[Match], list[Match]]:
    """Materialize a split back into match lists, preserving split order."""
    by_id = {m.match_id: m for m in matches}
    missing = [mid for mid in (*split.train_matches, *split.test_matches) if mid not in by_id]
    if missing:
        raise ValidationError(f"split references unknown match ids {missing[:5]}")
    train = [by_id[mid] for mid in split.train_matches]
    test = [by_id[mid] for mid in split.test_matches]
    return train, test


def corpus_stats(matches: Sequence[Match]) -> CorpusStats:
    """Aggregate corpus counts.

    toxicity_rate is the toxic fraction of labeled messages;
    context_dependent_fraction is the context-dependent fraction of toxic
    messages. Both are None when their denominator is zero.
    """
    n_matches = len(matches)
    n_messages = sum(len(m.messages) for m in matches)
    n_words = sum(len(msg.words()) for m in matches for msg in m.messages)
    n_labeled = sum(1 for m in matches for msg in m.messages if msg.label is not None)
    n_toxic = sum(1 for m in matches for msg in m.messages if msg.label == 1)
    n_cd = sum(1 for m in matches for msg in m.messages
               if msg.label == 1 and msg.context_dependent is True)
    toxicity_rate = (n_toxic / n_labeled) if n_labeled else None
    cd_fraction = (n_cd / n_toxic) if n_toxic else None
    return CorpusStats(n_matches=n_matches, n_messages=n_messages, n_words=n_words,
                       n_labeled=n_labeled, n_toxic=n_toxic,
                       toxicity_rate=toxicity_rate,
                       context_dependent_fraction=cd_fraction)


def filter_matches_mwiii_style(matches: Sequence[Match], min_match_msgs: int = 10,
                               min_player_msgs: int = 3,
                               min_weekly_msgs: int = 50) -> list[Match]:
    """Keep matches satisfying per-match, per-player and weekly activity floors.

    A match survives when it has at least `min_match_msgs` messages and every
    sender in it wrote at least `min_player_msgs` of them. On top of that,
    every sender must have at least `min_weekly_msgs` messages within their
    (period_id, player_key) cell, counted over the surviving matches. Because
    dropping a match lowers other players' weekly counts, the weekly rule is
    iterated to a fixed point, which makes the filter idempotent.
    """
    if min_weekly_msgs > 0:
        for m in matches:
            if m.period_id is None:
                raise ConfigError(f"match {m.match_id!r} has no period_id; weekly filtering needs one")
            for msg in m.messages:
                if msg.player_key is None:
                    raise ConfigError(
                        f"match {m.match_id!r} message {msg.index} has no player_key; "
                        "weekly filtering needs cross-match player identity")

    def per_match_ok(m: Match) -> bool:
        if len(m.messages) < min_match_msgs:
            return False
        counts = Counter(msg.player for msg in m.messages)
        return all(c >= min_player_msgs for c in counts.values())

    kept = [m for m in matches if per_match_ok(m)]
    while min_weekly_msgs > 0:
        weekly = Counter((m.period_id, msg.player_key) for m in kept for msg in m.messages)
        survivors = [m for m in kept
                     if all(weekly[(m.period_id, msg.player_key)] >= min_weekly_msgs
                            for msg in m.messages)]
        if len(survivors) == len(kept):
            break
        kept = survivors
    return kept
