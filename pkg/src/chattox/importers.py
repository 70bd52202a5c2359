"""Importers that normalize external chat dumps into the canonical format.

Two widely circulated DOTA 2 chat dump layouts are supported:

* "gosu" style: columns  match, time, slot, text
* "opendota" style: columns  match_id, key, slot, time, unit
  (the message text lives in `key`)

Both use player slots 0-9 with slots 0-4 on the first side and 5-9 on the
second, which is how slots are mapped to teams here. Rows with empty text
are dropped (some dumps contain them); dropped counts are logged. Imported
messages are unlabeled.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from .data import ChatMessage, Match, validate_match
from .errors import ConfigError, CorpusFormatError

logger = logging.getLogger(__name__)

FORMATS = ("gosu", "opendota")


@dataclass(frozen=True)
class _ColumnMap:
    match_id: str
    text: str
    slot: str
    time: str | None


_FORMAT_COLUMNS = {
    "gosu": _ColumnMap(match_id="match", text="text", slot="slot", time="time"),
    "opendota": _ColumnMap(match_id="match_id", text="key", slot="slot", time="time"),
}


def _team_of_slot(slot: int) -> int:
    return 0 if slot < 5 else 1


def import_chat_csv(path: str | Path, fmt: str, game: str = "dota2") -> list[Match]:
    """Read one CSV dump into canonical matches.

    Rows are grouped by match id and ordered by (time, file order); message
    indices are reassigned contiguously after empty-text rows are dropped.
    """
    if fmt not in _FORMAT_COLUMNS:
        raise ConfigError(f"unknown import format {fmt!r}, expected one of {FORMATS}")
    cols = _FORMAT_COLUMNS[fmt]
    path = Path(path)

    rows_by_match: dict[str, list[tuple[float, int, int, str]]] = {}
    dropped = 0
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise CorpusFormatError("empty CSV file", line=1)
        missing = {cols.match_id, cols.text, cols.slot} - set(reader.fieldnames)
        if missing:
            raise CorpusFormatError(
                f"CSV lacks required columns {sorted(missing)} for format {fmt!r} "
                f"(found {reader.fieldnames})", line=1)
        for line_no, row in enumerate(reader, start=2):
            text = (row.get(cols.text) or "").strip()
            if not text:
                dropped += 1
                continue
            match_id = (row.get(cols.match_id) or "").strip()
            if not match_id:
                raise CorpusFormatError("empty match id", line=line_no)
            try:
                slot = int(row[cols.slot])
            except (KeyError, ValueError) as exc:
                raise CorpusFormatError(f"bad slot value {row.get(cols.slot)!r}",
                                        line=line_no) from exc
            if not 0 <= slot <= 9:
                raise CorpusFormatError(f"slot {slot} outside 0-9", line=line_no)
            time_s = 0.0
            if cols.time and row.get(cols.time) not in (None, ""):
                try:
                    time_s = float(row[cols.time])
                except ValueError as exc:
                    raise CorpusFormatError(f"bad time value {row[cols.time]!r}",
                                            line=line_no) from exc
            rows_by_match.setdefault(match_id, []).append((time_s, line_no, slot, text))

    if dropped:
        logger.info("dropped %d empty-text rows from %s", dropped, path.name)

    matches = []
    for match_id in sorted(rows_by_match):
        rows = sorted(rows_by_match[match_id], key=lambda r: (r[0], r[1]))
        messages = tuple(
            ChatMessage(index=i, time_s=time_s, player=slot, team=_team_of_slot(slot),
                        text=text)
            for i, (time_s, _line, slot, text) in enumerate(rows)
        )
        match = Match(match_id=f"{game}-{match_id}", game=game, messages=messages)
        validate_match(match)
        matches.append(match)
    logger.info("imported %d matches (%d messages) from %s", len(matches),
                sum(len(m.messages) for m in matches), path.name)
    return matches


def import_many(paths: Iterable[str | Path], fmt: str, game: str = "dota2") -> list[Match]:
    out: list[Match] = []
    for path in paths:
        out.extend(import_chat_csv(path, fmt, game=game))
    return out
