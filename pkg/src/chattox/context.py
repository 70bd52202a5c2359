"""Context-window assembly for per-message classification.

Given a match transcript and the index of the message to evaluate, build the
model input: optionally a window of preceding messages (filtered by context
level), joined under a separator scheme, trimmed to a token budget. Only
messages strictly before the evaluated one are eligible, so assembly can
never look into the future.

Sender identities are normalized relative to the evaluated message: its
sender is always team 0 / player 0, and other (team, player) pairs are
renumbered by first appearance in the window. The classifier therefore sees
"the speaker" and "others relative to the speaker", not raw slot numbers.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable

from .data import Match
from .errors import BudgetError

logger = logging.getLogger(__name__)

MSG_TOKEN = "[MSG]"

Tokenizer = Callable[[str], list[str]]


class ContextLevel(Enum):
    NONE = "none"
    CURRENT_PLAYER = "current_player"
    ALL_PLAYERS = "all_players"


class SeparatorScheme(Enum):
    PERIOD = "period"
    NEUTRAL_SEP = "neutral_sep"
    SENDER_TOKENS = "sender_tokens"


@dataclass(frozen=True)
class SpecialTokens:
    """Bounded sender-token vocabulary.

    Team/player numbers beyond the bounds are clamped to the largest token
    (with a warning) so unusually large lobbies degrade instead of failing.
    """

    max_teams: int = 2
    max_players: int = 5

    def team_token(self, n: int) -> str:
        if n >= self.max_teams:
            logger.warning("team index %d clamped to %d", n, self.max_teams - 1)
            n = self.max_teams - 1
        return f"[TEAM{n}]"

    def player_token(self, n: int) -> str:
        if n >= self.max_players:
            logger.warning("player index %d clamped to %d", n, self.max_players - 1)
            n = self.max_players - 1
        return f"[PLAYER{n}]"

    def vocabulary(self) -> list[str]:
        return special_token_vocabulary(self.max_teams, self.max_players)


def special_token_vocabulary(max_teams: int = 2, max_players: int = 5) -> list[str]:
    """All special tokens in their fixed order: [MSG], teams, players."""
    return ([MSG_TOKEN]
            + [f"[TEAM{t}]" for t in range(max_teams)]
            + [f"[PLAYER{p}]" for p in range(max_players)])


@dataclass(frozen=True)
class SenderMap:
    """Normalized (team, player) -> (team, player) mapping for one evaluation."""

    pairs: dict[tuple[int, int], tuple[int, int]]

    def normalize(self, team: int, player: int) -> tuple[int, int]:
        return self.pairs[(team, player)]


def build_sender_map(match: Match, evaluated_index: int) -> SenderMap:
    """Map raw sender pairs to normalized ids for one evaluated message.

    The evaluated sender becomes (0, 0). Remaining teams are numbered by
    first appearance scanning the history oldest-first, and players are
    numbered by first appearance within their team. Equal transcripts up to
    the evaluated message yield equal maps regardless of later messages.
    """
    ev = match.messages[evaluated_index]
    pairs: dict[tuple[int, int], tuple[int, int]] = {(ev.team, ev.player): (0, 0)}
    team_map: dict[int, int] = {ev.team: 0}
    next_player: dict[int, int] = {0: 1}
    for msg in match.messages[:evaluated_index]:
        raw = (msg.team, msg.player)
        if raw in pairs:
            continue
        if msg.team not in team_map:
            new_team = len(team_map)
            team_map[msg.team] = new_team
            next_player[new_team] = 0
        t = team_map[msg.team]
        pairs[raw] = (t, next_player[t])
        next_player[t] += 1
    return SenderMap(pairs=pairs)


@dataclass(frozen=True)
class Segment:
    """One message's contribution to the assembled input."""

    index: int
    prefix: tuple[str, ...]
    text: str


@dataclass(frozen=True)
class ContextualInput:
    """Assembled classifier input for one evaluated message."""

    evaluated_index: int
    segments: tuple[Segment, ...]
    token_budget: int
    truncated_count: int
    evaluated_tokens_dropped: int = 0
    label: int | None = None

    @property
    def evaluated_segment(self) -> Segment:
        return self.segments[-1]


def input_token_strings(ci: ContextualInput, tokenize: Tokenizer) -> list[str]:
    """Flatten an assembled input back into its token-string sequence."""
    tokens: list[str] = []
    for seg in ci.segments:
        tokens.extend(seg.prefix)
        tokens.extend(tokenize(seg.text))
    return tokens


def _history_indices(match: Match, evaluated_index: int, level: ContextLevel) -> list[int]:
    if level is ContextLevel.NONE:
        return []
    ev = match.messages[evaluated_index]
    out = []
    for i in range(evaluated_index):
        msg = match.messages[i]
        if level is ContextLevel.CURRENT_PLAYER and (msg.team, msg.player) != (ev.team, ev.player):
            continue
        out.append(i)
    return out


def assemble(match: Match, evaluated_index: int, level: ContextLevel,
             scheme: SeparatorScheme, token_budget: int, tokenize: Tokenizer,
             special_tokens: SpecialTokens | None = None) -> ContextualInput:
    """Assemble the model input for one message of one match.

    History messages are dropped oldest-first until the whole input fits the
    token budget; the evaluated message itself is never dropped. If it alone
    exceeds the budget its text is truncated from the left (most recent
    tokens kept) and the drop is recorded in `evaluated_tokens_dropped`.

    Budget accounting includes separator and sender tokens: under PERIOD and
    NEUTRAL_SEP a one-token separator precedes every message after the first
    kept one, and under SENDER_TOKENS every message carries a two-token
    [TEAM{n}][PLAYER{n}] prefix (which also serves as the separator).
    """
    if not 0 <= evaluated_index < len(match.messages):
        raise IndexError(f"evaluated_index {evaluated_index} out of range "
                         f"for match with {len(match.messages)} messages")
    if token_budget <= 0:
        raise BudgetError(f"token_budget must be positive, got {token_budget}")

    st = special_tokens or SpecialTokens()
    smap = build_sender_map(match, evaluated_index) if scheme is SeparatorScheme.SENDER_TOKENS else None

    def prefix_of(msg_index: int) -> tuple[str, ...]:
        if smap is None:
            return ()
        msg = match.messages[msg_index]
        t, p = smap.normalize(msg.team, msg.player)
        return (st.team_token(t), st.player_token(p))

    sep = {SeparatorScheme.PERIOD: ".", SeparatorScheme.NEUTRAL_SEP: MSG_TOKEN}.get(scheme)
    candidates = _history_indices(match, evaluated_index, level) + [evaluated_index]
    token_counts = {i: len(tokenize(match.messages[i].text)) for i in candidates}
    prefixes = {i: prefix_of(i) for i in candidates}

    def total_size(kept: list[int]) -> int:
        size = sum(token_counts[i] + len(prefixes[i]) for i in kept)
        if sep is not None and kept:
            size += len(kept) - 1
        return size

    kept = list(candidates)
    truncated = 0
    while len(kept) > 1 and total_size(kept) > token_budget:
        kept.pop(0)
        truncated += 1

    ev = match.messages[evaluated_index]
    dropped_tokens = 0
    ev_text = ev.text
    if total_size(kept) > token_budget:
        # evaluated message alone; keep its most recent tokens
        room = token_budget - len(prefixes[evaluated_index])
        if room < 1:
            raise BudgetError(
                f"token_budget {token_budget} cannot hold the evaluated message's "
                f"{len(prefixes[evaluated_index])}-token prefix plus one text token")
        tokens = tokenize(ev_text)
        dropped_tokens = len(tokens) - room
        ev_text = " ".join(tokens[-room:])

    segments = []
    for pos, i in enumerate(kept):
        prefix = prefixes[i]
        if sep is not None and pos > 0:
            prefix = (sep,)
        text = ev_text if i == evaluated_index else match.messages[i].text
        segments.append(Segment(index=i, prefix=prefix, text=text))

    return ContextualInput(evaluated_index=evaluated_index, segments=tuple(segments),
                           token_budget=token_budget, truncated_count=truncated,
                           evaluated_tokens_dropped=dropped_tokens, label=ev.label)


def assemble_match(match: Match, level: ContextLevel, scheme: SeparatorScheme,
                   token_budget: int, tokenize: Tokenizer,
                   special_tokens: SpecialTokens | None = None) -> list[ContextualInput]:
    """Assemble one input per message of the match."""
    return [assemble(match, i, level, scheme, token_budget, tokenize, special_tokens)
            for i in range(len(match.messages))]


def build_corpus_sender_map(match: Match) -> SenderMap:
    """First-appearance sender normalization with no privileged sender.

    Used when a whole transcript is rendered for pretraining: teams and
    players are numbered in order of first appearance from the start.
    """
    pairs: dict[tuple[int, int], tuple[int, int]] = {}
    team_map: dict[int, int] = {}
    next_player: dict[int, int] = {}
    for msg in match.messages:
        raw = (msg.team, msg.player)
        if raw in pairs:
            continue
        if msg.team not in team_map:
            new_team = len(team_map)
            team_map[msg.team] = new_team
            next_player[new_team] = 0
        t = team_map[msg.team]
        pairs[raw] = (t, next_player[t])
        next_player[t] += 1
    return SenderMap(pairs=pairs)
