"""Shared fixtures: tiny hand-built matches and a fitted tokenizer."""

import pytest

from chattox.data import ChatMessage, Match
from chattox.encoder import WordTokenizer


def make_match(match_id="m1", rows=None, period_id=None, game="synthetic"):
    """rows: list of (player, team, text[, label[, cd[, player_key]]]) tuples."""
    if rows is None:
        rows = [
            (0, 0, "gl hf all"),
            (1, 0, "thanks same"),
            (2, 1, "mid is open"),
            (0, 0, "push now"),
        ]
    messages = []
    for i, row in enumerate(rows):
        player, team, text = row[0], row[1], row[2]
        label = row[3] if len(row) > 3 else None
        cd = row[4] if len(row) > 4 else None
        key = row[5] if len(row) > 5 else None
        messages.append(ChatMessage(index=i, player=player, team=team, text=text,
                                    label=label, context_dependent=cd,
                                    player_key=key, time_s=float(i * 10)))
    return Match(match_id=match_id, game=game, messages=tuple(messages),
                 period_id=period_id)


@pytest.fixture
def sample_match():
    return make_match()


@pytest.fixture
def labeled_match():
    return make_match("m2", rows=[
        (0, 0, "gl hf", 0),
        (1, 1, "you are garbage", 1, False),
        (0, 0, "nice one", 0),
        (1, 1, "gg", 1, True),
    ])


@pytest.fixture
def word_tokenizer():
    texts = ["gl hf all", "thanks same", "mid is open", "push now",
             "you are garbage", "nice one", "gg", "report mid"]
    return WordTokenizer.fit(texts)
