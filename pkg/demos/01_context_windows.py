"""
Assembling context windows from a chat match
============================================

Walks one small match through the three context levels and the three
separator schemes, then shows what the token budget does when it bites.
Run it directly: python demos/01_context_windows.py
"""

from chattox import ChatMessage, ContextLevel, Match, SeparatorScheme, SpecialTokens
from chattox.context import assemble, input_token_strings

# A two-team skirmish. Message 5 ("ez") is the one we want to classify:
# harmless on its own, a taunt given what came before it.
match = Match(
    match_id="demo-001",
    game="synthetic",
    period_id="w01",
    messages=[
        ChatMessage(0, player=7, team=1, text="glhf"),
        ChatMessage(1, player=2, team=0, text="u2"),
        ChatMessage(2, player=7, team=1, text="mid is open"),
        ChatMessage(3, player=2, team=0, text="we just lost mid"),
        ChatMessage(4, player=7, team=1, text="gg"),
        ChatMessage(5, player=7, team=1, text="ez"),
    ],
)

tokenize = str.split
budget = 64

print("=== context levels (separator: period) ===")
for level in ContextLevel:
    ci = assemble(match, 5, level, SeparatorScheme.PERIOD, budget, tokenize)
    rendered = " ".join(input_token_strings(ci, tokenize))
    print(f"{level.name:>14}: {rendered}")

# NONE sees only "ez". CURRENT_PLAYER adds player 7's own history.
# ALL_PLAYERS interleaves both teams, which is what exposes the taunt.

print()
print("=== separator schemes (level: all players) ===")
st = SpecialTokens(max_teams=2, max_players=5)
for scheme in SeparatorScheme:
    ci = assemble(match, 5, ContextLevel.ALL_PLAYERS, scheme, budget, tokenize, st)
    rendered = " ".join(input_token_strings(ci, tokenize))
    print(f"{scheme.name:>14}: {rendered}")

# Under SENDER_TOKENS each message carries a [TEAMn][PLAYERn] prefix. The
# numbering is by order of first appearance in the match, not the raw ids,
# so the same match shape always renders the same way.

print()
print("=== budget pressure ===")
for budget in (64, 12, 6, 3):
    ci = assemble(match, 5, ContextLevel.ALL_PLAYERS, SeparatorScheme.PERIOD,
                  budget, tokenize)
    rendered = " ".join(input_token_strings(ci, tokenize))
    print(f"budget {budget:>2}: kept {len(ci.segments)} segments, "
          f"dropped {ci.truncated_count} -> {rendered}")

# History is dropped oldest-first; the evaluated message is the last thing
# to go, and even then it loses tokens from the left, never the right.
