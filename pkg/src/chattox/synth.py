"""Synthetic game-chat corpora with planted, machine-checkable toxicity.

Two mechanisms are planted so that context sensitivity is testable:

* an insult marker token that makes a message toxic on its own
  (`context_free_toxic`), and
* a taunt trigger token that arms its sender, after which that sender's
  later messages containing the latent token are toxic
  (`contextual_toxic`).

Unarmed senders also produce the latent token in benign messages, with
identical filler-text statistics. A classifier that only sees the evaluated
message therefore cannot separate armed from unarmed latent messages, which
bounds its recall on the context-dependent slice; a classifier that sees the
sender's history can look for the trigger. The labeling rules are exposed as
pure functions so tests can re-derive every label from the transcript.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .data import ChatMessage, Match
from .errors import ConfigError

DEFAULT_BENIGN_VOCAB = (
    "mid", "top", "bot", "care", "push", "back", "heal", "ward", "rush",
    "gank", "ulti", "smoke", "stack", "pull", "roam", "farm", "split",
    "def", "regroup", "nice", "wow", "lol", "brb", "afk", "lag", "oom",
    "tp", "rosh", "dust", "swap", "focus", "bait", "hold", "go", "wait",
    "team", "help", "plan", "scout", "cover",
)


@dataclass(frozen=True)
class PlayerPoolConfig:
    """Global player pool for propensity-style corpora.

    A `prone_fraction` of players produces a `prone_toxicity_share` of all
    toxicity; the remaining players share the rest. `train_fraction` of the
    pool (stratified over prone/normal) is reserved for training matches so
    train and test player sets can be kept disjoint.
    """

    n_players: int = 40
    prone_fraction: float = 0.2
    prone_toxicity_share: float = 0.8
    train_fraction: float = 0.5


@dataclass(frozen=True)
class SynthConfig:
    n_matches: int = 100
    n_teams: int = 2
    players_per_team: int = 2
    messages_per_match: int = 16
    toxicity_rate: float = 0.1
    context_dependent_fraction: float = 0.5
    benign_vocab: tuple[str, ...] = DEFAULT_BENIGN_VOCAB
    marker_token: str = "garbo"
    trigger_token: str = "ez"
    latent_token: str = "gg"
    latent_in_benign_prob: float = 0.6
    taunters_per_match: int = 1
    msg_len_min: int = 3
    msg_len_max: int = 8
    labeled: bool = True
    game: str = "synthetic"
    period_id: str | None = None
    match_id_prefix: str = "synth"
    player_pool: PlayerPoolConfig | None = None

    @property
    def roster_size(self) -> int:
        return self.n_teams * self.players_per_team

    def validate(self) -> None:
        if self.n_matches <= 0:
            raise ConfigError("n_matches must be positive")
        if self.n_teams <= 0 or self.players_per_team <= 0:
            raise ConfigError("roster dimensions must be positive")
        if self.messages_per_match <= 0:
            raise ConfigError("messages_per_match must be positive")
        for name in ("toxicity_rate", "context_dependent_fraction", "latent_in_benign_prob"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {value}")
        if self.msg_len_min < 2 or self.msg_len_max < self.msg_len_min:
            raise ConfigError("need msg_len_max >= msg_len_min >= 2 to fit planted tokens")
        if self.taunters_per_match < 0:
            raise ConfigError("taunters_per_match must be non-negative")
        if self.toxicity_rate * self.context_dependent_fraction > 0 and self.taunters_per_match == 0:
            raise ConfigError("context-dependent toxicity requires at least one taunter per match")
        specials = {self.marker_token, self.trigger_token, self.latent_token}
        if len(specials) != 3:
            raise ConfigError("marker, trigger and latent tokens must be distinct")
        if specials & set(self.benign_vocab):
            raise ConfigError("benign vocabulary must not contain the planted tokens")
        if not self.benign_vocab:
            raise ConfigError("benign vocabulary is empty")
        if self.player_pool is not None:
            pool = self.player_pool
            if not 0.0 < pool.prone_fraction < 1.0:
                raise ConfigError("prone_fraction must lie in (0, 1)")
            if not 0.0 <= pool.prone_toxicity_share <= 1.0:
                raise ConfigError("prone_toxicity_share must lie in [0, 1]")
            if pool.n_players < self.roster_size:
                raise ConfigError("player pool smaller than one roster")
            r_prone = self.toxicity_rate * pool.prone_toxicity_share / pool.prone_fraction
            if r_prone > 1.0:
                raise ConfigError(f"prone per-message rate {r_prone:.3f} exceeds 1")


def pool_rates(config: SynthConfig) -> tuple[float, float]:
    """Per-message toxicity rates (prone, normal) implied by the pool shares."""
    pool = config.player_pool
    if pool is None:
        raise ConfigError("config has no player pool")
    r = config.toxicity_rate
    r_prone = r * pool.prone_toxicity_share / pool.prone_fraction
    r_normal = r * (1.0 - pool.prone_toxicity_share) / (1.0 - pool.prone_fraction)
    return r_prone, r_normal


@dataclass(frozen=True)
class PoolPlayer:
    key: str
    prone: bool
    rate: float


@dataclass(frozen=True)
class PlayerPool:
    players: tuple[PoolPlayer, ...]
    train_keys: frozenset[str]
    test_keys: frozenset[str]

    @property
    def prone_keys(self) -> frozenset[str]:
        return frozenset(p.key for p in self.players if p.prone)


def build_player_pool(config: SynthConfig, seed: int) -> PlayerPool:
    """Assign prone flags and a stratified disjoint train/test partition."""
    config.validate()
    pool_cfg = config.player_pool
    if pool_cfg is None:
        raise ConfigError("config has no player pool")
    r_prone, r_normal = pool_rates(config)
    rng = np.random.default_rng(seed)
    n = pool_cfg.n_players
    n_prone = int(round(n * pool_cfg.prone_fraction))
    order = rng.permutation(n)
    prone_idx = set(int(i) for i in order[:n_prone])
    players = tuple(
        PoolPlayer(key=f"p{i:04d}", prone=(i in prone_idx),
                   rate=(r_prone if i in prone_idx else r_normal))
        for i in range(n)
    )

    def stratified_train(keys: list[str]) -> set[str]:
        k = int(round(len(keys) * pool_cfg.train_fraction))
        picked = rng.permutation(len(keys))[:k]
        return {keys[int(i)] for i in picked}

    prone_keys = [p.key for p in players if p.prone]
    normal_keys = [p.key for p in players if not p.prone]
    train = stratified_train(prone_keys) | stratified_train(normal_keys)
    test = {p.key for p in players} - train
    return PlayerPool(players=players, train_keys=frozenset(train),
                      test_keys=frozenset(test))


@dataclass(frozen=True)
class _Slot:
    team: int
    player: int
    key: str | None
    rate: float


class _RosterDealer:
    """Deal rosters as chunks of repeated pool permutations.

    Chunking a permutation guarantees distinct players per roster; when a
    permutation cannot supply one more full roster the remainder is discarded
    and a fresh permutation is drawn, so every eligible player keeps appearing
    at a near-uniform frequency.
    """

    def __init__(self, players: Sequence[PoolPlayer], rng: np.random.Generator):
        if not players:
            raise ConfigError("empty roster pool")
        self._players = list(players)
        self._rng = rng
        self._deck: list[PoolPlayer] = []

    def deal(self, size: int) -> list[PoolPlayer]:
        if size > len(self._players):
            raise ConfigError("roster larger than eligible pool")
        if len(self._deck) < size:
            order = self._rng.permutation(len(self._players))
            self._deck = [self._players[int(i)] for i in order]
        roster, self._deck = self._deck[:size], self._deck[size:]
        return roster


def _match_roster(config: SynthConfig, rng: np.random.Generator,
                  dealer: _RosterDealer | None) -> list[_Slot]:
    slots = []
    dealt = dealer.deal(config.roster_size) if dealer is not None else None
    for s in range(config.roster_size):
        team = s // config.players_per_team
        if dealt is None:
            slots.append(_Slot(team=team, player=s, key=None, rate=config.toxicity_rate))
        else:
            slots.append(_Slot(team=team, player=s, key=dealt[s].key, rate=dealt[s].rate))
    return slots


def _generate_match(config: SynthConfig, rng: np.random.Generator, match_id: str,
                    roster: list[_Slot]) -> Match:
    n = config.messages_per_match
    vocab = np.array(config.benign_vocab)
    senders = rng.integers(0, len(roster), size=n)
    n_taunters = min(config.taunters_per_match, len(roster))
    taunters = {int(i) for i in rng.choice(len(roster), size=n_taunters, replace=False)}

    armed: set[int] = set()
    seen: set[int] = set()
    cd_deficit = 0
    messages = []
    for i in range(n):
        s = int(senders[i])
        u = rng.random()
        rate = roster[s].rate
        if u < rate * config.context_dependent_fraction:
            role = "cd"
        elif u < rate:
            role = "ci"
        else:
            role = "benign"

        # A context-dependent toxic message needs an armed sender. When none
        # exists yet the draw is deferred and repaid from a later benign slot,
        # keeping the realized rates close to their targets.
        if role == "cd":
            if not armed:
                cd_deficit += 1
                role = "benign"
            elif s not in armed:
                s = int(rng.choice(sorted(armed)))
        elif role == "benign" and cd_deficit > 0 and armed:
            s = int(rng.choice(sorted(armed)))
            role = "cd"
            cd_deficit -= 1

        length = int(rng.integers(config.msg_len_min, config.msg_len_max + 1))
        words = [str(w) for w in rng.choice(vocab, size=length)]
        free = list(range(length))
        rng.shuffle(free)
        if role == "ci":
            words[free.pop()] = config.marker_token
        elif role == "cd":
            words[free.pop()] = config.latent_token
        elif s not in armed and rng.random() < config.latent_in_benign_prob:
            # benign latent usage mirrors the toxic one so the evaluated text
            # alone carries no signal; armed senders never use it benignly
            words[free.pop()] = config.latent_token
        if s in taunters and s not in seen:
            words[free.pop()] = config.trigger_token

        label: int | None = 1 if role in ("ci", "cd") else 0
        cd_flag: bool | None = True if role == "cd" else (False if role == "ci" else None)
        if not config.labeled:
            label = None
            cd_flag = None
        messages.append(ChatMessage(index=i, time_s=float(i),
                                    player=roster[s].player, team=roster[s].team,
                                    text=" ".join(words), label=label,
                                    context_dependent=cd_flag,
                                    player_key=roster[s].key))
        seen.add(s)
        if config.trigger_token in words:
            armed.add(s)

    return Match(match_id=match_id, game=config.game, messages=tuple(messages),
                 period_id=config.period_id)


def generate_synthetic_corpus(config: SynthConfig, seed: int,
                              roster_pool: Sequence[PoolPlayer] | None = None) -> list[Match]:
    """Generate a corpus; identical (config, seed) pairs give identical matches.

    When `config.player_pool` is set, rosters are dealt from `roster_pool`
    (default: a pool built from the config and the same seed) and messages
    carry `player_key`.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    dealer = None
    if config.player_pool is not None:
        players = roster_pool if roster_pool is not None else build_player_pool(config, seed).players
        dealer = _RosterDealer(players, rng)
    return [
        _generate_match(config, rng, f"{config.match_id_prefix}-{i:05d}",
                        _match_roster(config, rng, dealer))
        for i in range(config.n_matches)
    ]


def context_free_toxic(text: str, config: SynthConfig) -> bool:
    """Ground-truth rule: the message text alone contains the insult marker."""
    return config.marker_token in text.split()


def contextual_toxic(match: Match, index: int, config: SynthConfig) -> bool:
    """Ground-truth rule: latent token sent by a player armed by a strictly
    earlier trigger message of their own."""
    msg = match.messages[index]
    if config.latent_token not in msg.words():
        return False
    return any(
        earlier.player == msg.player and config.trigger_token in earlier.words()
        for earlier in match.messages[:index]
    )


def planted_label(match: Match, index: int, config: SynthConfig) -> int:
    return int(context_free_toxic(match.messages[index].text, config)
               or contextual_toxic(match, index, config))


@dataclass(frozen=True)
class PropensityCorpus:
    """Player-disjoint labeled train/test corpora plus a shared unlabeled pile."""

    train_matches: tuple[Match, ...]
    test_matches: tuple[Match, ...]
    unlabeled_matches: tuple[Match, ...]
    pool: PlayerPool


def generate_propensity_corpus(config: SynthConfig, seed: int,
                               n_train_matches: int, n_test_matches: int,
                               n_unlabeled_matches: int) -> PropensityCorpus:
    """Generate the three-corpus layout used by the propensity pipeline.

    Labeled train matches draw rosters only from the pool's train players,
    labeled test matches only from its test players, and the unlabeled pile
    from everyone, so "classifier never saw a test player's messages" holds
    by construction and each player accumulates unlabeled history to score.
    """
    if config.player_pool is None:
        raise ConfigError("propensity corpus needs config.player_pool")
    config.validate()
    pool = build_player_pool(config, seed)
    train_players = [p for p in pool.players if p.key in pool.train_keys]
    test_players = [p for p in pool.players if p.key in pool.test_keys]
    if len(train_players) < config.roster_size or len(test_players) < config.roster_size:
        raise ConfigError("player pool too small for disjoint train/test rosters")

    root = np.random.default_rng(seed)
    seeds = root.integers(0, 2**63 - 1, size=3)

    def sub(n: int, prefix: str, labeled: bool) -> SynthConfig:
        return replace(config, n_matches=n, match_id_prefix=prefix, labeled=labeled)

    train = generate_synthetic_corpus(sub(n_train_matches, f"{config.match_id_prefix}-train", True),
                                      int(seeds[0]), roster_pool=train_players)
    test = generate_synthetic_corpus(sub(n_test_matches, f"{config.match_id_prefix}-test", True),
                                     int(seeds[1]), roster_pool=test_players)
    unlabeled = generate_synthetic_corpus(sub(n_unlabeled_matches, f"{config.match_id_prefix}-unlab", False),
                                          int(seeds[2]), roster_pool=list(pool.players))
    return PropensityCorpus(train_matches=tuple(train), test_matches=tuple(test),
                            unlabeled_matches=tuple(unlabeled), pool=pool)
