"""Vocabulary registry and masked-language-model corpus preparation.

The registry tracks tokens added on top of a base vocabulary and which ids
are protected: protected ids are never selected as prediction targets and
never inserted as random replacements, so sender and boundary markers keep
their meaning during domain-adaptive pretraining.

Masking follows the standard recipe: a fraction of eligible tokens is
selected as targets; of those, most become the mask token, some become a
random (unprotected) token, and the rest stay unchanged. Unselected target
positions carry `IGNORE_INDEX` so the loss skips them.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .context import MSG_TOKEN, SeparatorScheme, SpecialTokens, Tokenizer, build_corpus_sender_map
from .data import Match
from .errors import ConfigError, RegistrationError

logger = logging.getLogger(__name__)

IGNORE_INDEX = -100


def derive_seed(base: int, *parts) -> int:
    """Stable per-item seed derived from a base seed and arbitrary labels."""
    payload = "|".join([str(base), *map(str, parts)])
    digest = hashlib.sha256(payload.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass(frozen=True)
class TokenRegistry:
    """Token-id bookkeeping on top of a fixed base vocabulary.

    Added tokens receive contiguous ids starting at `base_vocab_size` and are
    always protected. Base-vocabulary special ids (padding, mask, ...) are
    listed in `protected_ids` at construction time.
    """

    base_vocab_size: int
    mask_id: int
    added_tokens: tuple[tuple[str, int], ...] = ()
    protected_ids: frozenset[int] = frozenset()

    @property
    def vocab_size(self) -> int:
        return self.base_vocab_size + len(self.added_tokens)

    def added_token_ids(self) -> dict[str, int]:
        return dict(self.added_tokens)


def register_special_tokens(registry: TokenRegistry, tokens: Sequence[str]) -> TokenRegistry:
    """Append new protected tokens; ids continue contiguously from vocab_size."""
    existing = registry.added_token_ids()
    added = list(registry.added_tokens)
    protected = set(registry.protected_ids)
    next_id = registry.vocab_size
    for token in tokens:
        if token in existing:
            raise RegistrationError(f"token {token!r} already registered (id {existing[token]})")
        existing[token] = next_id
        added.append((token, next_id))
        protected.add(next_id)
        next_id += 1
    return TokenRegistry(base_vocab_size=registry.base_vocab_size,
                         mask_id=registry.mask_id,
                         added_tokens=tuple(added),
                         protected_ids=frozenset(protected))


@dataclass(frozen=True)
class MaskingConfig:
    select_prob: float = 0.15
    mask_frac: float = 0.8
    random_frac: float = 0.1
    keep_frac: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 < self.select_prob <= 1.0:
            raise ConfigError(f"select_prob must lie in (0, 1], got {self.select_prob}")
        for name in ("mask_frac", "random_frac", "keep_frac"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {value}")
        total = self.mask_frac + self.random_frac + self.keep_frac
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"mask/random/keep fractions must sum to 1, got {total}")


def mask_sequence(ids: Sequence[int] | np.ndarray, registry: TokenRegistry,
                  config: MaskingConfig, seed: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Corrupt one token-id sequence for MLM training.

    Returns (corrupted_ids, targets): targets hold the original id at
    selected positions and IGNORE_INDEX elsewhere. Protected ids are never
    selected and never drawn as random replacements. Selection and corruption
    draws are independent per token, so the selected fraction of a long
    sequence concentrates around select_prob.
    """
    config.validate()
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ConfigError(f"mask_sequence expects a 1-d sequence, got shape {ids.shape}")
    rng = np.random.default_rng(config.seed if seed is None else seed)

    protected = np.fromiter(sorted(registry.protected_ids), dtype=np.int64,
                            count=len(registry.protected_ids))
    eligible = ~np.isin(ids, protected)
    selected = (rng.random(ids.shape[0]) < config.select_prob) & eligible

    targets = np.full(ids.shape[0], IGNORE_INDEX, dtype=np.int64)
    targets[selected] = ids[selected]

    action = rng.random(ids.shape[0])
    corrupted = ids.copy()
    to_mask = selected & (action < config.mask_frac)
    to_random = selected & (action >= config.mask_frac) & (action < config.mask_frac + config.random_frac)
    corrupted[to_mask] = registry.mask_id

    n_random = int(to_random.sum())
    if n_random:
        allowed = np.setdiff1d(np.arange(registry.vocab_size, dtype=np.int64), protected)
        if allowed.size == 0:
            raise ConfigError("no unprotected ids available for random replacement")
        corrupted[to_random] = rng.choice(allowed, size=n_random)
    return corrupted, targets


def render_match_tokens(match: Match, scheme: SeparatorScheme, tokenize: Tokenizer,
                        special_tokens: SpecialTokens | None = None) -> list[list[str]]:
    """Token lists for each message of a match under a separator scheme.

    Under SENDER_TOKENS every message gets its normalized two-token sender
    prefix (first-appearance numbering over the whole match, no privileged
    sender). Under the other schemes messages carry no prefix here; the
    separator is inserted between messages at document-building time.
    """
    st = special_tokens or SpecialTokens()
    smap = build_corpus_sender_map(match) if scheme is SeparatorScheme.SENDER_TOKENS else None
    rendered = []
    for msg in match.messages:
        tokens: list[str] = []
        if smap is not None:
            t, p = smap.normalize(msg.team, msg.player)
            tokens.extend((st.team_token(t), st.player_token(p)))
        tokens.extend(tokenize(msg.text))
        rendered.append(tokens)
    return rendered


def build_mlm_corpus(matches: Sequence[Match], scheme: SeparatorScheme,
                     token_budget: int, tokenize: Tokenizer,
                     special_tokens: SpecialTokens | None = None) -> list[list[str]]:
    """Render matches into pretraining documents within a token budget.

    Documents never mix matches and never split a message: when appending the
    next message would exceed the budget a new document starts. A single
    message longer than the budget is truncated to fit (with a warning), so
    every message contributes tokens to exactly one document.
    """
    if token_budget <= 0:
        raise ConfigError(f"token_budget must be positive, got {token_budget}")
    sep = {SeparatorScheme.PERIOD: ".", SeparatorScheme.NEUTRAL_SEP: MSG_TOKEN}.get(scheme)
    docs: list[list[str]] = []
    for match in matches:
        doc: list[str] = []
        for tokens in render_match_tokens(match, scheme, tokenize, special_tokens):
            glue = [sep] if (sep is not None and doc) else []
            if doc and len(doc) + len(glue) + len(tokens) > token_budget:
                docs.append(doc)
                doc = []
                glue = []
            if len(tokens) > token_budget:
                logger.warning("message of %d tokens exceeds budget %d; truncated",
                               len(tokens), token_budget)
                tokens = tokens[:token_budget]
            doc.extend(glue + tokens)
        if doc:
            docs.append(doc)
    return docs
