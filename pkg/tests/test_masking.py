"""Masked-token corruption: selection statistics and protected-id safety."""

import numpy as np
import pytest

from chattox.context import SeparatorScheme
from chattox.errors import ConfigError, RegistrationError
from chattox.masking import (
    IGNORE_INDEX,
    MaskingConfig,
    TokenRegistry,
    build_mlm_corpus,
    derive_seed,
    mask_sequence,
    register_special_tokens,
    render_match_tokens,
)
from conftest import make_match

tok = str.split


def fresh_registry(vocab=100, protected=(0, 1, 2, 3)):
    return TokenRegistry(base_vocab_size=vocab, mask_id=3,
                         added_tokens=(), protected_ids=frozenset(protected))


def test_derive_seed_stable_and_distinct():
    assert derive_seed(1, "a", 2) == derive_seed(1, "a", 2)
    assert derive_seed(1, "a", 2) != derive_seed(1, "a", 3)
    assert derive_seed(1, "a") != derive_seed(2, "a")
    assert 0 <= derive_seed(0) < 2**64


def test_registry_registration():
    reg = fresh_registry()
    reg2 = register_special_tokens(reg, ["[MSG]", "[TEAM0]"])
    assert reg2.vocab_size == 102
    assert reg2.added_token_ids() == {"[MSG]": 100, "[TEAM0]": 101}
    # added tokens are always protected from corruption
    assert {100, 101} <= set(reg2.protected_ids)
    with pytest.raises(RegistrationError):
        register_special_tokens(reg2, ["[MSG]"])


def test_masking_config_validation():
    MaskingConfig().validate()
    with pytest.raises(ConfigError):
        MaskingConfig(mask_frac=0.5, random_frac=0.4, keep_frac=0.4).validate()
    with pytest.raises(ConfigError):
        MaskingConfig(select_prob=0.0).validate()


def test_mask_sequence_shapes_and_ignore_index():
    reg = fresh_registry()
    ids = np.arange(4, 60)
    corrupted, targets = mask_sequence(ids, reg, MaskingConfig(seed=0))
    assert corrupted.shape == ids.shape and targets.shape == ids.shape
    selected = targets != IGNORE_INDEX
    # unselected positions pass through unchanged and carry no loss
    assert np.array_equal(corrupted[~selected], ids[~selected])
    # selected positions predict the original token
    assert np.array_equal(targets[selected], ids[selected])


def test_mask_sequence_deterministic_by_seed():
    reg = fresh_registry()
    ids = np.arange(4, 80)
    a = mask_sequence(ids, reg, MaskingConfig(seed=5))
    b = mask_sequence(ids, reg, MaskingConfig(seed=5))
    c = mask_sequence(ids, reg, MaskingConfig(seed=6))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    assert not np.array_equal(a[0], c[0])
    # the explicit seed argument overrides the config seed
    d = mask_sequence(ids, reg, MaskingConfig(seed=5), seed=6)
    assert np.array_equal(d[0], c[0])


def test_protected_ids_never_selected_or_produced():
    reg = register_special_tokens(fresh_registry(vocab=50), ["[MSG]", "[TEAM0]", "[PLAYER0]"])
    protected = set(reg.protected_ids)
    rng = np.random.default_rng(1)
    for trial in range(50):
        ids = rng.integers(0, reg.vocab_size, size=120)
        corrupted, targets = mask_sequence(ids, reg, MaskingConfig(), seed=trial)
        sel = targets != IGNORE_INDEX
        assert not (set(ids[sel].tolist()) & protected)
        # the mask token is the only protected id ever written into the copy
        changed = sel & (corrupted != ids)
        assert set(corrupted[changed].tolist()) & protected <= {reg.mask_id}
        # protected positions are byte-identical in the corrupted copy
        prot_pos = np.isin(ids, sorted(protected))
        assert np.array_equal(corrupted[prot_pos], ids[prot_pos])


def test_selection_and_corruption_fractions():
    reg = fresh_registry(vocab=1000)
    rng = np.random.default_rng(2)
    ids = rng.integers(4, 1000, size=200_000)
    corrupted, targets = mask_sequence(ids, reg, MaskingConfig(seed=9))
    sel = targets != IGNORE_INDEX
    n = ids.size
    frac = sel.sum() / n
    sigma = np.sqrt(0.15 * 0.85 / n)
    assert abs(frac - 0.15) <= 3 * sigma

    sel_idx = np.flatnonzero(sel)
    masked = (corrupted[sel_idx] == reg.mask_id).mean()
    kept = (corrupted[sel_idx] == ids[sel_idx]).mean()
    randomized = 1.0 - masked - kept
    # a random replacement can coincide with the original, inflating "kept"
    # by about 1/vocab; 3-sigma bands around 0.8 / 0.1 / 0.1 absorb that
    m = sel.sum()
    assert abs(masked - 0.8) <= 3 * np.sqrt(0.8 * 0.2 / m)
    assert abs(kept - 0.1) <= 3 * np.sqrt(0.1 * 0.9 / m) + 1e-3
    assert abs(randomized - 0.1) <= 3 * np.sqrt(0.1 * 0.9 / m) + 1e-3


def test_mask_sequence_rejects_2d_input():
    with pytest.raises(ConfigError):
        mask_sequence(np.zeros((2, 3), dtype=np.int64), fresh_registry(), MaskingConfig())


def test_render_match_tokens_sender_prefixes():
    m = make_match()
    per_msg = render_match_tokens(m, SeparatorScheme.SENDER_TOKENS, tok)
    assert len(per_msg) == len(m.messages)
    assert per_msg[0][:2] == ["[TEAM0]", "[PLAYER0]"]
    assert ["[TEAM1]", "[PLAYER0]"] == per_msg[2][:2]
    # same sender keeps the same prefix on every message
    assert per_msg[3][:2] == per_msg[0][:2]
    # non-sender schemes add no prefix at render time
    plain = render_match_tokens(m, SeparatorScheme.PERIOD, tok)
    assert plain[0] == ["gl", "hf", "all"]


def test_build_mlm_corpus_one_match_per_document():
    # documents never mix matches, even when two transcripts would fit
    matches = [make_match(f"m{i}") for i in range(4)]
    docs = build_mlm_corpus(matches, SeparatorScheme.PERIOD, 10_000, tok)
    assert len(docs) == 4


def test_build_mlm_corpus_separators_between_messages():
    m = make_match()
    (doc,) = build_mlm_corpus([m], SeparatorScheme.PERIOD, 10_000, tok)
    assert doc.count(".") == len(m.messages) - 1
    (doc,) = build_mlm_corpus([m], SeparatorScheme.NEUTRAL_SEP, 10_000, tok)
    assert doc.count("[MSG]") == len(m.messages) - 1
    (doc,) = build_mlm_corpus([m], SeparatorScheme.SENDER_TOKENS, 10_000, tok)
    assert doc.count("[MSG]") == 0 and doc.count("[PLAYER0]") >= 3


def test_build_mlm_corpus_splits_within_budget_without_splitting_messages():
    m = make_match()  # messages of 3, 2, 3, 2 words
    docs = build_mlm_corpus([m], SeparatorScheme.PERIOD, 7, tok)
    assert all(len(doc) <= 7 for doc in docs)
    flat = [t for doc in docs for t in doc if t != "."]
    assert flat == [w for msg in m.messages for w in msg.words()]


def test_build_mlm_corpus_truncates_oversized_message():
    m = make_match("big", rows=[(0, 0, " ".join(f"w{i}" for i in range(30)))])
    docs = build_mlm_corpus([m], SeparatorScheme.PERIOD, 10, tok)
    assert len(docs) == 1 and len(docs[0]) == 10
    with pytest.raises(ConfigError):
        build_mlm_corpus([m], SeparatorScheme.PERIOD, 0, tok)
