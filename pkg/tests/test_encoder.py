"""Tokenizer and encoder backend: determinism, persistence, vocabulary growth."""

import numpy as np
import pytest
import torch

from chattox.context import ContextLevel, SeparatorScheme, assemble
from chattox.encoder import EncoderConfig, TinyEncoderBackend, WordTokenizer, pad_batch
from chattox.errors import ConfigError, RegistrationError
from conftest import make_match

TINY = EncoderConfig(d_model=16, n_layers=1, n_heads=2, d_ff=32, max_len=32,
                     dropout=0.0, seed=0)


def make_backend(extra_texts=(), config=TINY):
    texts = ["gl hf all", "push mid now", "they have dust", "gg wp"] + list(extra_texts)
    return TinyEncoderBackend(WordTokenizer.fit(texts), config)


# --- tokenizer ---

def test_fit_header_and_ranking():
    tk = WordTokenizer.fit(["b b b a a c", "a"])
    assert [tk.token_of(i) for i in range(5)] == ["[PAD]", "[UNK]", "[CLS]", "[MASK]", "."]
    # a (3) before b (3) by the lexicographic tie-break, then c (1)
    assert tk.encode("a b c") == [5, 6, 7]


def test_fit_min_count_and_max_size():
    tk = WordTokenizer.fit(["a a b"], min_count=2)
    assert tk.id_of("a") is not None and tk.id_of("b") is None
    tk = WordTokenizer.fit(["a a b"], max_size=6)
    assert tk.vocab_size == 6
    with pytest.raises(ConfigError):
        WordTokenizer.fit(["a"], max_size=3)


def test_unknown_words_map_to_unk():
    tk = WordTokenizer.fit(["hello world"])
    assert tk.encode("hello unseen") == [tk.id_of("hello"), tk.unk_id]


def test_tokenizer_json_roundtrip():
    tk = WordTokenizer.fit(["x y z"])
    back = WordTokenizer.from_json(tk.to_json())
    assert back.encode("x y q") == tk.encode("x y q")
    assert back.vocab_size == tk.vocab_size


def test_add_tokens_appends_and_rejects_duplicates():
    tk = WordTokenizer.fit(["x"])
    base = tk.vocab_size
    assert tk.add_tokens(["[MSG]", "[TEAM0]"]) == [base, base + 1]
    with pytest.raises(RegistrationError):
        tk.add_tokens(["[MSG]"])


def test_vocab_must_start_with_specials():
    with pytest.raises(ConfigError):
        WordTokenizer(["a", "b", "c", "d"])


def test_pad_batch():
    out = pad_batch([[2, 5], [2, 6, 7, 8]], pad_id=0)
    assert out.shape == (2, 4)
    assert out[0].tolist() == [2, 5, 0, 0]


# --- backend ---

def test_backend_seeded_build_is_deterministic():
    a, b = make_backend(), make_backend()
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb
        assert torch.equal(va, vb)


def test_encode_document_prepends_cls():
    backend = make_backend()
    ids = backend.encode_document(["gl", "hf"])
    assert ids[0] == backend.tokenizer.cls_id
    assert len(ids) == 3


def test_encode_contextual_includes_prefixes():
    backend = make_backend()
    backend.extend_vocabulary(["[TEAM0]", "[TEAM1]", "[PLAYER0]", "[PLAYER1]"])
    m = make_match()
    ci = assemble(m, 3, ContextLevel.ALL_PLAYERS, SeparatorScheme.SENDER_TOKENS, 30,
                  backend.token_strings)
    ids = backend.encode_contextual(ci)
    assert ids[0] == backend.tokenizer.cls_id
    assert ids[1] == backend.tokenizer.id_of("[TEAM0]")
    # every id is real: the special prefixes must not fall back to [UNK]
    assert backend.tokenizer.unk_id not in ids[1:3]


def test_encode_length_guard():
    backend = make_backend()
    with pytest.raises(ConfigError, match="max_len"):
        backend.encode_document(["w"] * TINY.max_len)


def test_extend_vocabulary_preserves_rows_bit_for_bit():
    backend = make_backend()
    before = backend.model.tok_emb.weight.detach().clone()
    old_size = backend.vocab_size
    new_ids = backend.extend_vocabulary(["[MSG]", "[TEAM0]"])
    after = backend.model.tok_emb.weight.detach()
    assert new_ids == [old_size, old_size + 1]
    assert torch.equal(after[:old_size], before)
    assert after.shape[0] == old_size + 2
    # bias rows for new tokens start at zero
    assert torch.equal(backend.model.mlm_bias.detach()[old_size:],
                       torch.zeros(2))
    # registry and tokenizer agree on the new ids
    assert backend.registry.added_token_ids() == {"[MSG]": old_size, "[TEAM0]": old_size + 1}
    assert backend.tokenizer.id_of("[TEAM0]") == old_size + 1


def test_extend_vocabulary_new_rows_are_seed_deterministic():
    a, b = make_backend(), make_backend()
    a.extend_vocabulary(["[MSG]"])
    b.extend_vocabulary(["[MSG]"])
    assert torch.equal(a.model.tok_emb.weight, b.model.tok_emb.weight)


def test_extend_vocabulary_rejects_known_token():
    backend = make_backend()
    with pytest.raises(RegistrationError):
        backend.extend_vocabulary(["gl"])


def test_classify_logits_batching_consistent():
    backend = make_backend()
    m = make_match()
    inputs = [assemble(m, i, ContextLevel.NONE, SeparatorScheme.PERIOD, 30,
                       backend.token_strings) for i in range(4)]
    full = backend.classify_logits(inputs, batch_size=64)
    tiny = backend.classify_logits(inputs, batch_size=1)
    assert full.shape == (4, 2)
    np.testing.assert_allclose(full, tiny, atol=1e-5)


def test_save_load_roundtrip(tmp_path):
    backend = make_backend()
    backend.extend_vocabulary(["[MSG]"])
    m = make_match()
    inputs = [assemble(m, i, ContextLevel.NONE, SeparatorScheme.PERIOD, 30,
                       backend.token_strings) for i in range(4)]
    want = backend.classify_logits(inputs)
    backend.save(tmp_path / "enc")
    again = TinyEncoderBackend.load(tmp_path / "enc")
    np.testing.assert_array_equal(again.classify_logits(inputs), want)
    assert again.registry == backend.registry
    assert again.vocab_size == backend.vocab_size


def test_reinit_classifier_head_touches_only_the_head():
    backend = make_backend()
    emb_before = backend.model.tok_emb.weight.detach().clone()
    head_before = backend.model.cls_head.weight.detach().clone()
    backend.reinit_classifier_head(seed=7)
    assert torch.equal(backend.model.tok_emb.weight.detach(), emb_before)
    assert not torch.equal(backend.model.cls_head.weight.detach(), head_before)
    assert torch.equal(backend.model.cls_head.bias.detach(),
                       torch.zeros_like(backend.model.cls_head.bias))
    # same seed, same head
    other = make_backend()
    other.reinit_classifier_head(seed=7)
    assert torch.equal(other.model.cls_head.weight.detach(),
                       backend.model.cls_head.weight.detach())


def test_state_dict_is_detached_copy():
    backend = make_backend()
    state = backend.state_dict()
    state["mlm_bias"].add_(1.0)
    assert float(backend.model.mlm_bias.detach()[0]) == 0.0


def test_mlm_step_all_ignored_is_noop():
    backend = make_backend()
    ids = pad_batch([backend.encode_document(["gl", "hf"])])
    labels = torch.full_like(ids, -100)
    before = backend.state_dict()
    assert backend.mlm_step(ids, labels, lr=1e-3) == 0.0
    after = backend.state_dict()
    assert all(torch.equal(before[k], after[k]) for k in before)


def test_training_steps_reduce_loss():
    backend = make_backend()
    doc = backend.encode_document(["gl", "hf", "all", "push", "mid"])
    ids = pad_batch([doc])
    labels = ids.clone()
    labels[:, 0] = -100  # never predict [CLS]
    first = backend.mlm_step(ids, labels, lr=1e-2)
    for _ in range(20):
        last = backend.mlm_step(ids, labels, lr=1e-2)
    assert last < first
