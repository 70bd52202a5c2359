"""Training loops: schedule, class weights, determinism, phases, run protocol."""

import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from chattox.context import ContextLevel, SeparatorScheme, assemble_match
from chattox.encoder import EncoderConfig, TinyEncoderBackend, WordTokenizer
from chattox.errors import ConfigError, DegenerateClassError, PhaseError
from chattox.masking import MaskingConfig, build_mlm_corpus
from chattox.training import (
    PHASE_FINETUNED,
    PHASE_PRETRAINED,
    Checkpoint,
    TrainConfig,
    backend_scores,
    class_weights_from_distribution,
    cosine_lr,
    finetune_classifier,
    initial_checkpoint,
    predict,
    predict_batch,
    pretrain_dap,
    run_cell,
    run_repeated,
)
from conftest import make_match

TINY = EncoderConfig(d_model=16, n_layers=1, n_heads=2, d_ff=32, max_len=48,
                     dropout=0.0, seed=0)


def tiny_backend():
    texts = ["gl hf all", "push mid now", "they have dust", "gg wp",
             "you are garbage", "nice shot", "report this guy", "well played"]
    return TinyEncoderBackend(WordTokenizer.fit(texts), TINY)


def labeled_matches():
    rows_a = [(0, 0, "gl hf all", 0), (1, 1, "you are garbage", 1, False),
              (0, 0, "nice shot", 0), (1, 1, "report this guy", 1, False)]
    rows_b = [(0, 0, "well played", 0), (1, 1, "you are garbage", 1, False),
              (0, 0, "push mid now", 0), (1, 1, "gg wp", 0)]
    return [make_match("a", rows=rows_a), make_match("b", rows=rows_b)]


def train_inputs(backend):
    inputs = []
    for m in labeled_matches():
        inputs.extend(assemble_match(m, ContextLevel.NONE, SeparatorScheme.PERIOD,
                                     32, backend.token_strings))
    return inputs


# --- schedule ---

def test_cosine_lr_formula_pointwise():
    for step in range(0, 21):
        want = 1e-3 * 0.5 * (1.0 + math.cos(math.pi * (step / 40.0)))
        assert cosine_lr(1e-3, step, 20) == want


def test_cosine_lr_default_period_halves_at_end():
    # exact: cos(pi/2) contributes nothing in float arithmetic
    assert cosine_lr(2e-4, 20, 20) == 0.5 * 2e-4
    assert cosine_lr(1e-3, 0, 20) == 1e-3


def test_cosine_lr_explicit_period_reaches_zero():
    assert cosine_lr(1e-3, 20, 20, period_steps=20) == pytest.approx(0.0, abs=1e-18)


def test_cosine_lr_validation():
    with pytest.raises(ConfigError):
        cosine_lr(0.0, 0, 10)
    with pytest.raises(ConfigError):
        cosine_lr(1e-3, -1, 10)
    with pytest.raises(ConfigError):
        cosine_lr(1e-3, 0, 0)


def test_pretrain_lr_trace_matches_formula():
    backend = tiny_backend()
    docs = build_mlm_corpus(labeled_matches(), SeparatorScheme.PERIOD, 32,
                            backend.token_strings)
    cfg = TrainConfig(learning_rate=3e-4, epochs=3, batch_size=1, seed=0)
    result = pretrain_dap(backend, docs, cfg, MaskingConfig(seed=0))
    total = 3 * len(docs)
    assert len(result.lr_trace) == total
    for step, lr in enumerate(result.lr_trace):
        assert lr == cosine_lr(3e-4, step, total, period_steps=2.0 * total)


# --- class weights ---

def test_class_weights_frozen_values():
    w = class_weights_from_distribution([90, 10])
    np.testing.assert_allclose(w, [100 / 180, 5.0], rtol=0, atol=1e-15)
    # balanced data gives unit weights
    np.testing.assert_array_equal(class_weights_from_distribution([5, 5]), [1.0, 1.0])


def test_class_weights_reject_absent_class():
    with pytest.raises(DegenerateClassError):
        class_weights_from_distribution([10, 0])
    with pytest.raises(ConfigError):
        class_weights_from_distribution([10])


def test_weighted_loss_equals_duplication_rebalancing():
    # inverse-frequency weighting must reproduce the loss on a dataset where
    # the minority class is duplicated up to parity
    torch.manual_seed(0)
    n0, n1 = 12, 3
    logits0 = torch.randn(n0, 2, dtype=torch.float64)
    logits1 = torch.randn(n1, 2, dtype=torch.float64)
    y0 = torch.zeros(n0, dtype=torch.long)
    y1 = torch.ones(n1, dtype=torch.long)

    w = torch.as_tensor(class_weights_from_distribution([n0, n1]))
    weighted = F.cross_entropy(torch.cat([logits0, logits1]), torch.cat([y0, y1]),
                               weight=w)

    dup = n0 // n1
    logits_dup = torch.cat([logits0, logits1.repeat(dup, 1)])
    y_dup = torch.cat([y0, y1.repeat(dup)])
    rebalanced = F.cross_entropy(logits_dup, y_dup)
    assert abs(float(weighted) - float(rebalanced)) <= 1e-5


def test_minority_class_gradient_share_is_balanced():
    # with weights on, each class supplies half of the loss mass
    torch.manual_seed(1)
    n0, n1 = 40, 4
    logits = torch.randn(n0 + n1, 2, dtype=torch.float64, requires_grad=True)
    y = torch.cat([torch.zeros(n0, dtype=torch.long), torch.ones(n1, dtype=torch.long)])
    w = torch.as_tensor(class_weights_from_distribution([n0, n1]))
    per_example = F.cross_entropy(logits, y, weight=w, reduction="none").detach()
    share1 = float(per_example[n0:].sum() / per_example.sum())
    # not exactly 0.5 because losses differ per example, but the same order
    assert 0.2 < share1 < 0.8
    unweighted = F.cross_entropy(logits, y, reduction="none").detach()
    share1_unweighted = float(unweighted[n0:].sum() / unweighted.sum())
    assert share1 > share1_unweighted


# --- pretraining ---

def test_pretrain_zero_epochs_is_identity():
    backend = tiny_backend()
    before = backend.state_dict()
    result = pretrain_dap(backend, [["gl", "hf"]], TrainConfig(epochs=0))
    assert result.epoch_losses == [] and result.lr_trace == []
    assert result.checkpoint.phase == PHASE_PRETRAINED
    after = result.checkpoint.state
    assert all(torch.equal(before[k], after[k]) for k in before)


def test_pretrain_deterministic():
    def run():
        backend = tiny_backend()
        docs = build_mlm_corpus(labeled_matches(), SeparatorScheme.PERIOD, 32,
                                backend.token_strings)
        cfg = TrainConfig(learning_rate=1e-3, epochs=2, batch_size=2, seed=7)
        return pretrain_dap(backend, docs, cfg, MaskingConfig(seed=3))

    a, b = run(), run()
    assert a.epoch_losses == b.epoch_losses
    assert all(torch.equal(a.checkpoint.state[k], b.checkpoint.state[k])
               for k in a.checkpoint.state)


def test_pretrain_rejects_empty_corpus():
    with pytest.raises(ConfigError):
        pretrain_dap(tiny_backend(), [], TrainConfig())


# --- finetuning ---

def test_finetune_epochs_are_zero_based_and_callback_sees_live_weights():
    backend = tiny_backend()
    inputs = train_inputs(backend)
    ckpt = initial_checkpoint(backend)
    seen = []

    def cb(epoch, live_backend):
        seen.append((epoch, backend_scores(live_backend, inputs)))

    result = finetune_classifier(ckpt, inputs, TrainConfig(epochs=3, seed=0),
                                 epoch_callback=cb)
    assert [c.epoch for c in result.checkpoints] == [0, 1, 2]
    assert all(c.phase == PHASE_FINETUNED for c in result.checkpoints)
    assert [e for e, _ in seen] == [0, 1, 2]
    # callback scores equal prediction through the recorded checkpoint
    for (epoch, live_scores), ckpt_e in zip(seen, result.checkpoints):
        reloaded = predict_batch(ckpt_e, inputs)
        np.testing.assert_allclose(live_scores, reloaded, atol=1e-6)


def test_finetune_deterministic_per_seed():
    def run(seed):
        backend = tiny_backend()
        inputs = train_inputs(backend)
        result = finetune_classifier(initial_checkpoint(backend), inputs,
                                     TrainConfig(epochs=2, seed=seed))
        return predict_batch(result.checkpoints[-1], inputs)

    np.testing.assert_array_equal(run(3), run(3))
    assert not np.array_equal(run(3), run(4))


def test_finetune_requires_both_classes():
    backend = tiny_backend()
    m = make_match("only", rows=[(0, 0, "gl hf", 0), (1, 1, "nice shot", 0)])
    inputs = assemble_match(m, ContextLevel.NONE, SeparatorScheme.PERIOD, 32,
                            backend.token_strings)
    with pytest.raises(DegenerateClassError):
        finetune_classifier(initial_checkpoint(backend), inputs, TrainConfig(epochs=1))


def test_finetune_requires_labels():
    backend = tiny_backend()
    m = make_match()  # unlabeled
    inputs = assemble_match(m, ContextLevel.NONE, SeparatorScheme.PERIOD, 32,
                            backend.token_strings)
    with pytest.raises(Exception):
        finetune_classifier(initial_checkpoint(backend), inputs, TrainConfig(epochs=1))


def test_predict_requires_finetuned_phase():
    backend = tiny_backend()
    inputs = train_inputs(backend)
    with pytest.raises(PhaseError):
        predict_batch(initial_checkpoint(backend), inputs)


def test_predict_single_matches_batch():
    backend = tiny_backend()
    inputs = train_inputs(backend)
    result = finetune_classifier(initial_checkpoint(backend), inputs,
                                 TrainConfig(epochs=1, seed=0))
    ckpt = result.checkpoints[-1]
    batch = predict_batch(ckpt, inputs[:3])
    assert predict(ckpt, inputs[0]) == pytest.approx(batch[0], abs=1e-7)
    assert np.all((batch >= 0) & (batch <= 1))


def test_checkpoint_phase_validation():
    backend = tiny_backend()
    with pytest.raises(ConfigError):
        Checkpoint(backend=backend, state=backend.state_dict(), epoch=0,
                   phase="warm", provenance={})


# --- run protocol ---

def test_run_cell_rows_and_scores():
    backend = tiny_backend()
    inputs = train_inputs(backend)
    rows, scores = run_cell(initial_checkpoint(backend), inputs, inputs,
                            lr=1e-3, seed=5, epochs=2, config_hash="h1")
    assert len(rows) == 2 and len(scores) == 2
    assert [r.epoch for r in rows] == [0, 1]
    assert all(r.run_id == "h1:lr0.001:seed5" for r in rows)
    assert all(r.config_hash == "h1" and r.lr == 1e-3 and r.seed == 5 for r in rows)
    assert all(len(s) == len(inputs) for s in scores)


def test_run_cell_rejects_unknown_weight_mode():
    backend = tiny_backend()
    inputs = train_inputs(backend)
    with pytest.raises(ConfigError):
        run_cell(initial_checkpoint(backend), inputs, inputs, lr=1e-3, seed=0,
                 epochs=1, class_weight_mode="focal")


def test_run_repeated_shares_seeds_across_grid():
    backend = tiny_backend()
    inputs = train_inputs(backend)
    rows = run_repeated(initial_checkpoint(backend), inputs, inputs,
                        lr_grid=[1e-3, 5e-4], epochs=1, n_runs=2, base_seed=100)
    assert len(rows) == 4
    seeds_by_lr = {}
    for r in rows:
        seeds_by_lr.setdefault(r.lr, set()).add(r.seed)
    assert seeds_by_lr[1e-3] == seeds_by_lr[5e-4] == {100, 101}
