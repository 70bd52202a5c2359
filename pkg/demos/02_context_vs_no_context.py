"""
Does conversation context actually help?
========================================

Builds a synthetic corpus where a slice of the toxicity is context
dependent (a benign-looking reply that is only a taunt because of what
preceded it), then trains two tiny classifiers:

  * base: no history, plain period separators, no pretraining
  * ctx:  sender's own history, sender-identity tokens, plus a round of
          masked-language-model pretraining on unlabeled chat

and compares balanced accuracy on the messages where context is the only
signal. Takes well under a minute on CPU. Seeds are fixed, so the numbers
reproduce exactly.
"""

import time

import numpy as np

from chattox import (ContextLevel, EncoderConfig, MaskingConfig, SeparatorScheme,
                     SpecialTokens, SynthConfig, TinyEncoderBackend, TrainConfig,
                     WordTokenizer, balanced_accuracy, class_weights_from_distribution,
                     finetune_classifier, generate_synthetic_corpus, pretrain_dap,
                     predict_batch, special_token_vocabulary, split_dataset)
from chattox.context import assemble_match
from chattox.data import resolve_split
from chattox.masking import build_mlm_corpus
from chattox.metrics import ConfusionCounts
from chattox.training import initial_checkpoint

start = time.perf_counter()

# Planted mechanism: 40% of toxic messages are only toxic in context, and
# the trigger token also shows up in plenty of benign exchanges, so the
# no-context model cannot just memorize the trigger word.
config = SynthConfig(n_matches=240, messages_per_match=12, toxicity_rate=0.1,
                     context_dependent_fraction=0.4, latent_in_benign_prob=0.85)
labeled = generate_synthetic_corpus(config, seed=101)
unlabeled = generate_synthetic_corpus(
    SynthConfig(n_matches=300, messages_per_match=12, toxicity_rate=0.1,
                context_dependent_fraction=0.4, latent_in_benign_prob=0.85,
                labeled=False), seed=202)
train_m, test_m = resolve_split(split_dataset(labeled, 120, 120, seed=0), labeled)

labels = np.array([msg.label for m in test_m for msg in m.messages])
cd = np.array([bool(msg.context_dependent) for m in test_m for msg in m.messages])
keep = (labels == 0) | cd  # benign messages plus context-dependent toxic ones
print(f"test slice: {int(keep.sum())} messages, "
      f"{int((cd & (labels == 1)).sum())} context-dependent toxic")

tokenizer = WordTokenizer.fit(msg.text for m in unlabeled for msg in m.messages)
enc = EncoderConfig(d_model=32, n_layers=2, n_heads=4, d_ff=128, max_len=97, seed=0)
budget = 96
st = SpecialTokens(max_teams=2, max_players=2)

train_labels = [msg.label for m in train_m for msg in m.messages]
weights = tuple(float(w) for w in class_weights_from_distribution(
    np.bincount(np.asarray(train_labels), minlength=2)))
print(f"class weights (benign, toxic): ({weights[0]:.3f}, {weights[1]:.3f})")

# --- context arm ---
ctx_backend = TinyEncoderBackend(tokenizer, enc)
ctx_backend.extend_vocabulary(special_token_vocabulary(2, 2))
docs = build_mlm_corpus(unlabeled, SeparatorScheme.SENDER_TOKENS, budget,
                        tokenizer.tokenize, st)
print(f"pretraining on {len(docs)} rendered documents...")
dap = pretrain_dap(ctx_backend, docs,
                   TrainConfig(learning_rate=5e-4, epochs=3, batch_size=16, seed=0),
                   MaskingConfig(seed=0))
print(f"  mlm loss by epoch: {[round(x, 3) for x in dap.epoch_losses]}")

ctx_train = [ci for m in train_m for ci in assemble_match(
    m, ContextLevel.CURRENT_PLAYER, SeparatorScheme.SENDER_TOKENS, budget,
    tokenizer.tokenize, st)]
ctx_test = [ci for m in test_m for ci in assemble_match(
    m, ContextLevel.CURRENT_PLAYER, SeparatorScheme.SENDER_TOKENS, budget,
    tokenizer.tokenize, st)]

# --- base arm: same encoder size, no history, no pretraining ---
base_ckpt = initial_checkpoint(TinyEncoderBackend(tokenizer, enc))
base_train = [ci for m in train_m for ci in assemble_match(
    m, ContextLevel.NONE, SeparatorScheme.PERIOD, budget, tokenizer.tokenize, st)]
base_test = [ci for m in test_m for ci in assemble_match(
    m, ContextLevel.NONE, SeparatorScheme.PERIOD, budget, tokenizer.tokenize, st)]


def slice_ba(scores):
    preds = (scores[keep] > 0.5).astype(np.int64)
    return balanced_accuracy(ConfusionCounts.from_predictions(labels[keep], preds))


print("finetuning both arms over 2 seeds...")
gaps = []
for seed in (500, 501):
    cfg = TrainConfig(learning_rate=1e-3, epochs=3, batch_size=32, seed=seed,
                      class_weights=weights)
    ctx_ba = slice_ba(predict_batch(
        finetune_classifier(dap.checkpoint, ctx_train, cfg).checkpoints[-1], ctx_test))
    base_ba = slice_ba(predict_batch(
        finetune_classifier(base_ckpt, base_train, cfg).checkpoints[-1], base_test))
    gaps.append(ctx_ba - base_ba)
    print(f"  seed {seed}: ctx {ctx_ba:.3f}  base {base_ba:.3f}  gap {ctx_ba - base_ba:+.3f}")

print(f"mean gap on the context-dependent slice: {np.mean(gaps):+.3f} "
      f"({time.perf_counter() - start:.0f}s)")

# The base model is stuck near chance on this slice: without history the
# evaluated text is indistinguishable from benign chatter. The context arm
# separates the two because the trigger is visible in its input window.
