"""Context-aware, proactive toxicity detection for multiplayer game chat.

The package covers the full pipeline: canonical corpus handling and
importers, synthetic corpora with planted context-dependent toxicity,
context-window assembly, domain-adaptive masked-language-model pretraining,
cost-sensitive finetuning under a repeated-run protocol, evaluation and
reporting, and player-level propensity scoring.
"""

__version__ = "0.1.0"

from .context import (ContextLevel, ContextualInput, SeparatorScheme, SpecialTokens,
                      assemble, assemble_match, build_sender_map,
                      special_token_vocabulary)
from .data import (ChatMessage, CorpusStats, DatasetSplit, Match, corpus_stats,
                   filter_matches_mwiii_style, load_matches, parse_matches,
                   save_matches, split_dataset)
from .encoder import EncoderConfig, TinyEncoderBackend, WordTokenizer
from .experiment import ExperimentConfig, run_evaluate, run_pretrain, run_propensity, run_report, run_sweep
from .masking import IGNORE_INDEX, MaskingConfig, TokenRegistry, build_mlm_corpus, mask_sequence, register_special_tokens
from .metrics import (AggregateRow, ConfusionCounts, RunMetrics, aggregate_runs,
                      balanced_accuracy, pabak, precision_recall_f1, roc_auc,
                      select_best)
from .propensity import (PropensityRecord, ThresholdModel, evaluate_propensity,
                         fit_threshold, score_players)
from .synth import (PlayerPoolConfig, SynthConfig, context_free_toxic, contextual_toxic,
                    generate_propensity_corpus, generate_synthetic_corpus)
from .training import (Checkpoint, TrainConfig, class_weights_from_distribution,
                       cosine_lr, finetune_classifier, predict, predict_batch,
                       pretrain_dap, run_repeated)

__all__ = [
    "__version__",
    # context assembly
    "ContextLevel", "ContextualInput", "SeparatorScheme", "SpecialTokens",
    "assemble", "assemble_match", "build_sender_map", "special_token_vocabulary",
    # corpus handling
    "ChatMessage", "CorpusStats", "DatasetSplit", "Match", "corpus_stats",
    "filter_matches_mwiii_style", "load_matches", "parse_matches",
    "save_matches", "split_dataset",
    # encoder
    "EncoderConfig", "TinyEncoderBackend", "WordTokenizer",
    # experiment pipelines
    "ExperimentConfig", "run_evaluate", "run_pretrain", "run_propensity",
    "run_report", "run_sweep",
    # masking
    "IGNORE_INDEX", "MaskingConfig", "TokenRegistry", "build_mlm_corpus",
    "mask_sequence", "register_special_tokens",
    # metrics
    "AggregateRow", "ConfusionCounts", "RunMetrics", "aggregate_runs",
    "balanced_accuracy", "pabak", "precision_recall_f1", "roc_auc", "select_best",
    # propensity
    "PropensityRecord", "ThresholdModel", "evaluate_propensity", "fit_threshold",
    "score_players",
    # synthetic corpora
    "PlayerPoolConfig", "SynthConfig", "context_free_toxic", "contextual_toxic",
    "generate_propensity_corpus", "generate_synthetic_corpus",
    # training
    "Checkpoint", "TrainConfig", "class_weights_from_distribution", "cosine_lr",
    "finetune_classifier", "predict", "predict_batch", "pretrain_dap",
    "run_repeated",
]
