"""Pretraining, finetuning and the repeated-run protocol.

Domain-adaptive pretraining continues masked-language-model training on
in-domain chat documents. Finetuning attaches the classification objective
with inverse-frequency class weights so the rare toxic class contributes as
much gradient as the majority class. Both phases share a cosine learning
rate schedule whose period defaults to twice the total step count, so the
rate decays to half its initial value by the final step instead of reaching
zero.

The repeated-run protocol keeps the dataset split fixed and re-runs
finetuning under fresh seeds (data order, head initialization, dropout),
recording test metrics after every epoch; aggregation and model selection
over those records live in `metrics`.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .context import ContextualInput
from .encoder import TinyEncoderBackend, pad_batch
from .errors import ConfigError, DegenerateClassError, PhaseError, ValidationError
from .masking import MaskingConfig, derive_seed, mask_sequence, IGNORE_INDEX
from .metrics import RunMetrics, score_metrics

logger = logging.getLogger(__name__)

PHASE_PRETRAINED = "pretrained"
PHASE_FINETUNED = "finetuned"


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    period_factor: float = 2.0
    class_weights: tuple[float, ...] | None = None

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be non-negative, got {self.epochs}")
        if self.batch_size <= 0:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.period_factor <= 0:
            raise ConfigError(f"period_factor must be positive, got {self.period_factor}")


@dataclass
class Checkpoint:
    """A model state plus where it came from.

    `phase` distinguishes checkpoints that only saw masked-language-model
    training from ones carrying a trained classification head; prediction is
    only allowed on the latter.
    """

    backend: TinyEncoderBackend
    state: dict
    epoch: int
    phase: str
    provenance: dict

    def __post_init__(self) -> None:
        if self.phase not in (PHASE_PRETRAINED, PHASE_FINETUNED):
            raise ConfigError(f"unknown checkpoint phase {self.phase!r}")


def initial_checkpoint(backend: TinyEncoderBackend, provenance: dict | None = None) -> Checkpoint:
    return Checkpoint(backend=backend, state=backend.state_dict(), epoch=0,
                      phase=PHASE_PRETRAINED, provenance=provenance or {})


def class_weights_from_distribution(counts: Sequence[int]) -> np.ndarray:
    """Inverse-frequency weights w_c = N / (K * n_c).

    With these weights every class contributes the same total to a
    weighted-mean loss, matching what duplicating minority examples up to
    parity would achieve. Raises when any class is absent.
    """
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1 or len(counts) < 2:
        raise ConfigError(f"need one count per class, got shape {counts.shape}")
    if np.any(counts <= 0):
        raise DegenerateClassError(f"class absent from training data: counts {counts.tolist()}")
    total = counts.sum()
    return total / (len(counts) * counts)


def cosine_lr(initial_lr: float, step: int, total_steps: int,
              period_steps: float | None = None) -> float:
    """Cosine schedule: initial_lr * 0.5 * (1 + cos(pi * step / period)).

    The period defaults to 2 * total_steps, so over a full run the rate
    sweeps only the first quarter cosine wave and ends at exactly half the
    initial rate rather than annealing to zero.
    """
    if initial_lr <= 0:
        raise ConfigError(f"initial_lr must be positive, got {initial_lr}")
    if total_steps <= 0:
        raise ConfigError(f"total_steps must be positive, got {total_steps}")
    if step < 0:
        raise ConfigError(f"step must be non-negative, got {step}")
    period = 2.0 * total_steps if period_steps is None else float(period_steps)
    if period <= 0:
        raise ConfigError(f"period_steps must be positive, got {period}")
    # dividing first keeps the half-period endpoint exact: step/period == 0.5
    # gives cos(pi/2) whose tiny residual vanishes in the 1 + cos sum
    factor = 0.5 * (1.0 + math.cos(math.pi * (step / period)))
    return initial_lr * factor


def _batches(order: np.ndarray, batch_size: int):
    for start in range(0, len(order), batch_size):
        yield order[start:start + batch_size]


@dataclass
class DapResult:
    checkpoint: Checkpoint
    epoch_losses: list[float]
    lr_trace: list[float]


def pretrain_dap(backend: TinyEncoderBackend, documents: Sequence[Sequence[str]],
                 config: TrainConfig, masking: MaskingConfig | None = None) -> DapResult:
    """Run masked-language-model pretraining over rendered documents.

    Deterministic given (config.seed, masking.seed): document order is drawn
    from a seeded generator and each document's corruption uses a seed
    derived from (masking.seed, epoch, document index). With epochs=0 the
    returned checkpoint is the backend's current state, untouched.
    """
    config.validate()
    masking = masking or MaskingConfig()
    masking.validate()
    if not documents:
        raise ConfigError("empty pretraining corpus")

    provenance = {"seed": config.seed, "epochs": config.epochs,
                  "learning_rate": config.learning_rate}
    if config.epochs == 0:
        return DapResult(checkpoint=Checkpoint(backend=backend, state=backend.state_dict(),
                                               epoch=0, phase=PHASE_PRETRAINED,
                                               provenance=provenance),
                         epoch_losses=[], lr_trace=[])

    encoded = [np.array(backend.encode_document(doc), dtype=np.int64) for doc in documents]
    rng = np.random.default_rng(derive_seed(config.seed, "dap-order"))
    torch.manual_seed(derive_seed(config.seed, "dap-torch") % (2**63))

    steps_per_epoch = math.ceil(len(encoded) / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    period = config.period_factor * total_steps

    epoch_losses = []
    lr_trace = []
    global_step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(encoded))
        batch_losses = []
        for batch in _batches(order, config.batch_size):
            corrupted_rows = []
            target_rows = []
            for doc_idx in batch:
                corrupted, targets = mask_sequence(
                    encoded[doc_idx], backend.registry, masking,
                    seed=derive_seed(masking.seed, epoch, int(doc_idx)))
                corrupted_rows.append(corrupted.tolist())
                target_rows.append(targets.tolist())
            input_ids = pad_batch(corrupted_rows, backend.tokenizer.pad_id)
            labels = pad_batch(target_rows, IGNORE_INDEX)
            lr = cosine_lr(config.learning_rate, global_step, total_steps, period)
            batch_losses.append(backend.mlm_step(input_ids, labels, lr))
            lr_trace.append(lr)
            global_step += 1
        epoch_losses.append(float(np.mean(batch_losses)))
        logger.info("dap epoch %d/%d loss %.4f", epoch + 1, config.epochs, epoch_losses[-1])

    checkpoint = Checkpoint(backend=backend, state=backend.state_dict(),
                            epoch=config.epochs, phase=PHASE_PRETRAINED,
                            provenance=provenance)
    return DapResult(checkpoint=checkpoint, epoch_losses=epoch_losses, lr_trace=lr_trace)


@dataclass
class FinetuneResult:
    checkpoints: list[Checkpoint]
    epoch_losses: list[float]
    lr_trace: list[float]


def _labels_of(inputs: Sequence[ContextualInput]) -> np.ndarray:
    labels = [ci.label for ci in inputs]
    if any(label is None for label in labels):
        raise ValidationError("all inputs must carry labels")
    return np.asarray(labels, dtype=np.int64)


EpochCallback = Callable[[int, TinyEncoderBackend], None]


def finetune_classifier(checkpoint: Checkpoint, train_inputs: Sequence[ContextualInput],
                        config: TrainConfig,
                        epoch_callback: EpochCallback | None = None) -> FinetuneResult:
    """Finetune the classification head (and body) from a checkpoint.

    The run seed governs everything that varies between repeated runs: the
    fresh head initialization, the per-epoch data order and dropout. One
    checkpoint is recorded after each epoch (epoch numbers are 0-based);
    `epoch_callback(epoch, backend)` fires at the same points so callers can
    evaluate without reloading state mid-run.
    """
    config.validate()
    if not train_inputs:
        raise ConfigError("empty training set")
    labels = _labels_of(train_inputs)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise DegenerateClassError(f"training set contains a single class {classes.tolist()}")

    backend = checkpoint.backend
    backend.load_state_dict(checkpoint.state)
    backend.reinit_classifier_head(derive_seed(config.seed, "head") % (2**63))
    torch.manual_seed(derive_seed(config.seed, "ft-torch") % (2**63))
    rng = np.random.default_rng(derive_seed(config.seed, "ft-order"))

    encoded = [backend.encode_contextual(ci) for ci in train_inputs]
    n = len(encoded)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    period = config.period_factor * total_steps if total_steps else None

    provenance = dict(checkpoint.provenance)
    provenance.update({"finetune_seed": config.seed, "learning_rate": config.learning_rate})

    checkpoints = []
    epoch_losses = []
    lr_trace = []
    global_step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        batch_losses = []
        for batch in _batches(order, config.batch_size):
            input_ids = pad_batch([encoded[i] for i in batch], backend.tokenizer.pad_id)
            y = torch.as_tensor(labels[batch], dtype=torch.long)
            lr = cosine_lr(config.learning_rate, global_step, total_steps, period)
            batch_losses.append(backend.classifier_step(input_ids, y, lr, config.class_weights))
            lr_trace.append(lr)
            global_step += 1
        epoch_losses.append(float(np.mean(batch_losses)))
        checkpoints.append(Checkpoint(backend=backend, state=backend.state_dict(),
                                      epoch=epoch, phase=PHASE_FINETUNED,
                                      provenance=dict(provenance, epoch=epoch)))
        if epoch_callback is not None:
            epoch_callback(epoch, backend)
    return FinetuneResult(checkpoints=checkpoints, epoch_losses=epoch_losses,
                          lr_trace=lr_trace)


def _positive_probs(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp[:, 1] / exp.sum(axis=1)


def predict_batch(checkpoint: Checkpoint, inputs: Sequence[ContextualInput]) -> np.ndarray:
    """Toxic-class probabilities for assembled inputs under a finetuned checkpoint."""
    if checkpoint.phase != PHASE_FINETUNED:
        raise PhaseError(f"prediction requires a finetuned checkpoint, got phase "
                         f"{checkpoint.phase!r}")
    backend = checkpoint.backend
    backend.load_state_dict(checkpoint.state)
    logits = backend.classify_logits(inputs)
    return _positive_probs(logits)


def predict(checkpoint: Checkpoint, ci: ContextualInput) -> float:
    return float(predict_batch(checkpoint, [ci])[0])


def backend_scores(backend: TinyEncoderBackend, inputs: Sequence[ContextualInput]) -> np.ndarray:
    """Toxic-class probabilities using the backend's live weights."""
    return _positive_probs(backend.classify_logits(inputs))


def run_cell(pretrained: Checkpoint, train_inputs: Sequence[ContextualInput],
             test_inputs: Sequence[ContextualInput], lr: float, seed: int,
             epochs: int, batch_size: int = 32, class_weight_mode: str = "balanced",
             config_hash: str = "", period_factor: float = 2.0,
             decision_threshold: float = 0.5) -> tuple[list[RunMetrics], list[np.ndarray]]:
    """One finetuning run: fixed split, one learning rate, one seed.

    Returns per-epoch metric rows over the test inputs plus the per-epoch
    score vectors (for persistence).
    """
    if class_weight_mode not in ("balanced", "none"):
        raise ConfigError(f"unknown class_weight_mode {class_weight_mode!r}")
    train_labels = _labels_of(train_inputs)
    test_labels = _labels_of(test_inputs)
    weights = None
    if class_weight_mode == "balanced":
        counts = np.bincount(train_labels, minlength=2)
        weights = tuple(float(w) for w in class_weights_from_distribution(counts))

    config = TrainConfig(learning_rate=lr, epochs=epochs, batch_size=batch_size,
                         seed=seed, period_factor=period_factor, class_weights=weights)
    rows: list[RunMetrics] = []
    scores_by_epoch: list[np.ndarray] = []
    run_id = f"{config_hash or 'cell'}:lr{lr:g}:seed{seed}"

    def on_epoch(epoch: int, backend: TinyEncoderBackend) -> None:
        scores = backend_scores(backend, test_inputs)
        values = score_metrics(scores, test_labels, threshold=decision_threshold)
        scores_by_epoch.append(scores)
        rows.append(RunMetrics(run_id=run_id, config_hash=config_hash, seed=seed,
                               epoch=epoch, lr=lr, **values))

    finetune_classifier(pretrained, train_inputs, config, epoch_callback=on_epoch)
    return rows, scores_by_epoch


def run_repeated(pretrained: Checkpoint, train_inputs: Sequence[ContextualInput],
                 test_inputs: Sequence[ContextualInput], lr_grid: Sequence[float],
                 epochs: int, n_runs: int = 10, batch_size: int = 32,
                 base_seed: int = 0, class_weight_mode: str = "balanced",
                 config_hash: str = "", period_factor: float = 2.0) -> list[RunMetrics]:
    """Full grid of learning rates x repeated seeded runs on one fixed split.

    Run k (0-based) uses seed base_seed + k for every learning rate, so the
    grid shares its seed set and rows aggregate cleanly by (lr, epoch).
    """
    if n_runs <= 0:
        raise ConfigError(f"n_runs must be positive, got {n_runs}")
    if not lr_grid:
        raise ConfigError("empty learning-rate grid")
    rows: list[RunMetrics] = []
    for lr in lr_grid:
        for k in range(n_runs):
            seed = base_seed + k
            cell_rows, _ = run_cell(pretrained, train_inputs, test_inputs, lr=lr,
                                    seed=seed, epochs=epochs, batch_size=batch_size,
                                    class_weight_mode=class_weight_mode,
                                    config_hash=config_hash, period_factor=period_factor)
            rows.extend(cell_rows)
            logger.info("run lr=%g seed=%d done (%d epochs)", lr, seed, epochs)
    return rows
