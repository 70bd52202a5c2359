"""Experiment configuration and end-to-end pipelines.

One JSON-serializable configuration drives every stage: pretraining on
unlabeled matches, the repeated finetuning sweep over a learning-rate grid,
reporting, standalone evaluation and propensity scoring. Run artifacts land
under `output_dir/experiment_id/` with per-cell completion markers so an
interrupted sweep resumes instead of recomputing, and a manifest records the
configuration, split hash and code version for provenance.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from multiprocessing import get_context
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__ as code_version
from .context import (ContextLevel, ContextualInput, SeparatorScheme, SpecialTokens,
                      assemble, special_token_vocabulary)
from .data import Match, load_matches, resolve_split, split_dataset
from .encoder import EncoderConfig, TinyEncoderBackend, WordTokenizer
from .errors import ConfigError, PhaseError, CoverageError
from .masking import MaskingConfig, build_mlm_corpus
from .metrics import (AggregateRow, RunMetrics, aggregate_runs, read_metrics_log,
                      score_metrics, select_best, write_metrics_log)
from .propensity import (evaluate_propensity, fit_threshold,
                         player_keys_of, score_players, write_propensity_table)
from .reporting import Report, build_report, write_report_files
from .training import (TrainConfig, backend_scores, finetune_classifier,
                       initial_checkpoint, pretrain_dap, run_cell)

logger = logging.getLogger(__name__)

VARIANTS = ("base", "dap", "dap_sep", "dap_sender")
VARIANT_SCHEME = {"dap": "period", "dap_sep": "neutral_sep", "dap_sender": "sender_tokens"}

WORKERS_ENV = "CHATTOX_WORKERS"
DETERMINISTIC_ENV = "CHATTOX_DETERMINISTIC"

_DEFAULT_SPLIT = {"n_train": 100, "n_test": 100, "seed": 0}
_DEFAULT_MASKING = {"select_prob": 0.15, "mask_frac": 0.8, "random_frac": 0.1,
                    "keep_frac": 0.1, "seed": 0}
_DEFAULT_ENCODER = {"d_model": 96, "n_layers": 4, "n_heads": 4, "d_ff": 384,
                    "max_len": 0, "dropout": 0.1, "weight_decay": 0.01, "seed": 0}
_DEFAULT_PATHS = {"labeled": None, "unlabeled": None}


@dataclass(frozen=True)
class ExperimentConfig:
    experiment_id: str
    output_dir: str
    dataset_paths: dict = field(default_factory=lambda: dict(_DEFAULT_PATHS))
    split: dict = field(default_factory=lambda: dict(_DEFAULT_SPLIT))
    context_level: str = "all_players"
    separator_scheme: str = "sender_tokens"
    pretrained_variant: str = "dap_sender"
    pretrained_dir: str | None = None
    lr_grid: tuple[float, ...] = (5e-6, 1e-5, 2e-5)
    epochs: int = 10
    n_runs: int = 10
    token_budget: int = 256
    masking: dict = field(default_factory=lambda: dict(_DEFAULT_MASKING))
    class_weight_mode: str = "balanced"
    batch_size: int = 32
    base_seed: int = 1000
    pretrain_epochs: int = 10
    pretrain_lr: float = 5e-4
    pretrain_batch_size: int = 16
    encoder: dict = field(default_factory=lambda: dict(_DEFAULT_ENCODER))
    max_teams: int = 2
    max_players: int = 5
    vocab_size: int = 8192
    decision_threshold: float = 0.5
    propensity: dict | None = None

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        merged = dict(raw)
        for key, defaults in (("split", _DEFAULT_SPLIT), ("masking", _DEFAULT_MASKING),
                              ("encoder", _DEFAULT_ENCODER), ("dataset_paths", _DEFAULT_PATHS)):
            section = dict(defaults)
            extra = raw.get(key) or {}
            bad = set(extra) - set(defaults)
            if bad:
                raise ConfigError(f"unknown keys {sorted(bad)} in config section {key!r}")
            section.update(extra)
            merged[key] = section
        if "lr_grid" in merged:
            merged["lr_grid"] = tuple(float(x) for x in merged["lr_grid"])
        cfg = cls(**merged)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc.msg}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return {
            "experiment_id": self.experiment_id,
            "output_dir": self.output_dir,
            "dataset_paths": dict(self.dataset_paths),
            "split": dict(self.split),
            "context_level": self.context_level,
            "separator_scheme": self.separator_scheme,
            "pretrained_variant": self.pretrained_variant,
            "pretrained_dir": self.pretrained_dir,
            "lr_grid": list(self.lr_grid),
            "epochs": self.epochs,
            "n_runs": self.n_runs,
            "token_budget": self.token_budget,
            "masking": dict(self.masking),
            "class_weight_mode": self.class_weight_mode,
            "batch_size": self.batch_size,
            "base_seed": self.base_seed,
            "pretrain_epochs": self.pretrain_epochs,
            "pretrain_lr": self.pretrain_lr,
            "pretrain_batch_size": self.pretrain_batch_size,
            "encoder": dict(self.encoder),
            "max_teams": self.max_teams,
            "max_players": self.max_players,
            "vocab_size": self.vocab_size,
            "decision_threshold": self.decision_threshold,
            "propensity": dict(self.propensity) if self.propensity else None,
        }

    def validate(self) -> None:
        if not self.experiment_id:
            raise ConfigError("experiment_id must be non-empty")
        if not self.output_dir:
            raise ConfigError("output_dir must be non-empty")
        levels = {lvl.value for lvl in ContextLevel}
        if self.context_level not in levels:
            raise ConfigError(f"unknown context_level {self.context_level!r}, "
                              f"expected one of {sorted(levels)}")
        schemes = {s.value for s in SeparatorScheme}
        if self.separator_scheme not in schemes:
            raise ConfigError(f"unknown separator_scheme {self.separator_scheme!r}, "
                              f"expected one of {sorted(schemes)}")
        if self.pretrained_variant not in VARIANTS:
            raise ConfigError(f"unknown pretrained_variant {self.pretrained_variant!r}, "
                              f"expected one of {VARIANTS}")
        expected = VARIANT_SCHEME.get(self.pretrained_variant)
        if expected is not None and expected != self.separator_scheme:
            raise ConfigError(
                f"variant {self.pretrained_variant!r} pretrains with separator scheme "
                f"{expected!r} but config says {self.separator_scheme!r}")
        if not self.lr_grid or any(lr <= 0 for lr in self.lr_grid):
            raise ConfigError(f"lr_grid must hold positive rates, got {self.lr_grid}")
        if self.epochs < 0 or self.pretrain_epochs < 0:
            raise ConfigError("epoch counts must be non-negative")
        if self.n_runs <= 0:
            raise ConfigError(f"n_runs must be positive, got {self.n_runs}")
        if self.token_budget <= 0:
            raise ConfigError(f"token_budget must be positive, got {self.token_budget}")
        if self.class_weight_mode not in ("balanced", "none"):
            raise ConfigError(f"unknown class_weight_mode {self.class_weight_mode!r}")
        if not 0.0 < self.decision_threshold < 1.0:
            raise ConfigError(f"decision_threshold must lie in (0, 1)")
        self.masking_config().validate()

    # -- derived views -------------------------------------------------------

    def level(self) -> ContextLevel:
        return ContextLevel(self.context_level)

    def scheme(self) -> SeparatorScheme:
        return SeparatorScheme(self.separator_scheme)

    def special_tokens(self) -> SpecialTokens:
        return SpecialTokens(max_teams=self.max_teams, max_players=self.max_players)

    def masking_config(self) -> MaskingConfig:
        return MaskingConfig(**self.masking)

    def encoder_config(self) -> EncoderConfig:
        params = dict(_DEFAULT_ENCODER)
        params.update(self.encoder)
        if not params.get("max_len"):
            # room for the classification token on top of the budget
            params["max_len"] = self.token_budget + 1
        return EncoderConfig(**params)

    def config_hash(self) -> str:
        """Hash of the semantic configuration.

        Learning rate, seeds and run counts are excluded: rows are keyed by
        (config_hash, lr, epoch) downstream, and more runs must extend a
        group rather than open a new one. Paths and ids are excluded because
        they describe where things live, not what is computed.
        """
        payload = {
            "split": dict(self.split),
            "context_level": self.context_level,
            "separator_scheme": self.separator_scheme,
            "pretrained_variant": self.pretrained_variant,
            "epochs": self.epochs,
            "token_budget": self.token_budget,
            "masking": dict(self.masking),
            "class_weight_mode": self.class_weight_mode,
            "batch_size": self.batch_size,
            "pretrain_epochs": self.pretrain_epochs,
            "pretrain_lr": self.pretrain_lr,
            "pretrain_batch_size": self.pretrain_batch_size,
            "encoder": dict(self.encoder),
            "max_teams": self.max_teams,
            "max_players": self.max_players,
            "vocab_size": self.vocab_size,
            "decision_threshold": self.decision_threshold,
        }
        canonical = json.dumps(payload, sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]

    def run_dir(self) -> Path:
        return Path(self.output_dir) / self.experiment_id


def atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def env_workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}")


def apply_determinism_mode() -> bool:
    """Honor the determinism env var: single-threaded, deterministic kernels."""
    if os.environ.get(DETERMINISTIC_ENV, "") not in ("1", "true", "yes"):
        return False
    import torch
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    return True


# -- shared pipeline pieces ---------------------------------------------------


def fit_tokenizer(cfg: ExperimentConfig, matches: Sequence[Match]) -> WordTokenizer:
    texts = (msg.text for m in matches for msg in m.messages)
    return WordTokenizer.fit(texts, max_size=cfg.vocab_size)


def build_backend(cfg: ExperimentConfig, tokenizer: WordTokenizer) -> TinyEncoderBackend:
    """Construct the encoder and register whatever special tokens the
    separator scheme needs ('.' is ordinary vocabulary, so PERIOD adds none)."""
    backend = TinyEncoderBackend(tokenizer, cfg.encoder_config())
    scheme = cfg.scheme()
    if scheme is SeparatorScheme.NEUTRAL_SEP:
        backend.extend_vocabulary(["[MSG]"])
    elif scheme is SeparatorScheme.SENDER_TOKENS:
        backend.extend_vocabulary(special_token_vocabulary(cfg.max_teams, cfg.max_players))
    return backend


def assemble_inputs(cfg: ExperimentConfig, matches: Sequence[Match],
                    tokenizer: WordTokenizer) -> list[ContextualInput]:
    st = cfg.special_tokens()
    out = []
    for match in matches:
        for i in range(len(match.messages)):
            out.append(assemble(match, i, cfg.level(), cfg.scheme(), cfg.token_budget,
                                tokenizer.tokenize, st))
    return out


def _load_required(cfg: ExperimentConfig, key: str) -> list[Match]:
    path = cfg.dataset_paths.get(key)
    if not path:
        raise ConfigError(f"this stage needs dataset_paths.{key}")
    return load_matches(path)


# -- pretraining --------------------------------------------------------------


def run_pretrain(cfg: ExperimentConfig) -> Path:
    """Pretrain the configured variant on the unlabeled corpus and save it.

    The saved directory is what `sweep` consumes via `pretrained_dir`.
    """
    if cfg.pretrained_variant == "base":
        raise ConfigError("variant 'base' skips pretraining; run sweep directly")
    matches = _load_required(cfg, "unlabeled")
    tokenizer = fit_tokenizer(cfg, matches)
    backend = build_backend(cfg, tokenizer)
    docs = build_mlm_corpus(matches, cfg.scheme(), cfg.token_budget,
                            tokenizer.tokenize, cfg.special_tokens())
    train_cfg = TrainConfig(learning_rate=cfg.pretrain_lr, epochs=cfg.pretrain_epochs,
                            batch_size=cfg.pretrain_batch_size, seed=cfg.base_seed)
    result = pretrain_dap(backend, docs, train_cfg, cfg.masking_config())

    out_dir = cfg.run_dir() / "pretrained"
    backend.save(out_dir)
    meta = {
        "variant": cfg.pretrained_variant,
        "separator_scheme": cfg.separator_scheme,
        "config_hash": cfg.config_hash(),
        "pretrain_epochs": cfg.pretrain_epochs,
        "epoch_losses": result.epoch_losses,
        "n_documents": len(docs),
        "vocab_size": backend.vocab_size,
        "code_version": code_version,
    }
    atomic_write_text(out_dir / "dap_meta.json", json.dumps(meta, indent=2))
    logger.info("pretrained %s saved to %s (final loss %.4f)", cfg.pretrained_variant,
                out_dir, result.epoch_losses[-1] if result.epoch_losses else float("nan"))
    return out_dir


# -- sweep --------------------------------------------------------------------


def _materialize_model_dir(cfg: ExperimentConfig, run_dir: Path,
                           train_matches: Sequence[Match],
                           unlabeled: Sequence[Match] | None) -> Path:
    if cfg.pretrained_variant != "base":
        if not cfg.pretrained_dir:
            raise ConfigError(
                f"variant {cfg.pretrained_variant!r} needs pretrained_dir pointing at a "
                "saved pretraining run (produce one with the pretrain subcommand)")
        model_dir = Path(cfg.pretrained_dir)
        if not (model_dir / "weights.pt").exists():
            raise ConfigError(f"pretrained_dir {model_dir} holds no saved model")
        return model_dir
    model_dir = run_dir / "base_model"
    if not (model_dir / "weights.pt").exists():
        # the tokenizer may not see test texts; unlabeled data is fair game
        fit_matches = list(unlabeled) if unlabeled else list(train_matches)
        tokenizer = fit_tokenizer(cfg, fit_matches)
        backend = build_backend(cfg, tokenizer)
        backend.save(model_dir)
    return model_dir


def _cell_dir(run_dir: Path, config_hash: str, seed: int, lr: float) -> Path:
    return run_dir / config_hash / str(seed) / f"lr_{lr:g}"


def _write_cell(cell_dir: Path, rows: list[RunMetrics], scores_by_epoch) -> None:
    for epoch, scores in enumerate(scores_by_epoch):
        epoch_dir = cell_dir / f"epoch_{epoch}"
        epoch_dir.mkdir(parents=True, exist_ok=True)
        np.savez(epoch_dir / "predictions.npz", scores=np.asarray(scores))
    payload = "\n".join(json.dumps(r.to_record()) for r in rows) + "\n"
    atomic_write_text(cell_dir / "metrics.jsonl", payload)


def _compute_cell(cfg_dict: dict, lr: float, seed: int, model_dir: str) -> None:
    """Worker entry point: everything reloaded from disk, results written to
    the cell directory (the completion marker is the metrics file)."""
    cfg = ExperimentConfig.from_dict(cfg_dict)
    labeled = _load_required(cfg, "labeled")
    split = split_dataset(labeled, **cfg.split)
    train_m, test_m = resolve_split(split, labeled)
    backend = TinyEncoderBackend.load(model_dir)
    ckpt = initial_checkpoint(backend, provenance={"model_dir": str(model_dir)})
    train_inputs = assemble_inputs(cfg, train_m, backend.tokenizer)
    test_inputs = assemble_inputs(cfg, test_m, backend.tokenizer)
    config_hash = cfg.config_hash()
    rows, scores = run_cell(ckpt, train_inputs, test_inputs, lr=lr, seed=seed,
                            epochs=cfg.epochs, batch_size=cfg.batch_size,
                            class_weight_mode=cfg.class_weight_mode,
                            config_hash=config_hash,
                            decision_threshold=cfg.decision_threshold)
    _write_cell(_cell_dir(cfg.run_dir(), config_hash, seed, lr), rows, scores)


@dataclass
class SweepResult:
    run_dir: Path
    config_hash: str
    rows: list[RunMetrics]
    aggregate: list[AggregateRow]
    best: AggregateRow
    report: Report
    best_model_dir: Path | None


def run_sweep(cfg: ExperimentConfig, workers: int | None = None,
              save_best: bool = True) -> SweepResult:
    """Repeated-run sweep with resumable cells, then aggregation and report.

    A cell is one (learning rate, seed) finetuning run; its completion marker
    is the cell's metrics file, so re-running the sweep recomputes only
    missing cells. Worker count > 1 runs cells in separate processes.
    """
    labeled = _load_required(cfg, "labeled")
    split = split_dataset(labeled, **cfg.split)
    train_m, test_m = resolve_split(split, labeled)
    unlabeled_path = cfg.dataset_paths.get("unlabeled")
    unlabeled = load_matches(unlabeled_path) if unlabeled_path else None

    run_dir = cfg.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    config_hash = cfg.config_hash()
    model_dir = _materialize_model_dir(cfg, run_dir, train_m, unlabeled)

    seeds = [cfg.base_seed + k for k in range(cfg.n_runs)]
    manifest = {
        "experiment_id": cfg.experiment_id,
        "config": cfg.to_dict(),
        "config_hash": config_hash,
        "split_hash": split.split_hash(),
        "seeds": seeds,
        "lr_grid": list(cfg.lr_grid),
        "labels": {config_hash: [cfg.pretrained_variant, cfg.context_level]},
        "model_dir": str(model_dir),
        "code_version": code_version,
    }
    atomic_write_text(run_dir / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True))

    cells = [(lr, seed) for lr in cfg.lr_grid for seed in seeds]
    pending = [(lr, seed) for lr, seed in cells
               if not (_cell_dir(run_dir, config_hash, seed, lr) / "metrics.jsonl").exists()]
    logger.info("sweep %s: %d cells total, %d to compute", cfg.experiment_id,
                len(cells), len(pending))

    workers = env_workers() if workers is None else max(1, workers)
    if pending:
        if workers > 1:
            ctx = get_context("spawn")
            with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
                futures = [pool.submit(_compute_cell, cfg.to_dict(), lr, seed, str(model_dir))
                           for lr, seed in pending]
                for future in futures:
                    future.result()
        else:
            backend = TinyEncoderBackend.load(model_dir)
            ckpt = initial_checkpoint(backend, provenance={"model_dir": str(model_dir)})
            train_inputs = assemble_inputs(cfg, train_m, backend.tokenizer)
            test_inputs = assemble_inputs(cfg, test_m, backend.tokenizer)
            for lr, seed in pending:
                rows, scores = run_cell(ckpt, train_inputs, test_inputs, lr=lr, seed=seed,
                                        epochs=cfg.epochs, batch_size=cfg.batch_size,
                                        class_weight_mode=cfg.class_weight_mode,
                                        config_hash=config_hash,
                                        decision_threshold=cfg.decision_threshold)
                _write_cell(_cell_dir(run_dir, config_hash, seed, lr), rows, scores)
                logger.info("cell lr=%g seed=%d done", lr, seed)

    rows: list[RunMetrics] = []
    for lr, seed in cells:
        rows.extend(read_metrics_log(_cell_dir(run_dir, config_hash, seed, lr) / "metrics.jsonl"))
    write_metrics_log(rows, run_dir / "metrics.jsonl")

    agg = aggregate_runs(rows)
    best = select_best(agg)
    report = build_report(agg, labels={config_hash: (cfg.pretrained_variant, cfg.context_level)})
    write_report_files(report, run_dir / "report")

    best_model_dir = None
    if save_best:
        best_model_dir = _save_best_bundle(cfg, run_dir, model_dir, train_m, best)
    return SweepResult(run_dir=run_dir, config_hash=config_hash, rows=rows,
                       aggregate=agg, best=best, report=report,
                       best_model_dir=best_model_dir)


def _save_best_bundle(cfg: ExperimentConfig, run_dir: Path, model_dir: Path,
                      train_matches: Sequence[Match], best: AggregateRow) -> Path:
    """Retrain the selected cell once under the base seed and save the model
    with enough metadata to rebuild its inputs at evaluation time."""
    backend = TinyEncoderBackend.load(model_dir)
    ckpt = initial_checkpoint(backend)
    train_inputs = assemble_inputs(cfg, train_matches, backend.tokenizer)
    labels = [ci.label for ci in train_inputs]
    weights = None
    if cfg.class_weight_mode == "balanced":
        from .training import class_weights_from_distribution
        counts = np.bincount(np.asarray(labels), minlength=2)
        weights = tuple(float(w) for w in class_weights_from_distribution(counts))
    train_cfg = TrainConfig(learning_rate=best.lr, epochs=best.epoch + 1,
                            batch_size=cfg.batch_size, seed=cfg.base_seed,
                            class_weights=weights)
    finetune_classifier(ckpt, train_inputs, train_cfg)
    out_dir = run_dir / "best_model"
    backend.save(out_dir)
    meta = {
        "phase": "finetuned",
        "config_hash": cfg.config_hash(),
        "context_level": cfg.context_level,
        "separator_scheme": cfg.separator_scheme,
        "token_budget": cfg.token_budget,
        "max_teams": cfg.max_teams,
        "max_players": cfg.max_players,
        "decision_threshold": cfg.decision_threshold,
        "lr": best.lr,
        "epochs": best.epoch + 1,
        "seed": cfg.base_seed,
        "code_version": code_version,
    }
    atomic_write_text(out_dir / "bundle_meta.json", json.dumps(meta, indent=2, sort_keys=True))
    return out_dir


# -- report regeneration -------------------------------------------------------


def run_report(run_dir: str | Path) -> list[Path]:
    """Rebuild the report purely from the metrics log and manifest.

    Deterministic inputs produce byte-identical outputs, so re-running after
    an interrupted or completed sweep is safe.
    """
    run_dir = Path(run_dir)
    manifest_path = run_dir / "manifest.json"
    metrics_path = run_dir / "metrics.jsonl"
    if not manifest_path.exists():
        raise ConfigError(f"{run_dir} holds no manifest.json; not a sweep directory")
    if not metrics_path.exists():
        raise ConfigError(f"{run_dir} holds no metrics.jsonl; run the sweep first")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    labels = {h: tuple(pair) for h, pair in manifest["labels"].items()}
    rows = read_metrics_log(metrics_path)
    agg = aggregate_runs(rows)
    report = build_report(agg, labels=labels)
    return write_report_files(report, run_dir / "report")


# -- standalone evaluation ------------------------------------------------------


def load_model_bundle(model_dir: str | Path) -> tuple[TinyEncoderBackend, dict]:
    model_dir = Path(model_dir)
    meta_path = model_dir / "bundle_meta.json"
    if not meta_path.exists():
        raise ConfigError(f"{model_dir} holds no bundle_meta.json; save one with sweep")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    backend = TinyEncoderBackend.load(model_dir)
    return backend, meta


def run_evaluate(model_dir: str | Path, corpus_path: str | Path) -> dict:
    """Evaluate a saved finetuned model bundle on a labeled corpus."""
    backend, meta = load_model_bundle(model_dir)
    if meta.get("phase") != "finetuned":
        raise PhaseError(f"model bundle phase is {meta.get('phase')!r}; "
                         "evaluation needs a finetuned model")
    matches = load_matches(corpus_path)
    st = SpecialTokens(max_teams=meta["max_teams"], max_players=meta["max_players"])
    level = ContextLevel(meta["context_level"])
    scheme = SeparatorScheme(meta["separator_scheme"])
    inputs = []
    labels = []
    for match in matches:
        for i, msg in enumerate(match.messages):
            if msg.label is None:
                raise ConfigError(f"match {match.match_id!r} message {i} is unlabeled; "
                                  "evaluation needs a labeled corpus")
            inputs.append(assemble(match, i, level, scheme, meta["token_budget"],
                                   backend.tokenizer.tokenize, st))
            labels.append(msg.label)
    scores = backend_scores(backend, inputs)
    values = score_metrics(scores, np.asarray(labels),
                           threshold=meta.get("decision_threshold", 0.5))
    values["n_messages"] = len(labels)
    return values


# -- propensity pipeline ---------------------------------------------------------


_DEFAULT_PROPENSITY = {
    "train_labeled": None,
    "test_labeled": None,
    "unlabeled": None,
    "period_id": None,
    "classifier_lr": 1e-3,
    "classifier_epochs": 3,
    "mode": "hard",
}


def run_propensity(cfg: ExperimentConfig) -> dict:
    """Full proactive pipeline: train classifier on labeled train matches,
    score every player's unlabeled history, fit the propensity threshold on
    training players, evaluate message-level predictions on test players.

    Train and test player sets must be disjoint; this is verified, not
    assumed, before any metric is reported.
    """
    if not cfg.propensity:
        raise ConfigError("config section 'propensity' is required for this stage")
    pcfg = dict(_DEFAULT_PROPENSITY)
    bad = set(cfg.propensity) - set(_DEFAULT_PROPENSITY)
    if bad:
        raise ConfigError(f"unknown keys {sorted(bad)} in config section 'propensity'")
    pcfg.update(cfg.propensity)
    for key in ("train_labeled", "test_labeled", "unlabeled"):
        if not pcfg[key]:
            raise ConfigError(f"propensity.{key} path is required")
    if pcfg["mode"] not in ("hard", "mean_probability"):
        raise ConfigError(f"unknown propensity mode {pcfg['mode']!r}")

    train_matches = load_matches(pcfg["train_labeled"])
    test_matches = load_matches(pcfg["test_labeled"])
    unlabeled = load_matches(pcfg["unlabeled"])

    train_players = player_keys_of(train_matches)
    test_players = player_keys_of(test_matches)

    if cfg.pretrained_dir:
        backend = TinyEncoderBackend.load(cfg.pretrained_dir)
    else:
        tokenizer = fit_tokenizer(cfg, list(unlabeled) + list(train_matches))
        backend = build_backend(cfg, tokenizer)
    ckpt = initial_checkpoint(backend)

    train_inputs = assemble_inputs(cfg, train_matches, backend.tokenizer)
    labels = np.asarray([ci.label for ci in train_inputs])
    weights = None
    if cfg.class_weight_mode == "balanced":
        from .training import class_weights_from_distribution
        weights = tuple(float(w) for w in
                        class_weights_from_distribution(np.bincount(labels, minlength=2)))
    train_cfg = TrainConfig(learning_rate=float(pcfg["classifier_lr"]),
                            epochs=int(pcfg["classifier_epochs"]),
                            batch_size=cfg.batch_size, seed=cfg.base_seed,
                            class_weights=weights)
    result = finetune_classifier(ckpt, train_inputs, train_cfg)
    classifier = result.checkpoints[-1]

    st = cfg.special_tokens()

    def assembler(match: Match, index: int) -> ContextualInput:
        return assemble(match, index, cfg.level(), cfg.scheme(), cfg.token_budget,
                        backend.tokenizer.tokenize, st)

    records = score_players(classifier, unlabeled, assembler,
                            period_id=pcfg["period_id"],
                            decision_threshold=cfg.decision_threshold,
                            use_hard_labels=(pcfg["mode"] == "hard"))
    rec_map = {r.player_key: r for r in records}

    missing_train = sorted(train_players - set(rec_map))
    if missing_train:
        raise CoverageError(f"training players without unlabeled history to score: "
                            f"{missing_train[:5]} ({len(missing_train)} total)")
    fit_records = []
    for key in sorted(train_players):
        player_labels = [msg.label for m in train_matches for msg in m.messages
                         if msg.player_key == key and msg.label is not None]
        fit_records.append((rec_map[key], player_labels))
    model = fit_threshold(fit_records)

    evaluation = evaluate_propensity(model, test_matches, rec_map,
                                     classifier_train_players=train_players)

    run_dir = cfg.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    write_propensity_table(records, run_dir / "propensity.jsonl")
    summary = {
        "threshold": model.threshold,
        "degenerate": model.degenerate,
        "training_balanced_accuracy": model.training_balanced_accuracy,
        "test_balanced_accuracy": evaluation.balanced_accuracy,
        "n_test_players": evaluation.n_players,
        "n_scored_players": len(records),
        "counts": {"tp": evaluation.counts.tp, "fn": evaluation.counts.fn,
                   "tn": evaluation.counts.tn, "fp": evaluation.counts.fp},
        "mode": pcfg["mode"],
        "code_version": code_version,
    }
    atomic_write_text(run_dir / "propensity_metrics.json",
                      json.dumps(summary, indent=2, sort_keys=True))
    logger.info("propensity test balanced accuracy %.3f over %d players",
                evaluation.balanced_accuracy, evaluation.n_players)
    return summary
