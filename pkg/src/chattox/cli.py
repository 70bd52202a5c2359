"""Command-line entry points for the full pipeline.

Subcommands: ingest, stats, synth, pretrain, sweep, evaluate, propensity,
report. Stages that train read a JSON config file holding ExperimentConfig
keys; a few common fields can be overridden with flags. Exit codes: 0 on
success, 1 for usage or configuration problems, 2 for data problems, 3 for
unexpected internal errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .data import corpus_stats, load_matches, save_matches
from .errors import DATA_ERRORS, ChattoxError, ConfigError
from .experiment import (ExperimentConfig, apply_determinism_mode, run_evaluate,
                         run_pretrain, run_propensity, run_report, run_sweep)
from .importers import FORMATS, import_many
from .synth import (PlayerPoolConfig, SynthConfig, generate_propensity_corpus,
                    generate_synthetic_corpus)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INTERNAL = 3


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors by default; this pipeline reserves 2
    # for data problems, so remap usage errors onto exit code 1
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit_With(EXIT_USAGE, f"{self.prog}: error: {message}")


class SystemExit_With(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config)
    overrides = {}
    for name in ("experiment_id", "output_dir", "epochs", "n_runs", "base_seed",
                 "pretrained_dir"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if getattr(args, "lr", None):
        overrides["lr_grid"] = [float(x) for x in args.lr]
    if overrides:
        cfg = ExperimentConfig.from_dict({**cfg.to_dict(), **overrides})
    return cfg


def _add_config_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="JSON experiment config")
    parser.add_argument("--experiment-id", dest="experiment_id", help="override experiment_id")
    parser.add_argument("--output-dir", dest="output_dir", help="override output_dir")
    parser.add_argument("--epochs", type=int, help="override finetuning epochs")
    parser.add_argument("--n-runs", dest="n_runs", type=int, help="override run count")
    parser.add_argument("--base-seed", dest="base_seed", type=int, help="override base seed")
    parser.add_argument("--pretrained-dir", dest="pretrained_dir",
                        help="override path to the saved pretraining run")
    parser.add_argument("--lr", action="append", help="override lr grid (repeatable)")


def cmd_ingest(args) -> int:
    matches = import_many(args.input, args.format, game=args.game)
    save_matches(matches, args.out)
    print(f"wrote {len(matches)} matches to {args.out}")
    return EXIT_OK


def _fmt_rate(value) -> str:
    return "n/a" if value is None else f"{value:.4f}"


def cmd_stats(args) -> int:
    rows = []
    for path in args.corpus:
        stats = corpus_stats(load_matches(path))
        rows.append((Path(path).name, stats))
    print(f"{'corpus':<28} {'matches':>8} {'messages':>9} {'words':>10} "
          f"{'labeled':>8} {'toxic%':>8} {'ctx-dep%':>9}")
    for name, s in rows:
        print(f"{name:<28} {s.n_matches:>8} {s.n_messages:>9} {s.n_words:>10} "
              f"{s.n_labeled:>8} {_fmt_rate(s.toxicity_rate):>8} "
              f"{_fmt_rate(s.context_dependent_fraction):>9}")
    if args.out:
        payload = {name: dataclasses.asdict(s) for name, s in rows}
        Path(args.out).write_text(json.dumps(payload, indent=2, sort_keys=True))
    return EXIT_OK


_SYNTH_PRESETS = {
    # defaults tuned for a visible context gap: context-dependent toxicity is
    # indistinguishable from benign latent-token chatter without history
    "basic": {},
    "mechanism": {"toxicity_rate": 0.1, "context_dependent_fraction": 0.4,
                  "latent_in_benign_prob": 0.85, "messages_per_match": 12},
}


def _synth_overrides(args) -> dict:
    out = {}
    for name in ("toxicity_rate", "context_dependent_fraction", "messages_per_match"):
        value = getattr(args, name)
        if value is not None:
            out[name] = value
    return out


def cmd_synth(args) -> int:
    if args.preset == "propensity":
        config = SynthConfig(
            n_matches=args.n_matches,
            period_id=args.period_id or "w01",
            player_pool=PlayerPoolConfig(n_players=args.pool_players),
            **_synth_overrides(args))
        corpus = generate_propensity_corpus(
            config, args.seed, n_train_matches=args.n_train_matches,
            n_test_matches=args.n_test_matches, n_unlabeled_matches=args.n_matches)
        prefix = Path(args.out)
        outputs = {
            prefix.with_name(prefix.name + "_train.jsonl"): corpus.train_matches,
            prefix.with_name(prefix.name + "_test.jsonl"): corpus.test_matches,
            prefix.with_name(prefix.name + "_unlabeled.jsonl"): corpus.unlabeled_matches,
        }
        for path, matches in outputs.items():
            save_matches(matches, path)
            print(f"wrote {len(matches)} matches to {path}")
        return EXIT_OK

    params = dict(_SYNTH_PRESETS[args.preset])
    params.update({
        "n_matches": args.n_matches,
        "labeled": not args.unlabeled,
    })
    params.update(_synth_overrides(args))
    if args.period_id:
        params["period_id"] = args.period_id
    config = SynthConfig(**params)
    matches = generate_synthetic_corpus(config, args.seed)
    save_matches(matches, args.out)
    print(f"wrote {len(matches)} matches to {args.out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    out_dir = run_pretrain(_load_config(args))
    print(f"pretrained model saved to {out_dir}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    result = run_sweep(_load_config(args), workers=args.workers,
                       save_best=not args.no_save_best)
    best = result.best
    print(f"sweep complete: {len(result.rows)} rows in {result.run_dir / 'metrics.jsonl'}")
    print(f"best cell: lr={best.lr:g} epoch={best.epoch} "
          f"mean balanced accuracy={best.means['balanced_accuracy']:.4f}")
    print(f"report: {result.run_dir / 'report'}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    values = run_evaluate(args.model, args.corpus)
    for key in ("balanced_accuracy", "auc", "f1", "precision", "recall"):
        print(f"{key:<18} {values[key]:.4f}")
    print(f"{'n_messages':<18} {values['n_messages']}")
    if args.out:
        Path(args.out).write_text(json.dumps(values, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_propensity(args) -> int:
    summary = run_propensity(_load_config(args))
    print(f"propensity threshold: {summary['threshold']:.4f} "
          f"(train balanced accuracy {summary['training_balanced_accuracy']:.4f})")
    print(f"test balanced accuracy: {summary['test_balanced_accuracy']:.4f} "
          f"over {summary['n_test_players']} players")
    return EXIT_OK


def cmd_report(args) -> int:
    written = run_report(args.run_dir)
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="chattox",
                     description="Context-aware game-chat toxicity pipeline")
    parser.add_argument("--version", action="version", version=f"chattox {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="normalize external chat dumps")
    p.add_argument("--format", required=True, choices=FORMATS)
    p.add_argument("--input", required=True, nargs="+", help="source CSV file(s)")
    p.add_argument("--out", required=True, help="canonical JSONL output path")
    p.add_argument("--game", default="dota2", help="game tag for imported matches")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("stats", help="corpus statistics table")
    p.add_argument("--corpus", required=True, nargs="+", help="canonical JSONL file(s)")
    p.add_argument("--out", help="also write stats as JSON")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("synth", help="generate synthetic corpora")
    p.add_argument("--out", required=True,
                   help="output path (propensity preset appends _train/_test/_unlabeled)")
    p.add_argument("--preset", default="basic",
                   choices=[*sorted(_SYNTH_PRESETS), "propensity"])
    p.add_argument("--n-matches", dest="n_matches", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--unlabeled", action="store_true", help="emit without labels")
    p.add_argument("--toxicity-rate", dest="toxicity_rate", type=float)
    p.add_argument("--context-dependent-fraction", dest="context_dependent_fraction",
                   type=float)
    p.add_argument("--messages-per-match", dest="messages_per_match", type=int)
    p.add_argument("--period-id", dest="period_id")
    p.add_argument("--pool-players", dest="pool_players", type=int, default=40)
    p.add_argument("--n-train-matches", dest="n_train_matches", type=int, default=60)
    p.add_argument("--n-test-matches", dest="n_test_matches", type=int, default=60)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="domain-adaptive pretraining")
    _add_config_args(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("sweep", help="repeated finetuning sweep + report")
    _add_config_args(p)
    p.add_argument("--workers", type=int, default=None,
                   help="parallel cell processes (default: CHATTOX_WORKERS or 1)")
    p.add_argument("--no-save-best", action="store_true",
                   help="skip retraining and saving the selected best model")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("evaluate", help="evaluate a saved model bundle on a corpus")
    p.add_argument("--model", required=True, help="model bundle directory")
    p.add_argument("--corpus", required=True, help="labeled canonical JSONL")
    p.add_argument("--out", help="also write metrics as JSON")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("propensity", help="player propensity pipeline")
    _add_config_args(p)
    p.set_defaults(func=cmd_propensity)

    p = sub.add_parser("report", help="regenerate report files from a run directory")
    p.add_argument("--run-dir", dest="run_dir", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit_With as exc:
        print(str(exc), file=sys.stderr)
        return exc.code
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if apply_determinism_mode():
        logger.info("determinism mode active: single thread, deterministic kernels")
    try:
        return args.func(args)
    except SystemExit_With as exc:
        print(str(exc), file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ChattoxError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # pragma: no cover - defensive
        logger.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
