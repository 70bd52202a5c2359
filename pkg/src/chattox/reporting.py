"""Report generation: summary tables, per-epoch curves, comparison plots.

The summary table mirrors the shape of the headline results table: one row
per experiment configuration showing the selected (learning rate, epoch)
cell's mean and standard deviation for every metric, plus the balanced
accuracy improvement over the no-pretraining baseline within the same
context level. CSV floats use shortest round-trip formatting so parsing the
file reproduces the aggregate values exactly.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .errors import ValidationError
from .metrics import METRIC_FIELDS, AggregateRow, select_best

VARIANT_ORDER = ("base", "dap", "dap_sep", "dap_sender")
LEVEL_ORDER = ("none", "current_player", "all_players")

SUMMARY_COLUMNS = ("variant", "context_level", "config_hash", "lr", "epoch", "n_runs",
                   *[f"{m}_{s}" for m in METRIC_FIELDS for s in ("mean", "std")],
                   "improvement")

CURVE_COLUMNS = ("config_hash", "variant", "context_level", "lr", "epoch", "n_runs",
                 *[f"{m}_{s}" for m in METRIC_FIELDS for s in ("mean", "std")])


@dataclass(frozen=True)
class ReportRow:
    variant: str
    context_level: str
    config_hash: str
    lr: float
    epoch: int
    n_runs: int
    means: dict[str, float]
    stds: dict[str, float]
    improvement: float | None


@dataclass(frozen=True)
class Report:
    rows: tuple[ReportRow, ...]
    curves: tuple[tuple[str, str, AggregateRow], ...]  # (variant, level, agg row)


def _order_key(variant: str, level: str) -> tuple[int, int, str, str]:
    v = VARIANT_ORDER.index(variant) if variant in VARIANT_ORDER else len(VARIANT_ORDER)
    l = LEVEL_ORDER.index(level) if level in LEVEL_ORDER else len(LEVEL_ORDER)
    return (l, v, level, variant)


def build_report(agg_rows: Sequence[AggregateRow],
                 labels: Mapping[str, tuple[str, str]],
                 base_variant: str = "base") -> Report:
    """Select the best cell per configuration and attach baseline deltas.

    `labels` maps each config_hash to its (variant, context_level) pair. The
    improvement column is the selected mean balanced accuracy minus the base
    variant's selected mean within the same context level; rows without a
    matching base row (including base itself) carry None.
    """
    by_hash: dict[str, list[AggregateRow]] = {}
    for row in agg_rows:
        if row.config_hash not in labels:
            raise ValidationError(f"no variant/level label for config_hash {row.config_hash!r}")
        by_hash.setdefault(row.config_hash, []).append(row)

    selected: dict[str, AggregateRow] = {h: select_best(rows) for h, rows in by_hash.items()}

    base_ba: dict[str, float] = {}
    for h, best in selected.items():
        variant, level = labels[h]
        if variant == base_variant:
            base_ba[level] = best.means["balanced_accuracy"]

    rows = []
    for h, best in selected.items():
        variant, level = labels[h]
        improvement = None
        if variant != base_variant and level in base_ba:
            improvement = best.means["balanced_accuracy"] - base_ba[level]
        rows.append(ReportRow(variant=variant, context_level=level, config_hash=h,
                              lr=best.lr, epoch=best.epoch, n_runs=best.n_runs,
                              means=dict(best.means), stds=dict(best.stds),
                              improvement=improvement))
    rows.sort(key=lambda r: _order_key(r.variant, r.context_level))

    curves = []
    for h in sorted(by_hash):
        variant, level = labels[h]
        for row in sorted(by_hash[h], key=lambda r: (r.lr, r.epoch)):
            curves.append((variant, level, row))
    return Report(rows=tuple(rows), curves=tuple(curves))


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def summary_csv(report: Report) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SUMMARY_COLUMNS)
    for row in report.rows:
        record = [row.variant, row.context_level, row.config_hash, _fmt(row.lr),
                  row.epoch, row.n_runs]
        for metric in METRIC_FIELDS:
            record.append(_fmt(row.means[metric]))
            record.append(_fmt(row.stds[metric]))
        record.append(_fmt(row.improvement))
        writer.writerow(record)
    return buf.getvalue()


def curves_csv(report: Report) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CURVE_COLUMNS)
    for variant, level, row in report.curves:
        record = [row.config_hash, variant, level, _fmt(row.lr), row.epoch, row.n_runs]
        for metric in METRIC_FIELDS:
            record.append(_fmt(row.means[metric]))
            record.append(_fmt(row.stds[metric]))
        writer.writerow(record)
    return buf.getvalue()


def parse_summary_csv(text: str) -> list[dict]:
    """Read a summary CSV back into typed dicts (floats exactly as written)."""
    reader = csv.DictReader(io.StringIO(text))
    out = []
    for raw in reader:
        rec: dict = dict(raw)
        rec["lr"] = float(raw["lr"])
        rec["epoch"] = int(raw["epoch"])
        rec["n_runs"] = int(raw["n_runs"])
        for metric in METRIC_FIELDS:
            rec[f"{metric}_mean"] = float(raw[f"{metric}_mean"])
            rec[f"{metric}_std"] = float(raw[f"{metric}_std"])
        rec["improvement"] = float(raw["improvement"]) if raw["improvement"] else None
        out.append(rec)
    return out


def summary_markdown(report: Report) -> str:
    """Human-oriented table: mean +/- std at the selected cell per config."""
    header = ("| variant | context | lr | epoch | BA | AUC | F1 | precision | recall | vs base |")
    rule = "|---" * 10 + "|"
    lines = ["# Sweep summary", "", header, rule]
    for row in report.rows:
        cells = [row.variant, row.context_level, f"{row.lr:g}", str(row.epoch)]
        for metric in METRIC_FIELDS:
            cells.append(f"{row.means[metric]:.2f} +/- {row.stds[metric]:.2f}")
        if row.improvement is None:
            cells.append("-")
        else:
            cells.append(f"{row.improvement:+.2f}")
        lines.append("| " + " | ".join(cells) + " |")
    lines.append("")
    return "\n".join(lines)


def plot_epoch_curves(report: Report, config_hash: str, out_path: str | Path) -> None:
    """Mean balanced accuracy per epoch, one line per learning rate, with a
    +/- one standard deviation band and a marker on the selected cell."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = [(v, l, r) for v, l, r in report.curves if r.config_hash == config_hash]
    if not rows:
        raise ValidationError(f"no curves for config_hash {config_hash!r}")
    variant, level, _ = rows[0]
    selected = next(r for r in report.rows if r.config_hash == config_hash)

    by_lr: dict[float, list[AggregateRow]] = {}
    for _, _, row in rows:
        by_lr.setdefault(row.lr, []).append(row)

    fig, ax = plt.subplots(figsize=(6.0, 4.0), dpi=120)
    for lr in sorted(by_lr):
        series = sorted(by_lr[lr], key=lambda r: r.epoch)
        epochs = [r.epoch for r in series]
        means = [r.means["balanced_accuracy"] for r in series]
        stds = [r.stds["balanced_accuracy"] for r in series]
        ax.plot(epochs, means, marker="o", markersize=3, label=f"lr={lr:g}")
        ax.fill_between(epochs,
                        [m - s for m, s in zip(means, stds)],
                        [m + s for m, s in zip(means, stds)], alpha=0.2)
    ax.scatter([selected.epoch], [selected.means["balanced_accuracy"]],
               marker="*", s=140, zorder=5, color="black", label="selected")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean balanced accuracy")
    ax.set_title(f"{variant} / {level}")
    ax.legend(loc="lower right", fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, format="png")
    plt.close(fig)


def write_report_files(report: Report, out_dir: str | Path, plots: bool = True) -> list[Path]:
    """Write summary.csv, summary.md, epoch_curves.csv and one PNG per config."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, text in (("summary.csv", summary_csv(report)),
                       ("summary.md", summary_markdown(report)),
                       ("epoch_curves.csv", curves_csv(report))):
        path = out_dir / name
        path.write_text(text, encoding="utf-8")
        written.append(path)
    if plots:
        for row in report.rows:
            path = out_dir / f"curves_{row.config_hash}.png"
            plot_epoch_curves(report, row.config_hash, path)
            written.append(path)
    return written
