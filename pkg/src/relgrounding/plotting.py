"""CSV and PNG artifacts for accuracy-vs-threshold curves, loss curves and ablation tables."""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from relgrounding.ablation import AblationTable  # noqa: E402
from relgrounding.metrics import MetricsReport  # noqa: E402
from relgrounding.trainer import LOG_COLUMNS, LogRow, read_metric_log  # noqa: E402


class PlotError(ValueError):
    pass


def _paths(out: str | Path) -> tuple[Path, Path]:
    out = Path(out)
    stem = out.with_suffix("") if out.suffix in (".csv", ".png") else out
    stem.parent.mkdir(parents=True, exist_ok=True)
    return stem.with_suffix(".csv"), stem.with_suffix(".png")


def threshold_curve(reports: MetricsReport | Mapping[str, MetricsReport], out: str | Path) -> tuple[Path, Path]:
    """Accuracy at each IoU threshold, one column per report."""
    if isinstance(reports, MetricsReport):
        reports = {"acc": reports}
    if not reports or any(not r.acc_at for r in reports.values()):
        raise PlotError("no accuracy values to plot")
    thresholds = sorted({t for r in reports.values() for t in r.acc_at})
    csv_path, png_path = _paths(out)
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iou_threshold", *reports])
        for t in thresholds:
            # repr keeps floats exact through the CSV round trip
            w.writerow([repr(t), *(repr(r.acc_at.get(t, math.nan)) for r in reports.values())])

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, r in reports.items():
        ts = sorted(r.acc_at)
        ax.plot(ts, [100 * r.acc_at[t] for t in ts], marker="o", label=f"{name} (mIoU {r.mean_iou:.3f})")
    ax.set_xlabel("IoU threshold")
    ax.set_ylabel("accuracy (%)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(png_path, dpi=100)
    plt.close(fig)
    return csv_path, png_path


def loss_curves(rows: Sequence[LogRow], out: str | Path) -> tuple[Path, Path]:
    if not rows:
        raise PlotError("metric log has no rows")
    csv_path, png_path = _paths(out)
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([r.iteration, *(repr(v) for v in (r.rec, r.reg, r.rel, r.rank, r.total, r.val_acc))])

    fig, (ax, ax_acc) = plt.subplots(1, 2, figsize=(9, 3.5))
    its = [r.iteration for r in rows]
    for name in ("rec", "reg", "rel", "rank", "total"):
        ax.plot(its, [getattr(r, name) for r in rows], label=f"l_{name}" if name != "total" else name)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7)
    val = [(r.iteration, r.val_acc) for r in rows if not math.isnan(r.val_acc)]
    if val:
        ax_acc.plot(*zip(*val), marker="o")
    ax_acc.set_xlabel("iteration")
    ax_acc.set_ylabel("val acc@0.5")
    fig.tight_layout()
    fig.savefig(png_path, dpi=100)
    plt.close(fig)
    return csv_path, png_path


def ablation_chart(table: AblationTable, out: str | Path) -> tuple[Path, Path]:
    if not table.rows:
        raise PlotError("ablation table has no rows")
    csv_path, png_path = _paths(out)
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "mean_acc", "std_acc", "failed", *(f"seed_{s}" for s in table.seeds)])
        for r in table.rows:
            w.writerow([r.variant.name, repr(r.mean), repr(r.spread), int(r.failed), *(repr(x.acc) for x in r.runs)])

    fig, ax = plt.subplots(figsize=(1.2 * len(table.rows) + 2, 3.5))
    names = [r.variant.name for r in table.rows]
    means = [0.0 if r.failed else 100 * r.mean for r in table.rows]
    errs = [0.0 if r.failed else 100 * r.spread for r in table.rows]
    ax.bar(names, means, yerr=errs, capsize=4, color=["#bbbbbb" if r.failed else "#4c72b0" for r in table.rows])
    ax.set_ylabel("val acc@0.5 (%)")
    fig.tight_layout()
    fig.savefig(png_path, dpi=100)
    plt.close(fig)
    return csv_path, png_path


def _report_from_json(data: dict) -> MetricsReport:
    return MetricsReport(
        acc_at={float(k): float(v) for k, v in data["acc_at"].items()},
        pointit=float(data["pointit"]),
        mean_iou=float(data["mean_iou"]),
        count=int(data["count"]),
        rel_top_k={int(k): float(v) for k, v in data.get("rel_top_k", {}).items()},
    )


def plot(source: str | Path, out: str | Path) -> tuple[Path, Path]:
    """Render whatever ``source`` holds: a metric log, a metrics report or an ablation table."""
    source = Path(source)
    text = source.read_text()
    if not text.strip():
        raise PlotError(f"{source}: empty input")
    if text.startswith(LOG_COLUMNS[0] + "\t"):
        return loss_curves(read_metric_log(source), out)
    try:
        data = json.loads(text)
    except json.JSONDecodeError:
        raise PlotError(f"{source}: neither a metric log nor a JSON report") from None
    if isinstance(data, dict) and "rows" in data:
        return ablation_chart(AblationTable.load(source), out)
    if isinstance(data, dict) and "acc_at" in data:
        return threshold_curve(_report_from_json(data), out)
    if isinstance(data, dict) and data and all(isinstance(v, dict) and "acc_at" in v for v in data.values()):
        return threshold_curve({k: _report_from_json(v) for k, v in data.items()}, out)
    raise PlotError(f"{source}: unrecognized JSON content")
