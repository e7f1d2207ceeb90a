"""Evaluation report serialization: line-delimited records, CSV export, a
summary block, and matplotlib figures rendered alongside the delimited output.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .metrics import RunReport, _RECORD_METRICS

_STYLE = {
    "figure.dpi": 120,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def write_report(report: RunReport, out_dir) -> list:
    """Write records.jsonl, records.csv, summary.json and the figures.

    Returns the list of created paths.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    jsonl_path = out_dir / "records.jsonl"
    with open(jsonl_path, "w") as fh:
        for rec in report.records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    written.append(jsonl_path)

    csv_path = out_dir / "records.csv"
    fields = ["generation"] + list(_RECORD_METRICS)
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for rec in report.records:
            writer.writerow({k: rec.get(k, "") for k in fields})
    written.append(csv_path)

    summary_path = out_dir / "summary.json"
    with open(summary_path, "w") as fh:
        json.dump(
            {
                "header": report.header,
                "summary": report.summary,
                "kad": report.kad_value,
                "errors": report.errors,
            },
            fh,
            indent=1,
            sort_keys=True,
        )
    written.append(summary_path)

    if report.records:
        written.append(_metric_histograms(report, out_dir / "metric_histograms.png"))
        written.append(_summary_bars(report, out_dir / "metric_summary.png"))
    return written


def _metric_histograms(report: RunReport, path) -> Path:
    metrics = [m for m in _RECORD_METRICS if any(m in r for r in report.records)]
    n = len(metrics)
    cols = 4
    rows = (n + cols - 1) // cols
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(rows, cols, figsize=(3.2 * cols, 2.4 * rows), squeeze=False)
        for ax in axes.ravel()[n:]:
            ax.set_visible(False)
        for ax, metric in zip(axes.ravel(), metrics):
            values = [r[metric] for r in report.records if metric in r]
            lo, hi = min(values), max(values)
            if hi - lo < 1e-9:  # degenerate spread still needs finite bins
                lo, hi = lo - 0.05, hi + 0.05
            ax.hist(values, bins=20, range=(lo, hi), color="#4878a8")
            ax.set_title(metric)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def _summary_bars(report: RunReport, path) -> Path:
    metrics = list(report.summary)
    means = [report.summary[m]["mean"] for m in metrics]
    err_lo = [report.summary[m]["mean"] - report.summary[m]["ci_lo"] for m in metrics]
    err_hi = [report.summary[m]["ci_hi"] - report.summary[m]["mean"] for m in metrics]
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(1.2 + 0.8 * len(metrics), 3.2))
        ax.bar(range(len(metrics)), means, yerr=[err_lo, err_hi], capsize=3, color="#4878a8")
        ax.set_xticks(range(len(metrics)))
        ax.set_xticklabels(metrics, rotation=45, ha="right")
        title = "metric means with bootstrap 95% CI"
        if report.kad_value is not None:
            title += f"  (KAD = {report.kad_value:.3f})"
        ax.set_title(title)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def save_training_curve(records, path, title="training loss") -> Path:
    """Loss-vs-step figure for codec or model training logs."""
    steps = [r["step"] if isinstance(r, dict) else r.step for r in records]
    losses = [r["loss"] if isinstance(r, dict) else r.loss for r in records]
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.plot(steps, losses, lw=0.9, color="#a84848")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_title(title)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)
