"""Static plots rendered from the long-format CSV reports.

The Agg backend with fixed figure size, dpi and no ``Software`` metadata
makes the PNG bytes a function of the CSV contents alone.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

PNG_METADATA = {"Software": None}
LABELS = {"cos_sim": "cosine similarity (higher is better)", "norm_dist": "norm distance (lower is better)"}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, format="png", dpi=100, metadata=PNG_METADATA)
    plt.close(fig)
    return path


def plot_metric_curves(long_csv, metric: str, path) -> Path:
    """Mean over seeds with a +-1 std band, one line per method."""
    series: dict = {}
    with open(long_csv) as fh:
        for r in csv.DictReader(fh):
            if r["metric"] != metric:
                continue
            v = float(r["value"])
            if math.isfinite(v):
                series.setdefault(r["method"], {}).setdefault(int(r["step"]), []).append(v)
    fig, ax = plt.subplots(figsize=(6, 4))
    for method in sorted(series):
        steps = sorted(series[method])
        mean = np.array([np.mean(series[method][s]) for s in steps])
        std = np.array([np.std(series[method][s]) for s in steps])
        ax.plot(steps, mean, label=method)
        ax.fill_between(steps, mean - std, mean + std, alpha=0.2)
    ax.set_xlabel("training step")
    ax.set_ylabel(LABELS.get(metric, metric))
    if series:
        ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def plot_sweep(summary_csv, axis: str, path) -> Path:
    """Final-checkpoint cosine similarity against the swept value."""
    rows = {}
    with open(summary_csv) as fh:
        for r in csv.DictReader(fh):
            if r["metric"] == "cos_sim":
                rows.setdefault(r["method"], []).append((r["value"], float(r["mean"]), float(r["std"])))
    fig, ax = plt.subplots(figsize=(6, 4))
    for method in sorted(rows):
        vals = rows[method]
        xs = np.arange(len(vals))
        ax.errorbar(xs, [v[1] for v in vals], yerr=[v[2] for v in vals], marker="o", capsize=3, label=method)
        ax.set_xticks(xs)
        ax.set_xticklabels([v[0] for v in vals])
    ax.set_xlabel(axis)
    ax.set_ylabel(LABELS["cos_sim"])
    if rows:
        ax.legend()
    fig.tight_layout()
    return _save(fig, path)
