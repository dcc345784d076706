"""Figure rendering for the report outputs.

Figures are a convenience companion to the delimited files, never the
primary record: the CSVs stay authoritative and fully recomputable.
"""
from __future__ import annotations

from collections import defaultdict

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def render_learning_curves(curve_rows: list[dict], out_path: str) -> str:
    """Mean-and-band learning curves per strategy (and per k when swept).

    curve_rows are dicts with the curves.csv columns. Returns out_path.
    """
    by_group = defaultdict(lambda: defaultdict(list))
    metric_name = "metric"
    for row in curve_rows:
        metric_name = row["metric_name"]
        label = str(row["strategy"])
        ks = {r["k"] for r in curve_rows if r["strategy"] == row["strategy"]}
        if len(ks) > 1:
            label = f"{row['strategy']} (k={row['k']})"
        by_group[label][int(row["n_labeled"])].append(float(row["metric_value"]))

    fig, ax = plt.subplots(figsize=(6.0, 4.2))
    for label in sorted(by_group):
        points = sorted(by_group[label].items())
        xs = np.array([p[0] for p in points])
        means = np.array([np.mean(p[1]) for p in points])
        stds = np.array([np.std(p[1]) for p in points])
        ax.plot(xs, means, marker="o", markersize=3, label=label)
        ax.fill_between(xs, means - stds, means + stds, alpha=0.2)
    ax.set_xlabel("labeled samples")
    ax.set_ylabel(metric_name)
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def render_duality_report(report: dict, out_path: str) -> str:
    """Per-instance duality gaps and sensitivity errors on log scales."""
    instances = report["instances"]
    gaps = np.array([abs(inst["duality_gap"]) for inst in instances])
    sens = [e["abs_error"] for inst in instances for e in inst["sensitivity"]]
    fig, axes = plt.subplots(1, 2, figsize=(8.0, 3.6))
    floor = 1e-18
    axes[0].semilogy(np.arange(len(gaps)), np.maximum(gaps, floor), "o")
    axes[0].axhline(1e-8, color="red", linestyle="--", linewidth=1)
    axes[0].set_xlabel("instance")
    axes[0].set_ylabel("|P* - D*|")
    if sens:
        axes[1].semilogy(np.arange(len(sens)), np.maximum(np.array(sens), floor), "o")
        axes[1].axhline(1e-3, color="red", linestyle="--", linewidth=1)
    axes[1].set_xlabel("active constraint")
    axes[1].set_ylabel("|dP*/deps + lambda*|")
    for ax in axes:
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path
