"""Matplotlib renderings saved next to the JSON/CSV reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_eval_figure(report, path):
    """Accuracy before/after plus per-stage latency bars."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.bar(["baseline", "embedded"],
            [report.baseline_accuracy, report.embedded_accuracy],
            color=["#4878a8", "#c44e52"])
    ax1.set_ylim(0, 1.05)
    ax1.set_ylabel("top-1 accuracy")
    ax1.set_title(f"accuracy delta {report.accuracy_delta:+.4f}")
    stages = ["clean load", "load+extract", "inference"]
    values = [report.clean_load_ms, report.load_extract_ms, report.inference_ms]
    ax2.bar(stages, values, color="#6aa84f")
    ax2.set_ylabel("ms (mean of %d runs)" % report.runs)
    ax2.set_title("per-stage latency")
    ax2.tick_params(axis="x", rotation=15)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_coverage_figure(cov, path):
    """Per-layer covered fraction at the report's threshold."""
    names = list(cov.per_layer.keys())
    values = [cov.per_layer[n] for n in names]
    fig, ax = plt.subplots(figsize=(max(4, 0.9 * len(names)), 3.5))
    ax.bar(names, values, color="#4878a8")
    ax.axhline(cov.threshold, color="#c44e52", linestyle="--",
               label=f"threshold {cov.threshold}")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("covered fraction")
    ax.set_title(f"neuron coverage over {cov.test_cases} inputs")
    ax.tick_params(axis="x", rotation=30)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_ablation_figure(rows, path):
    """One panel per swept factor, accuracy after embedding."""
    factors = []
    for row in rows:
        if row["factor"] not in factors:
            factors.append(row["factor"])
    fig, axes = plt.subplots(1, len(factors), figsize=(4 * len(factors), 3.6))
    if len(factors) == 1:
        axes = [axes]
    for ax, factor in zip(axes, factors):
        sub = [r for r in rows if r["factor"] == factor]
        labels = [r["variant"] for r in sub]
        acc = [float(r["accuracy"]) for r in sub]
        base = float(sub[0]["baseline_accuracy"])
        if factor == "coverage":
            cov = [float(r["coverage"]) for r in sub]
            ax.scatter(cov, acc, color="#c44e52", zorder=3)
            for c, a, l in zip(cov, acc, labels):
                ax.annotate(l, (c, a), textcoords="offset points", xytext=(4, 4))
            ax.set_xlabel("layer coverage")
        else:
            ax.bar(labels, acc, color="#4878a8")
            ax.tick_params(axis="x", rotation=20)
        ax.axhline(base, color="gray", linestyle="--", linewidth=1,
                   label="baseline")
        ax.set_ylim(0, 1.05)
        ax.set_title(factor)
        ax.legend(fontsize=8)
    axes[0].set_ylabel("top-1 accuracy after embedding")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_scan_figure(report, path):
    """Chi-square statistic per weight tensor and byte position."""
    stats = report.statistics
    if not stats:
        return None
    names = [t.tensor for t in stats]
    x = np.arange(len(names))
    width = 0.27
    fig, ax = plt.subplots(figsize=(max(5, 1.1 * len(names)), 3.8))
    for k, color in zip(range(3), ("#4878a8", "#6aa84f", "#c44e52")):
        vals = [t.positions[k].chi_square for t in stats]
        ax.bar(x + (k - 1) * width, vals, width, label=f"byte {k}", color=color)
    ax.set_yscale("log")
    ax.set_xticks(x, names, rotation=30)
    ax.set_ylabel("chi-square vs uniform (log)")
    ax.set_title(f"byte-histogram statistics, verdict: {report.verdict}")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
