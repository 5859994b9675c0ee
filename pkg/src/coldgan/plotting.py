"""Figures written next to the CSV reports.

Every function takes already-computed results, draws one figure with the
non-interactive Agg backend and saves it to ``path`` (format from suffix).
"""
from __future__ import annotations

import math
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"]

RC = {
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.labelsize": 10,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "savefig.dpi": 150,
}


def _finish(fig, path):
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def training_curves(logs: dict[str, Sequence[dict]], path, key: str = "mean_disc_score"):
    """One line per run of a training-log column against the epoch."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        for i, (name, rows) in enumerate(logs.items()):
            xs = [r["epoch"] for r in rows]
            ys = [r[key] for r in rows]
            ax.plot(xs, ys, marker="o", ms=3, color=COLORS[i % len(COLORS)], label=name)
        if key == "mean_disc_score":
            ax.axhline(0.5, color="0.6", lw=0.8, ls="--")
            ax.set_ylabel("P(human) on generated")
        else:
            ax.set_ylabel(key)
        ax.set_xlabel("epoch")
        ax.legend()
        return _finish(fig, path)


def mle_curve(history, path):
    """Training and validation NLL against the MLE step."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        ax.plot(history.steps, history.train_nll, color=COLORS[0], label="train")
        ax.plot(history.steps, history.val_nll, color=COLORS[1], label="validation")
        ax.axvline(history.best_step, color="0.6", lw=0.8, ls="--")
        ax.set_xlabel("step")
        ax.set_ylabel("NLL per sequence")
        ax.legend()
        return _finish(fig, path)


def quality_diversity(series: dict[str, Sequence], path):
    """Negative BLEU against self-BLEU, one polyline per system (lower-left is better)."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        for i, (name, pts) in enumerate(series.items()):
            c = COLORS[i % len(COLORS)]
            ax.plot([p.neg_bleu for p in pts], [p.self_bleu for p in pts], marker="o", ms=3, color=c, label=name)
            for p in pts:
                ax.annotate(f"{p.temperature:g}", (p.neg_bleu, p.self_bleu), fontsize=6, color=c,
                            xytext=(2, 2), textcoords="offset points")
        ax.set_xlabel("negative BLEU")
        ax.set_ylabel("self-BLEU")
        ax.legend()
        return _finish(fig, path)


def score_matrix(matrix, path):
    """Heat map of mean probability-human per (discriminator, evaluation set)."""
    vals = np.asarray(matrix.values)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(1.1 * len(matrix.columns) + 2, 0.5 * len(matrix.rows) + 1.2))
        im = ax.imshow(vals, cmap="RdBu", vmin=0, vmax=1, aspect="auto")
        ax.set_xticks(range(len(matrix.columns)), matrix.columns, rotation=30, ha="right")
        ax.set_yticks(range(len(matrix.rows)), matrix.rows)
        for (i, j), v in np.ndenumerate(vals):
            ax.text(j, i, f"{v:.2f}", ha="center", va="center", fontsize=7)
        fig.colorbar(im, ax=ax, fraction=0.04)
        return _finish(fig, path)


def prefix_accuracy(result, path):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        for i, (mode, acc) in enumerate(result.accuracy.items()):
            ax.plot(result.lengths, acc, marker="o", ms=3, color=COLORS[i % len(COLORS)],
                    label=mode.replace("_", " "))
        ax.set_xlabel("prefix length t")
        ax.set_ylabel("discriminator accuracy")
        ax.set_ylim(0.45, 1.02)
        ax.legend()
        return _finish(fig, path)


def length_bins(rows, path, ylabel: str = "mean gain"):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        labels = [f"{r.lo:g}-{r.hi:g}" for r in rows]
        vals = [math.nan if r.mean is None else r.mean for r in rows]
        ax.bar(range(len(rows)), vals, color=[COLORS[0] if v >= 0 else COLORS[1] for v in np.nan_to_num(vals)])
        ax.set_xticks(range(len(rows)), labels)
        ax.axhline(0.0, color="0.3", lw=0.8)
        ax.set_xlabel("target length")
        ax.set_ylabel(ylabel)
        return _finish(fig, path)
