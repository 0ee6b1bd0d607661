"""Figures written next to the text reports (Agg backend, PNG files)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_training(losses, rates, epochs, path) -> Path:
    """Per-step loss (with a running mean), learning rate, and per-epoch validation loss."""
    fig, (ax_loss, ax_lr) = plt.subplots(2, 1, figsize=(6.4, 5.6), sharex=True)
    steps = np.arange(1, len(losses) + 1)
    ax_loss.plot(steps, losses, lw=0.8, alpha=0.5, label="batch loss")
    if len(losses) >= 10:
        k = max(len(losses) // 20, 5)
        smooth = np.convolve(losses, np.ones(k) / k, mode="valid")
        ax_loss.plot(steps[k - 1:], smooth, lw=1.6, label=f"mean of {k}")
    valid = [(e["steps"], e["valid_loss"]) for e in epochs if "valid_loss" in e]
    if valid:
        xs, ys = zip(*valid)
        ax_loss.plot(xs, ys, "o-", label="validation")
    ax_loss.set_ylabel("cross entropy")
    ax_loss.legend(frameon=False)
    ax_lr.plot(steps, rates, color="tab:gray")
    ax_lr.set_xlabel("step")
    ax_lr.set_ylabel("learning rate")
    for ax in (ax_loss, ax_lr):
        ax.spines["right"].set_visible(False)
        ax.spines["top"].set_visible(False)
    return _save(fig, path)


def plot_metrics(values: dict, path, title: str = "") -> Path:
    keys = ["p1", "p2", "p3", "p4", "bleu"]
    fig, ax = plt.subplots(figsize=(5.2, 3.4))
    bars = ax.bar(keys, [values[k] for k in keys], color=["tab:blue"] * 4 + ["tab:orange"])
    for b in bars:
        ax.annotate(f"{b.get_height():.1f}", (b.get_x() + b.get_width() / 2, b.get_height()),
                    ha="center", va="bottom", fontsize=8)
    ax.set_ylabel("score (%)")
    ax.set_ylim(0, 105)
    if title:
        ax.set_title(title)
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)
    return _save(fig, path)


def plot_verification(errors: dict, tolerances: dict, path) -> Path:
    """Per-check discrepancy distribution on a log scale, with tolerance marks."""
    tags = list(errors)
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    floor = 1e-18
    for i, tag in enumerate(tags):
        errs = np.maximum(np.asarray(errors[tag], dtype=float), floor)
        jitter = np.random.default_rng(i).uniform(-0.15, 0.15, size=errs.size)
        ax.scatter(i + jitter, errs, s=6, alpha=0.6)
        if tag in tolerances:
            ax.hlines(tolerances[tag], i - 0.35, i + 0.35, colors="tab:red", lw=1.2)
    ax.set_yscale("log")
    ax.set_xticks(range(len(tags)))
    ax.set_xticklabels(tags, rotation=20, fontsize=8)
    ax.set_ylabel("max abs error")
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)
    return _save(fig, path)
