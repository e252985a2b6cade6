"""Matplotlib figures for loss logs, beam sweeps and capacity sweeps (written to files only)."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .bench import BenchRow, CapacityRow  # noqa: E402


def plot_loss(rows: Sequence[dict], path: str | Path) -> Path:
    """Total loss and every logged component against the step."""
    fig, ax = plt.subplots(figsize=(6, 4))
    steps = [r["step"] for r in rows]
    keys = [k for k in rows[0] if k not in ("step", "lr")] if rows else []
    for key in keys:
        ax.plot(steps, [r.get(key, math.nan) for r in rows], label=key, linewidth=1.5 if key == "total" else 0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_bench(rows: Sequence[BenchRow], path: str | Path) -> Path:
    """Mean latency against unit-BLEU per model; points are labelled ``b1→b2``."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for model in dict.fromkeys(r.model for r in rows):
        pts = [r for r in rows if r.model == model]
        ys = [r.unit_bleu if not math.isnan(r.unit_bleu) else r.text_bleu for r in pts]
        ax.plot([r.mean_ms for r in pts], ys, marker="o", label=model)
        for r, y in zip(pts, ys):
            label = f"{r.b1}→{r.b2}" if r.b2 else f"{r.b1}"
            ax.annotate(label, (r.mean_ms, y), fontsize=7, textcoords="offset points", xytext=(3, 3))
    ax.set_xlabel("mean latency per utterance (ms)")
    ax.set_ylabel("unit BLEU")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_capacity(rows: Sequence[CapacityRow], path: str | Path) -> Path:
    """Speed-up and unit-BLEU per (N_1st, N_2nd) assignment."""
    fig, (left, right) = plt.subplots(1, 2, figsize=(8, 3.5))
    names = [f"{r.n1},{r.n2}" for r in rows]
    left.bar(names, [r.speedup for r in rows])
    left.set_ylabel("speed-up vs first row")
    right.bar(names, [r.unit_bleu for r in rows])
    right.set_ylabel("unit BLEU")
    for ax in (left, right):
        ax.set_xlabel("N_1st, N_2nd")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
