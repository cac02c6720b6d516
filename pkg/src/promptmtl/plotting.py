"""Figures for run reports."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_training_curve(log: Sequence[dict], path, evals: Sequence[dict] = ()) -> Path:
    """Loss per step (left axis), learning rate and dev metric (right axis)."""
    steps = [r["step"] for r in log]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, [r["loss"] for r in log], lw=0.6, color="tab:blue", label="train loss")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax2 = ax.twinx()
    lrs = np.array([r["lr"] for r in log])
    peak = lrs.max() if len(lrs) and lrs.max() > 0 else 1.0
    ax2.plot(steps, lrs / peak, lw=1.0, color="tab:gray", ls="--", label="lr / max")
    if evals:
        ax2.plot([e["step"] for e in evals], [e["dev_metric"] for e in evals], "o-", color="tab:red", label="dev")
    ax2.set_ylim(0, 1.05)
    handles = ax.get_legend_handles_labels()[0] + ax2.get_legend_handles_labels()[0]
    ax.legend(handles, [h.get_label() for h in handles], loc="center right")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_condition_bars(rows: Sequence[dict], path) -> Path:
    """Grouped bars: one group per task, one bar per prompt condition.

    Each row holds ``task_id``, ``condition``, ``value`` and optionally
    ``baselines``; random and majority baselines are drawn as ticks.
    """
    tasks = sorted({r["task_id"] for r in rows})
    conds = sorted({r["condition"] for r in rows})
    width = 0.8 / max(len(conds), 1)
    fig, ax = plt.subplots(figsize=(1.6 * len(tasks) + 2, 4))
    for j, cond in enumerate(conds):
        xs, ys = [], []
        for i, t in enumerate(tasks):
            for r in rows:
                if r["task_id"] == t and r["condition"] == cond:
                    xs.append(i + (j - (len(conds) - 1) / 2) * width)
                    ys.append(r["value"])
        ax.bar(xs, ys, width=width, label=cond)
    for i, t in enumerate(tasks):
        base = next((r.get("baselines") for r in rows if r["task_id"] == t and r.get("baselines")), None)
        if base:
            for name, style in (("random", "k:"), ("majority", "k--")):
                if name in base:
                    ax.plot([i - 0.45, i + 0.45], [base[name]] * 2, style, lw=1)
    ax.set_xticks(range(len(tasks)))
    ax.set_xticklabels(tasks, rotation=20, ha="right")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("metric")
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
