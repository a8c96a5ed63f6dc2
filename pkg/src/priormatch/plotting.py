"""Figure emission for training logs and evaluation reports.

All figures are written as self-contained SVG files; nothing interactive.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

LOSS_SERIES = ("rec_s", "rec_t", "kl_s", "kl_t", "seg", "task_cyc",
               "adv_s", "adv_t", "cyc_t", "total")


def _read_csv(path: Path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if len(rows) < 2:
        raise ValueError(f"{path}: no data rows")
    return rows[0], rows[1:]


def plot_loss_curves(log_paths: list[Path], out_path: Path) -> Path:
    """Per-term loss curves; one subplot per term, one series per log file."""
    fig, axes = plt.subplots(2, 5, figsize=(18, 6), sharex=True)
    axes = axes.ravel()
    for path in log_paths:
        header, rows = _read_csv(path)
        cols = {name: i for i, name in enumerate(header)}
        steps = [int(float(r[cols["step"]])) for r in rows]
        for ax, name in zip(axes, LOSS_SERIES):
            if name not in cols:
                continue
            ax.plot(steps, [float(r[cols[name]]) for r in rows],
                    label=Path(path).parent.name or Path(path).stem, lw=0.8)
            ax.set_title(name)
    for ax in axes:
        ax.set_xlabel("step")
    axes[0].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)
    return out_path


def plot_dice_curves(eval_paths: list[Path], out_path: Path) -> Path:
    """Validation mean Dice over epochs, one series per run."""
    fig, ax = plt.subplots(figsize=(7, 4))
    for path in eval_paths:
        header, rows = _read_csv(path)
        cols = {name: i for i, name in enumerate(header)}
        ax.plot([int(float(r[cols["epoch"]])) for r in rows],
                [float(r[cols["mean_dice"]]) for r in rows],
                label=Path(path).parent.name or Path(path).stem, marker=".")
    ax.set_xlabel("epoch")
    ax.set_ylabel("validation mean Dice")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)
    return out_path


def plot_dice_bars(summary_paths: list[Path], out_path: Path) -> Path:
    """Per-class Dice mean/std bars, grouped by run."""
    runs = []
    for path in summary_paths:
        header, rows = _read_csv(path)
        cols = {name: i for i, name in enumerate(header)}
        entries = {r[cols["row"]]: (float(r[cols["dice_mean"]]),
                                    float(r[cols["dice_std"]])) for r in rows}
        runs.append((Path(path).parent.name or Path(path).stem, entries))
    classes = [k for k in runs[0][1] if k != "overall"] + ["overall"]
    fig, ax = plt.subplots(figsize=(8, 4))
    width = 0.8 / len(runs)
    for i, (name, entries) in enumerate(runs):
        xs = [j + i * width for j in range(len(classes))]
        means = [entries.get(c, (0.0, 0.0))[0] for c in classes]
        stds = [entries.get(c, (0.0, 0.0))[1] for c in classes]
        ax.bar(xs, means, width=width, yerr=stds, capsize=2, label=name)
    ax.set_xticks([j + 0.4 - width / 2 for j in range(len(classes))])
    ax.set_xticklabels(classes, rotation=20)
    ax.set_ylabel("Dice")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)
    return out_path
