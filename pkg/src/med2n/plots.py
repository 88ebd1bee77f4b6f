"""Matplotlib figures written next to the JSON/CSV reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "savefig.bbox": "tight",
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.frameon": False,
    # keep PNG bytes stable across runs
    "svg.hashsalt": "med2n",
}
SOURCE_COLOR = "#3b6fb6"
TARGET_COLOR = "#d9822b"


def _save(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def gate_counts(rows: list[dict], path: Path) -> Path:
    """Grouped bars of source/target filter counts per gated block."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 3.0))
        x = np.arange(len(rows))
        ax.bar(x - 0.18, [r["source_count"] for r in rows], 0.36, label="source", color=SOURCE_COLOR)
        ax.bar(x + 0.18, [r["target_count"] for r in rows], 0.36, label="target", color=TARGET_COLOR)
        ax.set_xticks(x, [f"block{r['block']}" for r in rows])
        ax.set_ylabel("filters assigned")
        ax.legend()
        return _save(fig, path)


def eval_reports(reports: list[dict], path: Path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.8, 3.0))
        labels = [f"{r['split']}\n{r['strategy']}" for r in reports]
        means = [r["mean_accuracy"] for r in reports]
        errs = [r["ci95"] for r in reports]
        colors = [TARGET_COLOR if r["split"].startswith("target") else SOURCE_COLOR for r in reports]
        ax.bar(np.arange(len(reports)), means, yerr=errs, color=colors, capsize=3)
        ax.set_xticks(np.arange(len(reports)), labels)
        ax.set_ylabel("accuracy (%)")
        ax.set_ylim(0, 100)
        return _save(fig, path)


def loss_curve(records: list[dict], key: str, path: Path, title: str = "") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 2.8))
        ax.plot([r["epoch"] + 1 for r in records], [r["losses"][key] for r in records], marker="o", ms=3)
        ax.set_xlabel("epoch")
        ax.set_ylabel(key)
        if title:
            ax.set_title(title)
        return _save(fig, path)


def activation_maps(image: np.ndarray, maps: dict[str, np.ndarray], filters: dict[str, int], path: Path) -> Path:
    """Input image beside the selected filters' normalized activation maps."""
    with plt.rc_context({**STYLE, "axes.grid": False}):
        fig, axes = plt.subplots(1, 1 + len(maps), figsize=(2.2 * (1 + len(maps)), 2.4))
        axes = np.atleast_1d(axes)
        axes[0].imshow(np.clip(image.transpose(1, 2, 0), 0, 1))
        axes[0].set_title("input")
        for ax, (dom, grid) in zip(axes[1:], maps.items()):
            ax.imshow(grid, cmap="inferno", vmin=0, vmax=1)
            ax.set_title(f"{dom} filter {filters[dom]}")
        for ax in axes:
            ax.set_xticks([])
            ax.set_yticks([])
        return _save(fig, path)


def trend(rows: list[dict], columns: list[str], path: Path) -> Path:
    """Per-seed accuracies of several models as connected points."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.8, 3.0))
        x = np.arange(len(columns))
        for r in rows:
            ax.plot(x, [r[c] for c in columns], marker="o", ms=3, alpha=0.7, label=f"seed {r['seed']}")
        ax.set_xticks(x, columns)
        ax.set_ylabel("novel-target accuracy (%)")
        ax.legend(fontsize=7)
        return _save(fig, path)
