"""Figures for reports: ROC curves, overhead bars and XAI example grids (PNG, Agg backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 100,
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}
# fixed metadata keeps PNG bytes stable across runs
_PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_roc(curves: Mapping[str, object], path, title: str = "") -> Path:
    """``curves`` maps a label to a RocResult (anything with fpr, tpr, auc)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.6, 3.4))
        ax.plot([0, 1], [0, 1], color="0.7", lw=0.8, ls="--")
        for label, r in curves.items():
            auc = "n/a" if r.auc is None else f"{r.auc:.3f}"
            ax.step(r.fpr, r.tpr, where="post", lw=1.2, label=f"{label} (AUC {auc})")
        ax.set_xlim(-0.01, 1.01)
        ax.set_ylim(-0.01, 1.01)
        ax.set_xlabel("false positive rate")
        ax.set_ylabel("true positive rate")
        if title:
            ax.set_title(title)
        ax.legend(loc="lower right", frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def plot_overhead(table: Mapping[str, Mapping[str, float]], path, title: str = "") -> Path:
    """Bar chart of mean per-frame time with min/median markers and % over baseline."""
    names = list(table)
    mean = np.array([table[n]["mean_ms"] for n in names])
    lo = np.array([table[n]["min_ms"] for n in names])
    med = np.array([table[n]["median_ms"] for n in names])
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.6, 3.0))
        xs = np.arange(len(names))
        ax.bar(xs, mean, color="#4c72b0", width=0.6)
        ax.plot(xs, lo, "k_", ms=12, label="min")
        ax.plot(xs, med, "wo", ms=3, mec="k", label="median")
        for x, n, m in zip(xs, names, mean):
            if n != "baseline":
                ax.annotate(f"+{table[n]['overhead_pct']:.0f}%", (x, m), ha="center",
                            va="bottom", fontsize=7, xytext=(0, 2), textcoords="offset points")
        ax.set_xticks(xs, names, rotation=20)
        ax.set_ylabel("ms per frame")
        ax.set_yscale("log")
        if title:
            ax.set_title(title)
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def _show(img: np.ndarray) -> np.ndarray:
    return np.clip(img.transpose(1, 2, 0), 0, 1)


def _show_map(m: np.ndarray) -> np.ndarray:
    a = np.abs(m).sum(axis=0)
    peak = a.max()
    return a / peak if peak > 0 else a


def plot_xai_grid(rows: Sequence[tuple[str, np.ndarray, Mapping[str, np.ndarray]]], path,
                  title: str = "") -> Path:
    """One row per example: the image, then ``|map|`` per method.

    ``rows`` holds ``(row_label, image, {method: map})`` with channels-first arrays.
    """
    if not rows:
        raise ValueError("nothing to plot")
    methods = list(rows[0][2])
    nc = 1 + len(methods)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(len(rows), nc, figsize=(1.3 * nc, 1.3 * len(rows)), squeeze=False)
        for r, (label, img, maps) in enumerate(rows):
            axes[r, 0].imshow(_show(img), interpolation="nearest")
            axes[r, 0].set_ylabel(label, rotation=0, ha="right", va="center")
            for c, m in enumerate(methods, start=1):
                axes[r, c].imshow(_show_map(maps[m]), cmap="inferno", vmin=0, vmax=1,
                                  interpolation="nearest")
            for ax in axes[r]:
                ax.set_xticks([])
                ax.set_yticks([])
        for c, name in enumerate(["image"] + methods):
            axes[0, c].set_title(name)
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        return _save(fig, path)
