"""Report figures rendered to PNG files (non-interactive backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .config import CLASSES  # noqa: E402


def _heatmap(ax, mat, title, fmt):
    mat = np.asarray(mat, dtype=float)
    im = ax.imshow(mat, cmap="viridis")
    ax.set_xticks(range(len(CLASSES)), CLASSES)
    ax.set_yticks(range(len(CLASSES)), CLASSES)
    ax.set_xlabel("predicted")
    ax.set_ylabel("observed")
    ax.set_title(title)
    hi = mat.max() if mat.size else 0
    for i in range(mat.shape[0]):
        for j in range(mat.shape[1]):
            ax.text(j, i, format(mat[i, j], fmt), ha="center", va="center",
                    color="black" if mat[i, j] > 0.6 * hi else "white", fontsize=8)
    return im


def plot_confusion(report: dict, path) -> Path:
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    _heatmap(axes[0], report["confusion"], f"confusion (n={report['n']})", ".0f")
    im = _heatmap(axes[1], report["gmgs_influence"], f"GMGS loss per cell (GMGS={report['gmgs']:.3f})", ".3f")
    fig.colorbar(im, ax=axes[1], fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def plot_history(history: list[dict], path) -> Path:
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 3.5))
    x = np.arange(1, len(history) + 1)
    a1.plot(x, [h["train_loss"] for h in history], marker="o")
    a1.set_xlabel("epoch (both stages)")
    a1.set_ylabel("training loss")
    a2.plot(x, [h["val_gmgs"] for h in history], marker="o", color="tab:orange")
    a2.set_xlabel("epoch (both stages)")
    a2.set_ylabel("validation GMGS")
    split = sum(1 for h in history if h["stage"] == 1)
    for ax in (a1, a2):
        if 0 < split < len(history):
            ax.axvline(split + 0.5, color="grey", ls="--", lw=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def plot_fold_summary(reports: list[dict], path) -> Path:
    keys = ("gmgs", "bss_geq_m", "tss_geq_m")
    fig, ax = plt.subplots(figsize=(6, 3.5))
    width = 0.8 / max(len(reports), 1)
    for i, r in enumerate(reports):
        vals = [r.get(k) if r.get(k) is not None else np.nan for k in keys]
        ax.bar(np.arange(len(keys)) + i * width, vals, width, label=f"fold {r['fold']}")
    ax.set_xticks(np.arange(len(keys)) + width * (len(reports) - 1) / 2, keys)
    ax.axhline(0, color="black", lw=0.6)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)
