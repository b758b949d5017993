"""Report figures. Everything renders off-screen to PNG files."""
from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# no timestamp or version in the file, so identical data gives identical bytes
PNG_META = {"Software": None}


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=PNG_META)
    plt.close(fig)


def _legend(ax) -> None:
    if ax.get_legend_handles_labels()[0]:
        ax.legend()


def training_curves(rows, path) -> None:
    """Losses and accuracies per epoch from EpochRow-like dicts."""
    ep = [r["epoch"] for r in rows]
    fig, (a, b) = plt.subplots(1, 2, figsize=(9, 3.5))
    for key, label in (("loss_T", "transition loss"), ("loss_tar", "target loss")):
        ys = [r[key] for r in rows]
        if not all(math.isnan(y) for y in ys):
            a.plot(ep, ys, label=label)
    a.set_xlabel("epoch")
    a.set_ylabel("loss")
    _legend(a)
    for key, label in (("nat_acc", "natural"), ("adv_acc", "adversarial")):
        pts = [(e, r[key]) for e, r in zip(ep, rows) if not math.isnan(r[key])]
        if pts:
            b.plot(*zip(*pts), marker="o", label=label)
    b.set_xlabel("epoch")
    b.set_ylabel("test accuracy")
    b.set_ylim(0, 1.02)
    _legend(b)
    _save(fig, path)


def accuracy_bars(rows, path, title: str = "") -> None:
    names = [r["attack"] for r in rows]
    x = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(max(4, 1.4 * len(rows)), 3.5))
    ax.bar(x - 0.2, [r["accuracy"] for r in rows], 0.4, label="combined")
    ax.bar(x + 0.2, [r["model_t"] for r in rows], 0.4, label="target alone")
    ax.set_xticks(x, names, rotation=20, ha="right")
    ax.set_ylim(0, 1.02)
    ax.set_ylabel("accuracy")
    if title:
        ax.set_title(title)
    ax.legend()
    _save(fig, path)


def epsilon_sweep(epsilons, series: dict, path, xlabel: str = "epsilon") -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, ys in series.items():
        ax.plot(epsilons, ys, marker="o", label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1.02)
    ax.legend()
    _save(fig, path)


def roc_curve(scores: np.ndarray, is_adv: np.ndarray, path, auc: float) -> None:
    """Empirical ROC, one vertex per distinct threshold."""
    order = np.argsort(-scores, kind="stable")
    s, pos = scores[order], is_adv[order]
    cut = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tpr = np.r_[0.0, np.cumsum(pos)[cut] / max(pos.sum(), 1)]
    fpr = np.r_[0.0, np.cumsum(~pos)[cut] / max((~pos).sum(), 1)]
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.plot(fpr, tpr, label=f"AUROC {auc:.3f}")
    ax.plot([0, 1], [0, 1], ls="--", c="grey", lw=0.8)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.legend(loc="lower right")
    _save(fig, path)


def matrix_heatmaps(mats: dict, path) -> None:
    """Side-by-side heatmaps of C x C matrices (e.g. mean transition matrix per group)."""
    fig, axes = plt.subplots(1, len(mats), figsize=(3.6 * len(mats), 3.4), squeeze=False)
    for n, (ax, (title, m)) in enumerate(zip(axes[0], mats.items())):
        im = ax.imshow(m, vmin=0, vmax=1, cmap="viridis")
        c = m.shape[0]
        ax.set_xticks(range(c))
        ax.set_yticks(range(c))
        ax.set_xlabel("natural label")
        if n == 0:
            ax.set_ylabel("mixture label")
        ax.set_title(title)
        for i in range(c):
            for j in range(c):
                ax.text(j, i, f"{m[i, j]:.2f}", ha="center", va="center", fontsize=7,
                        color="white" if m[i, j] < 0.5 else "black")
    fig.colorbar(im, ax=axes[0].tolist(), shrink=0.8)
    fig.savefig(path, dpi=110, metadata=PNG_META)
    plt.close(fig)
