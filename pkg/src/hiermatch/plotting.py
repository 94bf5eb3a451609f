"""Figures written next to the text/CSV reports.  Uses the Agg backend only."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
}


def _figure(width: float = 5.0, height: "float | None" = None):
    golden = (math.sqrt(5) - 1.0) / 2.0
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(width, height or width * golden))
    return fig, ax


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(_RC):
        fig.tight_layout()
        fig.savefig(path)
    plt.close(fig)
    return path


def loss_curve(losses: Sequence[float], path, title: str = "training loss") -> Path:
    fig, ax = _figure()
    ax.plot(np.arange(1, len(losses) + 1), losses, color="k", lw=1.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean triplet loss")
    ax.set_title(title)
    if losses and min(losses) > 0:
        ax.set_yscale("log")
    return _save(fig, path)


def rank_histogram(ranks: Sequence[int], path, gallery_size: "int | None" = None) -> Path:
    ranks = np.asarray(ranks)
    top = gallery_size or int(ranks.max())
    fig, ax = _figure()
    ax.hist(ranks, bins=np.arange(0.5, top + 1.5), color="0.35")
    ax.axvline(10.5, color="tab:red", ls="--", lw=0.8, label="top-10 cut")
    ax.set_xlabel("rank of true match")
    ax.set_ylabel("queries")
    ax.legend(frameon=False)
    return _save(fig, path)


def ablation_bars(modes: Sequence[str], acc1: Sequence[Sequence[float]],
                  acc10: Sequence[Sequence[float]], path) -> Path:
    """Grouped bars of mean acc@1 / acc@10 per mode, whiskers at min and max over seeds."""
    x = np.arange(len(modes))
    w = 0.38
    fig, ax = _figure(width=max(5.0, 0.9 * len(modes) + 1.5))
    for off, vals, label, color in ((-w / 2, acc1, "acc@1", "0.25"), (w / 2, acc10, "acc@10", "0.65")):
        means = np.array([np.mean(v) if len(v) else np.nan for v in vals])
        lo = np.array([means[i] - np.min(v) if len(v) else 0 for i, v in enumerate(vals)])
        hi = np.array([np.max(v) - means[i] if len(v) else 0 for i, v in enumerate(vals)])
        ax.bar(x + off, means, w, yerr=[lo, hi], capsize=2, color=color, label=label)
    ax.set_xticks(x)
    ax.set_xticklabels(modes, rotation=20, ha="right")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("retrieval accuracy")
    ax.legend(frameon=False, ncol=2)
    return _save(fig, path)


def soft_levels(soft: Sequence[np.ndarray], path) -> Path:
    """Max soft weight and normalised entropy of each level's pair distribution."""
    peak = [float(np.max(q)) for q in soft]
    ent = [float(-(q * np.log(np.clip(q, 1e-300, None))).sum() / math.log(len(q))) if len(q) > 1 else 0.0
           for q in soft]
    fig, ax = _figure()
    lv = np.arange(len(soft))
    ax.plot(lv, peak, "o-", color="k", ms=3, label="max weight")
    ax.plot(lv, ent, "s--", color="0.5", ms=3, label="normalised entropy")
    ax.set_xlabel("hierarchy level")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(frameon=False)
    return _save(fig, path)
