"""Report figures, rendered off-screen to PNG."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.2),
    "figure.dpi": 100,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.fontsize": 8,
    "legend.frameon": False,
}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps the bytes stable between runs
    fig.savefig(path, metadata={"Software": None}, bbox_inches="tight")
    plt.close(fig)
    return path


def loss_curve(rows, path):
    """``rows``: dicts with ``epoch``, ``iteration`` and ``mean_loss``."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ep = np.array([r["epoch"] for r in rows])
        loss = np.array([r["mean_loss"] for r in rows])
        ax.plot(ep, loss, marker="o", ms=3, color="C0")
        for it in sorted({r["iteration"] for r in rows})[1:]:
            start = min(r["epoch"] for r in rows if r["iteration"] == it)
            ax.axvline(start - 0.5, color="0.6", lw=0.8, ls="--")
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean loss")
        return _save(fig, path)


def region_bars(stats, path):
    """Median reprojection error and inlier ratio per region label."""
    names = [s.label.name for s in stats.values()]
    med = [np.nan if s.median_error_px is None else s.median_error_px for s in stats.values()]
    ratio = [np.nan if s.inlier_ratio is None else s.inlier_ratio for s in stats.values()]
    with plt.rc_context(STYLE):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(7.0, 3.0))
        a1.bar(names, med, color="C1")
        a1.set_ylabel("median reprojection error (px)")
        a2.bar(names, ratio, color="C2")
        a2.set_ylabel("inlier ratio")
        a2.set_ylim(0, 1)
        for a in (a1, a2):
            a.tick_params(axis="x", labelrotation=15)
        fig.tight_layout()
        return _save(fig, path)


def mask_dynamics(shares: dict[str, list[float]], path):
    """Share of each label inside the masks, per iteration."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name, vals in shares.items():
            ax.plot(np.arange(2, 2 + len(vals)), vals, marker="o", label=name)
        ax.set_xlabel("iteration")
        ax.set_ylabel("share of masked cells")
        ax.legend()
        return _save(fig, path)


def error_cdf(errors: dict[str, np.ndarray], path, xlabel="translation error (cm)"):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name, e in errors.items():
            e = np.sort(np.asarray(e, dtype=float))
            if len(e):
                ax.step(e, np.arange(1, len(e) + 1) / len(e), where="post", label=name)
        ax.set_xlabel(xlabel)
        ax.set_ylabel("fraction of frames")
        ax.set_ylim(0, 1.02)
        ax.legend()
        return _save(fig, path)
