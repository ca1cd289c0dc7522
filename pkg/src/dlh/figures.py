"""Matplotlib rendering for the report paths.

Every function takes plain arrays/rows and writes one PNG next to the
delimited output it illustrates. The Agg backend is forced so figures
render identically headless.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def save_training_curves(rows: Sequence[dict], path: str | Path) -> Path:
    """Loss, reconstruction, mean depth and beta against iteration."""
    it = [r["iter"] for r in rows]
    fig, axes = plt.subplots(2, 2, figsize=(10, 6))
    axes[0, 0].plot(it, [r["loss"] for r in rows], lw=0.8)
    axes[0, 0].set_title("loss")
    axes[0, 1].plot(it, [r["recon_nats"] for r in rows], lw=0.8, color="tab:orange")
    axes[0, 1].set_title("recon nats")
    axes[1, 0].plot(it, [r["mean_depth"] for r in rows], lw=0.8, color="tab:green")
    axes[1, 0].set_title("mean depth")
    axes[1, 1].plot(it, [r["beta"] for r in rows], lw=0.8, color="tab:red")
    axes[1, 1].set_title("beta")
    for ax in axes.flat:
        ax.set_xlabel("iter")
    fig.tight_layout()
    return _save(fig, path)


def save_eval_curves(per_frame: Sequence[dict], path: str | Path) -> Path:
    """Per-frame SSIM and PSNR of the selected rollouts."""
    t = [r["t"] for r in per_frame]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
    ax1.plot(t, [r["ssim"] for r in per_frame], marker=".", lw=0.9)
    ax1.set_xlabel("frames ahead")
    ax1.set_ylabel("SSIM")
    ax2.plot(t, [r["psnr"] for r in per_frame], marker=".", lw=0.9, color="tab:orange")
    ax2.set_xlabel("frames ahead")
    ax2.set_ylabel("PSNR (dB)")
    fig.tight_layout()
    return _save(fig, path)


def save_indicator_raster(indicators: np.ndarray, path: str | Path) -> Path:
    """Binary raster of change indicators, one row per level, bottom first."""
    ind = np.asarray(indicators)
    if ind.ndim != 2:
        raise ValueError("expected indicators [T, N]")
    fig, ax = plt.subplots(figsize=(max(4, ind.shape[0] / 8), 1 + ind.shape[1] * 0.5))
    ax.imshow(
        ind.T, aspect="auto", interpolation="nearest", cmap="Greys", vmin=0, vmax=1
    )
    ax.set_yticks(range(ind.shape[1]))
    ax.set_yticklabels([f"L{n}" for n in range(1, ind.shape[1] + 1)])
    ax.set_xlabel("t")
    ax.set_title("change indicators (dark = change)")
    fig.tight_layout()
    return _save(fig, path)


def save_kl_bars(
    state: np.ndarray, indicator: np.ndarray, path: str | Path
) -> Path:
    """Per-level KL cost split into state and indicator shares."""
    n = len(state)
    x = np.arange(1, n + 1)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar(x, state, width=0.6, label="state")
    ax.bar(x, indicator, width=0.6, bottom=state, label="indicator")
    ax.set_xticks(x)
    ax.set_xticklabels([f"L{i}" for i in x])
    ax.set_ylabel("nats per sequence")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def save_prior_change_bars(rows: Sequence[dict], path: str | Path) -> Path:
    """Factor-head change probability by inferred condition across switch rates."""
    lams = sorted({r["lambda"] for r in rows})
    conditions = ("change", "static")
    width = 0.35
    fig, ax = plt.subplots(figsize=(5.5, 3.4))
    for ci, cond in enumerate(conditions):
        means, errs, xs = [], [], []
        for li, lam in enumerate(lams):
            match = [r for r in rows if r["lambda"] == lam and r["condition"] == cond]
            if not match:
                continue
            xs.append(li + (ci - 0.5) * width)
            means.append(match[0]["mean_p"])
            errs.append(match[0]["stderr"])
        ax.bar(xs, means, width=width, yerr=errs, capsize=3, label=cond)
    ax.set_xticks(range(len(lams)))
    ax.set_xticklabels([f"{lam:g}" for lam in lams])
    ax.set_xlabel("switch rate")
    ax.set_ylabel("p(change)")
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def save_image_grid(
    frames: np.ndarray, path: str | Path, ncols: int = 8, title: str | None = None
) -> Path:
    """Grid of [0, 1] HWC frames."""
    frames = np.asarray(frames)
    n = frames.shape[0]
    ncols = min(ncols, n)
    nrows = (n + ncols - 1) // ncols
    fig, axes = plt.subplots(
        nrows, ncols, figsize=(ncols * 1.3, nrows * 1.3), squeeze=False
    )
    for i in range(nrows * ncols):
        ax = axes[i // ncols][i % ncols]
        ax.axis("off")
        if i < n:
            ax.imshow(np.clip(frames[i], 0, 1), interpolation="nearest")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    return _save(fig, path)
