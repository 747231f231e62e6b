"""Matplotlib figure rendering for the CLI report paths."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .geometry import CHAMFER_REPORT_SCALE, NORMAL_REPORT_SCALE
from .skinning_field import WeightGrid, midplane_slice


def _joint_colors(n: int) -> np.ndarray:
    cmap = plt.get_cmap("tab10")
    return np.array([cmap(i % 10)[:3] for i in range(n)])


def loss_curves(records, path: str | Path) -> None:
    keys = [k for k in ("cd", "normal", "rgl", "lbs", "reproj", "total") if any(r.losses.get(k, 0.0) != 0.0 for r in records)]
    epochs = [r.epoch for r in records]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for k in keys:
        ax.plot(epochs, [r.losses.get(k, 0.0) for r in records], label=k)
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(f"{records[0].stage} stage training losses")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def eval_metrics(records, path: str | Path, title: str = "held-out metrics") -> None:
    frames = [r.frame_id for r in records]
    cd = [r.chamfer * CHAMFER_REPORT_SCALE for r in records]
    nml = [r.normal * NORMAL_REPORT_SCALE for r in records]
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 5.5), sharex=True)
    ax1.plot(frames, cd, marker=".", lw=0.8)
    ax1.axhline(np.mean(cd), color="crimson", ls="--", lw=0.8, label=f"mean {np.mean(cd):.3f}")
    ax1.set_ylabel(r"Chamfer ($\times 10^{-4}\,m^2$)")
    ax1.legend(fontsize=8)
    ax1.set_title(title)
    ax2.plot(frames, nml, marker=".", lw=0.8, color="seagreen")
    ax2.axhline(np.mean(nml), color="crimson", ls="--", lw=0.8, label=f"mean {np.mean(nml):.3f}")
    ax2.set_ylabel(r"normal L1 ($\times 10^{-1}$)")
    ax2.set_xlabel("frame")
    ax2.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def _slice_image(grid: WeightGrid, axis: int) -> np.ndarray:
    sl = midplane_slice(grid, axis)  # (R, R, J)
    colors = _joint_colors(sl.shape[-1])
    img = sl @ colors
    return np.clip(img, 0.0, 1.0)


def field_slices(
    before: WeightGrid, after: WeightGrid, axis: int, path: str | Path
) -> None:
    """Side-by-side mid-plane slices of the raw and smoothed weight fields,
    color-coded by joint."""
    fig, axes = plt.subplots(1, 2, figsize=(9, 4.5))
    for ax, grid, name in ((axes[0], before, "nearest-neighbor diffusion"), (axes[1], after, "smoothed")):
        ax.imshow(np.transpose(_slice_image(grid, axis), (1, 0, 2)), origin="lower")
        ax.set_title(name)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
