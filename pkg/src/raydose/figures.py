"""Matplotlib figure rendering for the report paths (loss curves, DVH
curves, attention heatmaps, dose previews)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from scipy import ndimage

from .metrics import DVHCurve


def _finish(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def save_loss_curve(history, path) -> Path:
    steps = [s for s, _ in history]
    values = [v for _, v in history]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, values, lw=0.8, alpha=0.5, label="loss")
    if len(values) >= 20:
        k = max(len(values) // 50, 5)
        smooth = np.convolve(values, np.ones(k) / k, mode="valid")
        ax.plot(steps[k - 1 :], smooth, lw=1.6, label=f"moving avg ({k})")
    ax.set_xlabel("step")
    ax.set_ylabel("weighted L1 noise loss")
    ax.set_yscale("log")
    ax.legend()
    return _finish(fig, path)


def save_dvh_figure(curves: dict[str, DVHCurve], path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, curve in curves.items():
        ax.plot(curve.dose_bins, 100.0 * curve.fraction, label=name)
    ax.set_xlabel("dose (Gy)")
    ax.set_ylabel("volume (%)")
    ax.set_ylim(0, 105)
    if title:
        ax.set_title(title)
    ax.legend()
    return _finish(fig, path)


def save_attention_heatmap(matrix: np.ndarray, path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 4))
    im = ax.imshow(matrix, cmap="viridis", vmin=0.0)
    ax.set_xlabel("key slice")
    ax.set_ylabel("query slice")
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.046)
    return _finish(fig, path)


def gradient_magnitude(image: np.ndarray) -> np.ndarray:
    """Sobel gradient magnitude of a 2D map; highlights beam edges."""
    gx = ndimage.sobel(image, axis=1)
    gy = ndimage.sobel(image, axis=0)
    return np.hypot(gx, gy)


def save_dose_panel(ct_slice, dose_slices: dict[str, np.ndarray], path, title="") -> Path:
    """One row of dose maps over the CT slice plus their gradient maps."""
    n = len(dose_slices)
    fig, axes = plt.subplots(2, n, figsize=(3.2 * n, 6.4), squeeze=False)
    for j, (name, dose2d) in enumerate(dose_slices.items()):
        axes[0][j].imshow(ct_slice, cmap="gray")
        im = axes[0][j].imshow(dose2d, cmap="jet", alpha=0.6)
        axes[0][j].set_title(name)
        axes[0][j].axis("off")
        axes[1][j].imshow(gradient_magnitude(dose2d), cmap="jet")
        axes[1][j].set_title(f"{name} gradient")
        axes[1][j].axis("off")
    fig.colorbar(im, ax=axes[0][-1], fraction=0.046)
    if title:
        fig.suptitle(title)
    return _finish(fig, path)
