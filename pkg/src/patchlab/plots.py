"""Matplotlib renderings for reports: histograms, grids, matrices, overlays."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .imageops import model_to_bytes

# stable PNG bytes across runs
_SAVEFIG = {"dpi": 120, "metadata": {"Software": None}}


def save_delta_histogram(hists: dict[str, np.ndarray], path: Path, span: int = 64) -> Path:
    """Overlayed signed pixel-delta histograms, log-scaled counts."""
    fig, ax = plt.subplots(figsize=(6, 4))
    bins = np.arange(-255, 256)
    keep = (bins >= -span) & (bins <= span)
    for label, hist in hists.items():
        ax.plot(bins[keep], hist[keep], label=label, linewidth=1.2)
    ax.set_yscale("symlog")
    ax.set_xlabel("pixel delta (8-bit levels)")
    ax.set_ylabel("count")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, **_SAVEFIG)
    plt.close(fig)
    return Path(path)


def save_transfer_heatmap(
    matrix: np.ndarray, sources: list[str], targets: list[str], path: Path
) -> Path:
    fig, ax = plt.subplots(figsize=(1.2 + 0.9 * len(targets), 1.2 + 0.9 * len(sources)))
    im = ax.imshow(matrix, vmin=0.0, vmax=1.0, cmap="viridis")
    ax.set_xticks(range(len(targets)), targets, rotation=45, ha="right")
    ax.set_yticks(range(len(sources)), sources)
    ax.set_xlabel("evaluated on")
    ax.set_ylabel("crafted against")
    for i in range(matrix.shape[0]):
        for j in range(matrix.shape[1]):
            ax.text(j, i, f"{matrix[i, j]:.2f}", ha="center", va="center", color="w", fontsize=8)
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, **_SAVEFIG)
    plt.close(fig)
    return Path(path)


def save_robustness_grid(
    success: np.ndarray, angles: list[float], distances: list[float], path: Path, title: str = ""
) -> Path:
    """Success fraction per (angle, distance) cell."""
    fig, ax = plt.subplots(figsize=(1.5 + 0.8 * len(distances), 1.5 + 0.8 * len(angles)))
    im = ax.imshow(success, vmin=0.0, vmax=1.0, cmap="magma")
    ax.set_xticks(range(len(distances)), [f"{d:g}" for d in distances])
    ax.set_yticks(range(len(angles)), [f"{a:g}" for a in angles])
    ax.set_xlabel("distance")
    ax.set_ylabel("angle (deg)")
    if title:
        ax.set_title(title)
    for i in range(success.shape[0]):
        for j in range(success.shape[1]):
            ax.text(j, i, f"{success[i, j]:.2f}", ha="center", va="center", color="w", fontsize=8)
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, **_SAVEFIG)
    plt.close(fig)
    return Path(path)


def save_heatmap_overlay(image, heatmap: np.ndarray, path: Path, alpha: float = 0.5) -> Path:
    """Jet-colormapped heatmap alpha-blended over the image."""
    base = model_to_bytes(image).astype(np.float64) / 255.0
    colored = matplotlib.colormaps["jet"](np.clip(heatmap, 0.0, 1.0))[:, :, :3]
    blend = (1 - alpha) * base + alpha * colored
    fig, ax = plt.subplots(figsize=(3, 3))
    ax.imshow(blend)
    ax.axis("off")
    fig.tight_layout(pad=0.1)
    fig.savefig(path, **_SAVEFIG)
    plt.close(fig)
    return Path(path)


def save_loss_curves(curves: list[list[dict]], path: Path) -> Path:
    """Per-scale component trajectories from stack training."""
    fig, axes = plt.subplots(1, max(len(curves), 1), figsize=(4 * max(len(curves), 1), 3))
    if len(curves) == 1:
        axes = [axes]
    for level, (ax, curve) in enumerate(zip(axes, curves)):
        if not curve:
            continue
        iters = [row["iteration"] for row in curve]
        for key in ("adv", "rec", "critic"):
            ax.plot(iters, [row[key] for row in curve], label=key, linewidth=1.0)
        ax.set_title(f"scale {level}")
        ax.set_xlabel("iteration")
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, **_SAVEFIG)
    plt.close(fig)
    return Path(path)


def save_image_grid(images, labels: list[str], path: Path, cols: int = 5) -> Path:
    """Small gallery of model-range images."""
    n = len(images)
    rows = (n + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(1.6 * cols, 1.8 * rows), squeeze=False)
    for i in range(rows * cols):
        ax = axes[i // cols][i % cols]
        ax.axis("off")
        if i < n:
            ax.imshow(model_to_bytes(images[i]))
            ax.set_title(labels[i], fontsize=7)
    fig.tight_layout()
    fig.savefig(path, **_SAVEFIG)
    plt.close(fig)
    return Path(path)
