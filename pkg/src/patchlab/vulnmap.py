"""Gradient-weighted class activation maps and patch placement selection."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .imageops import PatchPlacement


@dataclass(frozen=True)
class VulnerabilityMap:
    """Model-sensitivity heatmap at input resolution.

    heatmap is max-normalized (peak 1.0) unless the raw map is identically
    zero; peak records the pre-normalization maximum and lowres the raw
    feature-resolution map before upsampling.
    """

    heatmap: np.ndarray  # (H, W) float32, >= 0
    lowres: np.ndarray  # (H_f, W_f) float32, >= 0, unnormalized
    class_index: int
    point: str
    peak: float


def gradcam(classifier, x: torch.Tensor, class_index: int, point: str = "last") -> VulnerabilityMap:
    """Class activation map: feature maps weighted by average-pooled score gradients.

    Weights are the spatial means of d(score)/d(activation); the weighted
    channel sum passes through ReLU, is bilinearly upsampled to the input
    size, and max-normalized.
    """
    grad, acts = classifier.score_gradient(x, class_index, wrt=point)
    if acts.shape[1] == 0 or acts.shape[2] == 0:
        raise ValueError(f"feature point {point!r} has zero spatial size")
    alpha = grad.mean(dim=(1, 2))
    cam = torch.relu((alpha[:, None, None] * acts).sum(dim=0))
    lowres = cam.numpy().astype(np.float32)
    up = F.interpolate(
        cam[None, None], size=(x.shape[1], x.shape[2]), mode="bilinear", align_corners=False
    )[0, 0].numpy()
    peak = float(up.max())
    heatmap = up / peak if peak > 0 else up
    return VulnerabilityMap(
        heatmap=heatmap.astype(np.float32),
        lowres=lowres,
        class_index=class_index,
        point=point,
        peak=peak,
    )


def window_sums(heatmap: np.ndarray, height: int, width: int) -> np.ndarray:
    """Sum of every height x width window, row-major grid of anchors."""
    m = np.asarray(heatmap, dtype=np.float64)
    if height > m.shape[0] or width > m.shape[1]:
        raise ValueError(
            f"window {height}x{width} larger than map {m.shape[0]}x{m.shape[1]}"
        )
    views = np.lib.stride_tricks.sliding_window_view(m, (height, width))
    return views.sum(axis=(2, 3))


def select_placement(vmap: VulnerabilityMap | np.ndarray, height: int, width: int) -> PatchPlacement:
    """Placement whose window captures the largest total heat.

    Ties break to the smallest (top, left) in row-major order.
    """
    heatmap = vmap.heatmap if isinstance(vmap, VulnerabilityMap) else vmap
    sums = window_sums(heatmap, height, width)
    flat = int(np.argmax(sums))
    top, left = divmod(flat, sums.shape[1])
    return PatchPlacement(top=top, left=left, height=height, width=width)


def save_map(vmap: VulnerabilityMap, path: Path) -> None:
    """Raw arrays as NPZ with a JSON sidecar of the map's metadata."""
    path = Path(path)
    np.savez(path, heatmap=vmap.heatmap, lowres=vmap.lowres)
    sidecar = {
        "class_index": vmap.class_index,
        "point": vmap.point,
        "peak": vmap.peak,
        "shape": list(vmap.heatmap.shape),
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_map(path: Path) -> VulnerabilityMap:
    path = Path(path)
    arrays = np.load(path if path.suffix == ".npz" else path.with_suffix(".npz"))
    meta = json.loads(path.with_suffix(".json").read_text())
    return VulnerabilityMap(
        heatmap=arrays["heatmap"],
        lowres=arrays["lowres"],
        class_index=meta["class_index"],
        point=meta["point"],
        peak=meta["peak"],
    )
