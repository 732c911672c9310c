"""Attack measurement: success rates, transfer, saliency risk, deltas, physical simulation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import uniform_filter

from .imageops import PatchPlacement, resample
from .seeding import derive_seed

SURROUND_SCALES = (3, 7, 15)


def success_rate(
    classifier,
    samples: Sequence[tuple[torch.Tensor, int]],
    targeted: bool = False,
    target: int | None = None,
) -> float:
    """Fraction of samples misclassified (untargeted) or hitting the target."""
    if len(samples) == 0:
        raise ValueError("success rate of an empty sample list is undefined")
    if targeted and target is None:
        raise ValueError("targeted success rate needs a target class")
    hits = 0
    for x_adv, label in samples:
        pred = classifier.predict(x_adv)
        hits += int(pred == target) if targeted else int(pred != label)
    return hits / len(samples)


def transfer_matrix(
    models: Mapping[str, object],
    adv_sets: Mapping[str, Sequence[tuple[torch.Tensor, int]]],
) -> tuple[np.ndarray, list[str], list[str]]:
    """Entry (s, t): success on model t of samples crafted against model s.

    The diagonal holds white-box rates when adv_sets keys match models.
    """
    sources = list(adv_sets.keys())
    targets = list(models.keys())
    for name, clf in models.items():
        for src, samples in adv_sets.items():
            for x_adv, _ in samples:
                if (x_adv.shape[1], x_adv.shape[2]) != clf.input_hw:
                    raise ValueError(
                        f"sample size {tuple(x_adv.shape[1:])} from {src!r} does not "
                        f"match input {clf.input_hw} of model {name!r}"
                    )
    matrix = np.zeros((len(sources), len(targets)))
    for i, src in enumerate(sources):
        for j, tgt in enumerate(targets):
            matrix[i, j] = success_rate(models[tgt], adv_sets[src])
    return matrix, sources, targets


def saliency_map(x: torch.Tensor) -> np.ndarray:
    """Static center-surround saliency on intensity and color-opponent channels.

    For each channel and surround scale, the response is the absolute
    difference between the pixel and its box-filtered surround; responses
    sum over channels and scales and max-normalize. Deterministic.
    """
    if x.dim() != 3 or x.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got {tuple(x.shape)}")
    img = (x.detach().numpy().astype(np.float64) + 1.0) / 2.0
    r, g, b = img
    channels = (
        img.mean(axis=0),  # intensity
        r - g,  # red-green opponent
        b - (r + g) / 2.0,  # blue-yellow opponent
    )
    total = np.zeros_like(channels[0])
    for ch in channels:
        for size in SURROUND_SCALES:
            surround = uniform_filter(ch, size=size, mode="reflect")
            total += np.abs(ch - surround)
    peak = total.max()
    if peak > 0:
        total /= peak
    return total


@dataclass(frozen=True)
class DetectionRisk:
    """Saliency concentration at the patch site, and its rise over the clean image."""

    ratio: float  # mean saliency inside the patch / mean outside, on the patched image
    delta: float  # ratio(patched) - ratio(clean)


def _region_ratio(smap: np.ndarray, loc: PatchPlacement) -> float:
    mask = np.zeros(smap.shape, dtype=bool)
    mask[loc.top : loc.top + loc.height, loc.left : loc.left + loc.width] = True
    inside = float(smap[mask].mean())
    outside = float(smap[~mask].mean())
    if outside == 0.0:
        return 0.0 if inside == 0.0 else float("inf")
    return inside / outside


def detection_risk(x: torch.Tensor, x_adv: torch.Tensor, loc: PatchPlacement) -> DetectionRisk:
    """How much the patched region stands out to the saliency detector."""
    h, w = x.shape[1], x.shape[2]
    loc.validate_for(h, w)
    if loc.height == h and loc.width == w:
        raise ValueError("patch covers the whole image; no outside region to compare")
    ratio_adv = _region_ratio(saliency_map(x_adv), loc)
    ratio_clean = _region_ratio(saliency_map(x), loc)
    return DetectionRisk(ratio=ratio_adv, delta=ratio_adv - ratio_clean)


def pixel_delta_histogram(
    x: torch.Tensor, x_adv: torch.Tensor, loc: PatchPlacement | None = None
) -> np.ndarray:
    """Signed histogram of 8-bit pixel deltas, 511 bins for -255..255.

    With loc given, only elements inside the patch rectangle are counted.
    """
    if x.shape != x_adv.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_adv.shape)}")
    delta = (x_adv.detach().numpy().astype(np.float64) - x.detach().numpy()) * 127.5
    if loc is not None:
        delta = delta[:, loc.top : loc.top + loc.height, loc.left : loc.left + loc.width]
    levels = np.sign(delta) * np.floor(np.abs(delta) + 0.5)
    levels = np.clip(levels, -255, 255).astype(np.int64).ravel()
    return np.bincount(levels + 255, minlength=511)


def histogram_bins() -> np.ndarray:
    return np.arange(-255, 256)


def mass_outside(hist: np.ndarray, radius: int) -> float:
    """Fraction of histogram mass in bins with |delta| > radius."""
    total = hist.sum()
    if total == 0:
        return 0.0
    center = hist[255 - radius : 255 + radius + 1].sum()
    return float((total - center) / total)


@dataclass(frozen=True)
class PhysicalRecord:
    angle: float
    distance: float
    image: torch.Tensor
    pred: int
    flagged: bool  # prediction differs from the label


def _yaw_warp(x: torch.Tensor, angle_deg: float, plane_distance: float = 3.0) -> torch.Tensor:
    """Pinhole view of the image plane rotated about its vertical axis."""
    theta = np.deg2rad(angle_deg)
    h, w = x.shape[1], x.shape[2]
    ys = (2 * np.arange(h) + 1) / h - 1
    xs = (2 * np.arange(w) + 1) / w - 1
    gx, gy = np.meshgrid(xs, ys)
    c = plane_distance
    denom = c * np.cos(theta) - gx * np.sin(theta)
    u = c * gx / denom
    v = gy * (c + u * np.sin(theta)) / c
    grid = torch.from_numpy(np.stack([u, v], axis=-1).astype(np.float32))
    warped = F.grid_sample(
        x.unsqueeze(0), grid.unsqueeze(0), mode="bilinear",
        padding_mode="zeros", align_corners=False,
    )
    return warped.squeeze(0)


def _distance_blur(x: torch.Tensor, distance: float) -> torch.Tensor:
    h, w = x.shape[1], x.shape[2]
    small_h = max(1, int(round(h / distance)))
    small_w = max(1, int(round(w / distance)))
    if (small_h, small_w) == (h, w):
        return x
    return resample(resample(x, small_h, small_w), h, w)


def simulate_physical(
    classifier,
    image: torch.Tensor,
    label: int,
    angles: Sequence[float],
    distances: Sequence[float],
    jitter: float = 0.1,
    seed: int = 0,
) -> list[PhysicalRecord]:
    """Digital stand-in for photographing a printed image: perspective yaw,
    resolution loss with distance, and seeded lighting jitter.

    The (0 degree, distance 1) cell is the exact identity so it reproduces
    the purely digital result.
    """
    if len(angles) == 0 or len(distances) == 0:
        raise ValueError("angle and distance grids must be non-empty")
    for a in angles:
        if abs(a) > 45:
            raise ValueError(f"angle {a} outside +-45 degrees")
    for d in distances:
        if d < 1:
            raise ValueError(f"distance {d} must be >= 1")
    records = []
    for a in angles:
        for d in distances:
            if a == 0 and d == 1:
                timg = image.clone()
            else:
                timg = _yaw_warp(image, a)
                timg = _distance_blur(timg, d)
                if jitter > 0:
                    rng = np.random.default_rng(derive_seed(seed, "cell", f"{a}", f"{d}"))
                    contrast = 1.0 + rng.uniform(-jitter, jitter)
                    brightness = 2.0 * rng.uniform(-jitter, jitter)
                    timg = (timg * contrast + brightness).clamp(-1.0, 1.0)
            pred = classifier.predict(timg)
            records.append(
                PhysicalRecord(angle=a, distance=d, image=timg, pred=pred, flagged=pred != label)
            )
    return records


def select_fixtures(dataset, classifier, per_class: int = 1) -> list[tuple[int, int]]:
    """Deterministic evaluation images: for each class, the first test
    samples the classifier gets right. Returns (test index, label) pairs."""
    picked = []
    for c in range(dataset.num_classes):
        found = 0
        for i in range(dataset.test_x.shape[0]):
            if int(dataset.test_y[i]) != c:
                continue
            if classifier.predict(dataset.test_x[i]) == c:
                picked.append((i, c))
                found += 1
                if found == per_class:
                    break
    return picked
