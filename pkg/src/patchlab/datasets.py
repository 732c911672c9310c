"""Procedural 10-class 32x32 RGB corpus and its on-disk manifest format.

Each image is a smooth random background with one class-defining motif
stamped at a random position. Shape is the class signal; motif color and
background vary per sample, so classifiers have to learn the geometry.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .imageops import bytes_to_model, load_png, save_png

CLASS_NAMES = (
    "disk",
    "ring",
    "cross",
    "saltire",
    "hbars",
    "vbars",
    "checker",
    "triangle",
    "frame",
    "dots",
)

MOTIF_SIZE = 16


@dataclass
class ImageDataset:
    """In-memory labeled image corpus in model range, split train/test."""

    train_x: torch.Tensor  # (N, C, H, W)
    train_y: torch.Tensor  # (N,) int64
    test_x: torch.Tensor
    test_y: torch.Tensor
    class_names: tuple[str, ...]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def image_hw(self) -> tuple[int, int]:
        return self.train_x.shape[2], self.train_x.shape[3]

    def validate(self) -> None:
        if self.train_x.shape[0] == 0:
            raise ValueError("empty training set")
        if self.test_x.shape[0] == 0:
            raise ValueError("empty test set")
        if len(torch.unique(self.train_y)) < 2:
            raise ValueError("training set must contain at least two classes")


def _motif_mask(class_id: int, size: int = MOTIF_SIZE) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy = cx = (size - 1) / 2.0
    d2 = (yy - cy) ** 2 + (xx - cx) ** 2
    name = CLASS_NAMES[class_id]
    if name == "disk":
        return d2 <= 36.0
    if name == "ring":
        return (d2 >= 16.0) & (d2 <= 36.0)
    if name == "cross":
        return (np.abs(yy - cy) <= 2.0) | (np.abs(xx - cx) <= 2.0)
    if name == "saltire":
        return (np.abs(yy - xx) <= 1.5) | (np.abs(yy + xx - (size - 1)) <= 1.5)
    if name == "hbars":
        return ((yy >= 2) & (yy <= 5)) | ((yy >= 10) & (yy <= 13))
    if name == "vbars":
        return ((xx >= 2) & (xx <= 5)) | ((xx >= 10) & (xx <= 13))
    if name == "checker":
        inside = (yy >= 2) & (yy <= 13) & (xx >= 2) & (xx <= 13)
        return inside & (((yy // 3).astype(int) + (xx // 3).astype(int)) % 2 == 0)
    if name == "triangle":
        return (yy >= 2) & (yy <= 13) & (np.abs(xx - cx) <= 0.55 * (yy - 2))
    if name == "frame":
        outer = (yy >= 2) & (yy <= 13) & (xx >= 2) & (xx <= 13)
        inner = (yy >= 5) & (yy <= 10) & (xx >= 5) & (xx <= 10)
        return outer & ~inner
    if name == "dots":
        on = np.zeros((size, size), dtype=bool)
        for py in (2, 7, 12):
            for px in (2, 7, 12):
                on[py : py + 2, px : px + 2] = True
        return on
    raise ValueError(f"unknown class id {class_id}")


def _smooth_background(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = rng.uniform(0.15, 0.55, size=(4, 4, 3))
    # bilinear upsample on a 4x4 color lattice
    src = np.linspace(0, 3, size)
    i0 = np.floor(src).astype(int).clip(0, 2)
    frac = src - i0
    rows = coarse[i0] * (1 - frac)[:, None, None] + coarse[i0 + 1] * frac[:, None, None]
    out = (
        rows[:, i0] * (1 - frac)[None, :, None]
        + rows[:, i0 + 1] * frac[None, :, None]
    )
    return out


def render_desk_image(class_id: int, rng: np.random.Generator, size: int = 32) -> np.ndarray:
    """Render one (size, size, 3) uint8 sample of the given class."""
    img = _smooth_background(rng, size)
    mask = _motif_mask(class_id)
    top = rng.integers(1, size - MOTIF_SIZE)
    left = rng.integers(1, size - MOTIF_SIZE)
    color = rng.uniform(0.60, 1.00, size=3)
    tile = img[top : top + MOTIF_SIZE, left : left + MOTIF_SIZE]
    tile[mask] = color
    img += rng.normal(0.0, 0.02, size=img.shape)
    return (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8)


def make_desk_dataset(
    train_per_class: int = 300,
    test_per_class: int = 80,
    seed: int = 0,
    size: int = 32,
) -> ImageDataset:
    """Generate the deterministic desk corpus in memory.

    Samples pass through 8-bit quantization so in-memory tensors match
    what a PNG round trip would load.
    """
    rng = np.random.default_rng(seed)
    splits = {}
    for split, per_class in (("train", train_per_class), ("test", test_per_class)):
        xs, ys = [], []
        for c in range(len(CLASS_NAMES)):
            for _ in range(per_class):
                xs.append(bytes_to_model(render_desk_image(c, rng, size)))
                ys.append(c)
        order = rng.permutation(len(xs))
        splits[split] = (
            torch.stack([xs[i] for i in order]),
            torch.tensor([ys[i] for i in order], dtype=torch.int64),
        )
    ds = ImageDataset(
        train_x=splits["train"][0],
        train_y=splits["train"][1],
        test_x=splits["test"][0],
        test_y=splits["test"][1],
        class_names=CLASS_NAMES,
    )
    ds.validate()
    return ds


def write_dataset(ds: ImageDataset, root: Path) -> None:
    """Write PNGs plus (path, label) CSV manifests and a meta sidecar."""
    root = Path(root)
    for split, xs, ys in (
        ("train", ds.train_x, ds.train_y),
        ("test", ds.test_x, ds.test_y),
    ):
        img_dir = root / split
        img_dir.mkdir(parents=True, exist_ok=True)
        with open(root / f"{split}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["path", "label"])
            for i in range(xs.shape[0]):
                rel = f"{split}/{split}_{i:05d}.png"
                save_png(xs[i], root / rel)
                writer.writerow([rel, int(ys[i])])
    meta = {
        "class_names": list(ds.class_names),
        "image_size": list(ds.image_hw),
        "train_count": int(ds.train_x.shape[0]),
        "test_count": int(ds.test_x.shape[0]),
    }
    (root / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _read_split(root: Path, split: str) -> tuple[torch.Tensor, torch.Tensor]:
    manifest = root / f"{split}.csv"
    if not manifest.exists():
        raise FileNotFoundError(f"dataset manifest {manifest} not found")
    xs, ys = [], []
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh):
            xs.append(load_png(root / row["path"]))
            ys.append(int(row["label"]))
    return torch.stack(xs), torch.tensor(ys, dtype=torch.int64)


def load_dataset(root: Path) -> ImageDataset:
    """Load an on-disk corpus written by write_dataset."""
    root = Path(root)
    meta = json.loads((root / "meta.json").read_text())
    train_x, train_y = _read_split(root, "train")
    test_x, test_y = _read_split(root, "test")
    ds = ImageDataset(
        train_x=train_x,
        train_y=train_y,
        test_x=test_x,
        test_y=test_y,
        class_names=tuple(meta["class_names"]),
    )
    ds.validate()
    return ds


def make_blob_dataset(per_class: int = 60, seed: int = 0, size: int = 8) -> ImageDataset:
    """Two flat-color classes around distinct means: linearly separable by design."""
    rng = np.random.default_rng(seed)
    means = (0.30, 0.70)
    xs, ys = [], []
    for split_count in (per_class, max(per_class // 3, 8)):
        split_x, split_y = [], []
        for c, mean in enumerate(means):
            colors = np.clip(rng.normal(mean, 0.05, size=(split_count, 3)), 0.0, 1.0)
            for col in colors:
                img = np.tile(col, (size, size, 1))
                img += rng.normal(0.0, 0.01, size=img.shape)
                split_x.append(bytes_to_model((np.clip(img, 0, 1) * 255).round().astype(np.uint8)))
                split_y.append(c)
        xs.append(torch.stack(split_x))
        ys.append(torch.tensor(split_y, dtype=torch.int64))
    return ImageDataset(
        train_x=xs[0], train_y=ys[0], test_x=xs[1], test_y=ys[1], class_names=("dark", "light")
    )
