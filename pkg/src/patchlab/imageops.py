"""Image tensors in model range, patch masking, and scale pyramids.

Images are torch tensors of shape (C, H, W) holding float32 values in
[-1, 1]. 8-bit pixel data maps into this range via v / 127.5 - 1; the
inverse rounds half away from zero, which makes the byte -> model ->
byte round trip the identity on all 256 levels.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

MODEL_MIN = -1.0
MODEL_MAX = 1.0


class PlacementError(ValueError):
    """Patch placement falls outside the image or has degenerate size."""


class PyramidError(ValueError):
    """Pyramid parameters produce an unusable scale sequence."""


def round_half_up(value: float) -> int:
    """Round to nearest int, halves away from zero (0.5 -> 1)."""
    return int(math.floor(value + 0.5)) if value >= 0 else -int(math.floor(-value + 0.5))


def bytes_to_model(pixels: np.ndarray) -> torch.Tensor:
    """Convert (H, W, C) or (H, W) uint8 pixels to a (C, H, W) model-range tensor."""
    arr = np.asarray(pixels)
    if arr.dtype != np.uint8:
        raise ValueError(f"expected uint8 pixels, got {arr.dtype}")
    if arr.ndim == 2:
        arr = arr[:, :, None]
    data = arr.astype(np.float32) / 127.5 - 1.0
    return torch.from_numpy(np.ascontiguousarray(data.transpose(2, 0, 1)))


def model_to_bytes(image: torch.Tensor) -> np.ndarray:
    """Convert a (C, H, W) model-range tensor back to (H, W, C) uint8 pixels."""
    arr = image.detach().cpu().numpy().astype(np.float64)
    levels = (arr + 1.0) * 127.5
    rounded = np.sign(levels) * np.floor(np.abs(levels) + 0.5)
    return np.clip(rounded, 0, 255).astype(np.uint8).transpose(1, 2, 0)


def load_png(path) -> torch.Tensor:
    """Read an 8-bit RGB PNG into model range."""
    with Image.open(path) as im:
        return bytes_to_model(np.asarray(im.convert("RGB")))


def save_png(image: torch.Tensor, path) -> None:
    """Write a (3, H, W) model-range tensor as an 8-bit RGB PNG."""
    Image.fromarray(model_to_bytes(image)).save(path, format="PNG")


@dataclass(frozen=True)
class PatchPlacement:
    """Top-left anchored patch rectangle, in pixels."""

    top: int
    left: int
    height: int
    width: int

    def __post_init__(self):
        if self.height <= 0 or self.width <= 0:
            raise PlacementError(f"patch size must be positive, got {self.height}x{self.width}")
        if self.top < 0 or self.left < 0:
            raise PlacementError(f"negative placement origin ({self.top}, {self.left})")

    def validate_for(self, image_h: int, image_w: int) -> None:
        if self.top + self.height > image_h or self.left + self.width > image_w:
            raise PlacementError(
                f"placement {self} exceeds image bounds ({image_h}, {image_w})"
            )

    def mask(self, image_h: int, image_w: int) -> torch.Tensor:
        """Binary (H, W) location mask with exactly height*width ones."""
        self.validate_for(image_h, image_w)
        m = torch.zeros(image_h, image_w, dtype=torch.float32)
        m[self.top : self.top + self.height, self.left : self.left + self.width] = 1.0
        return m

    def scaled_to(self, src_hw: tuple[int, int], dst_hw: tuple[int, int]) -> "PatchPlacement":
        """Proportionally rescale the placement from src_hw onto dst_hw.

        Sizes round half up per axis; a patch that rounds away entirely is
        rejected. The origin is clamped so the rectangle stays in bounds.
        """
        sy = dst_hw[0] / src_hw[0]
        sx = dst_hw[1] / src_hw[1]
        h = round_half_up(self.height * sy)
        w = round_half_up(self.width * sx)
        if h < 1 or w < 1:
            raise PyramidError(
                f"patch {self.height}x{self.width} vanishes when scaled to {dst_hw}"
            )
        top = min(round_half_up(self.top * sy), dst_hw[0] - h)
        left = min(round_half_up(self.left * sx), dst_hw[1] - w)
        return PatchPlacement(top=max(top, 0), left=max(left, 0), height=h, width=w)

    def to_json(self) -> str:
        return json.dumps(
            {"top": self.top, "left": self.left, "height": self.height, "width": self.width}
        )

    @classmethod
    def from_json(cls, text: str) -> "PatchPlacement":
        d = json.loads(text)
        return cls(top=d["top"], left=d["left"], height=d["height"], width=d["width"])


def apply_patch(x: torch.Tensor, p: torch.Tensor, loc: PatchPlacement) -> torch.Tensor:
    """Composite patch p onto x at loc: m*p + (1-m)*x with a binary mask.

    Pixels outside the patch rectangle are bit-identical to x. Gradients
    flow to both x and p.
    """
    if x.dim() != 3 or p.dim() != 3:
        raise ValueError(f"expected (C, H, W) tensors, got {tuple(x.shape)} and {tuple(p.shape)}")
    loc.validate_for(x.shape[1], x.shape[2])
    if p.shape[0] != x.shape[0] or p.shape[1] != loc.height or p.shape[2] != loc.width:
        raise ValueError(
            f"patch shape {tuple(p.shape)} does not match placement "
            f"({x.shape[0]}, {loc.height}, {loc.width})"
        )
    out = x.clone()
    out[:, loc.top : loc.top + loc.height, loc.left : loc.left + loc.width] = p
    return out


def crop(x: torch.Tensor, loc: PatchPlacement) -> torch.Tensor:
    """Extract the (C, h, w) sub-image at loc."""
    if x.dim() != 3:
        raise ValueError(f"expected a (C, H, W) tensor, got {tuple(x.shape)}")
    loc.validate_for(x.shape[1], x.shape[2])
    return x[:, loc.top : loc.top + loc.height, loc.left : loc.left + loc.width].clone()


def resample(x: torch.Tensor, target_h: int, target_w: int) -> torch.Tensor:
    """Bilinear resize (align_corners off), clamped back to model range."""
    if target_h < 1 or target_w < 1:
        raise ValueError(f"target size must be positive, got ({target_h}, {target_w})")
    if x.dim() != 3:
        raise ValueError(f"expected a (C, H, W) tensor, got {tuple(x.shape)}")
    if (x.shape[1], x.shape[2]) == (target_h, target_w):
        return x.clone()
    out = F.interpolate(
        x.unsqueeze(0), size=(target_h, target_w), mode="bilinear", align_corners=False
    ).squeeze(0)
    return out.clamp(MODEL_MIN, MODEL_MAX)


@dataclass(frozen=True)
class PyramidLevel:
    background: torch.Tensor
    patch_target: torch.Tensor
    placement: PatchPlacement


@dataclass(frozen=True)
class ScalePyramid:
    """Coarse-to-fine sequence of downsampled backgrounds and patch targets.

    Level K holds the original image; level i is scaled by r^(K-i) per axis
    with half-up rounding. The patch target at each level is the crop of
    that level's background at the proportionally scaled placement.
    """

    levels: tuple[PyramidLevel, ...]
    r: float

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    @property
    def finest(self) -> PyramidLevel:
        return self.levels[-1]


def pyramid_sizes(h: int, w: int, r: float, scales: int) -> list[tuple[int, int]]:
    """Per-level (H_i, W_i) for i = 0..scales, coarse to fine."""
    if not 0.0 < r < 1.0:
        raise PyramidError(f"scale factor must be in (0, 1), got {r}")
    if scales < 1:
        raise PyramidError(f"need at least two levels, got K={scales}")
    sizes = []
    for i in range(scales + 1):
        f = r ** (scales - i)
        sizes.append((round_half_up(h * f), round_half_up(w * f)))
    return sizes


def build_pyramid(
    x: torch.Tensor,
    loc: PatchPlacement,
    r: float,
    scales: int,
    min_size: int = 8,
) -> ScalePyramid:
    """Build the K+1 level pyramid of (patch target, background) pairs."""
    if x.dim() != 3:
        raise ValueError(f"expected a (C, H, W) tensor, got {tuple(x.shape)}")
    h, w = x.shape[1], x.shape[2]
    loc.validate_for(h, w)
    sizes = pyramid_sizes(h, w, r, scales)
    if min(sizes[0]) < min_size:
        raise PyramidError(
            f"too many scales: coarsest level {sizes[0]} underflows minimum size {min_size}"
        )
    levels = []
    for i, (hi, wi) in enumerate(sizes):
        background = x.clone() if i == scales else resample(x, hi, wi)
        loc_i = loc if i == scales else loc.scaled_to((h, w), (hi, wi))
        levels.append(
            PyramidLevel(background=background, patch_target=crop(background, loc_i), placement=loc_i)
        )
    return ScalePyramid(levels=tuple(levels), r=r)
