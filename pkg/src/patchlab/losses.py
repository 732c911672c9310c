"""Objective terms for patch training: critic, margin, reconstruction, smoothness, printability."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import torch


class NonFiniteLossError(RuntimeError):
    """A loss component went non-finite; carries the offending values."""


@dataclass(frozen=True)
class LossWeights:
    """Relative weights of the composite objective.

    gan, rec, tv and nps scale their terms; margin is the confidence
    margin of the attack loss; gradient_penalty is the critic penalty
    coefficient. nps = 0 disables the printability term.
    """

    gan: float = 0.1
    rec: float = 10.0
    tv: float = 1e-4
    nps: float = 0.0
    margin: float = 0.0
    gradient_penalty: float = 10.0

    def __post_init__(self):
        for name in ("gan", "rec", "tv", "nps", "margin", "gradient_penalty"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0, got {getattr(self, name)}")


def gan_loss(
    critic,
    real: torch.Tensor,
    fake: torch.Tensor,
    gp_weight: float = 10.0,
    mix: float | None = None,
    generator: torch.Generator | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Wasserstein critic and generator losses with a gradient penalty.

    critic maps a (C, H, W) image to a score map; scores are averaged.
    The penalty is taken on the straight-line interpolate between real
    and fake at a uniform mixing coefficient (fixable via `mix` for
    tests). Returns (critic_loss, generator_loss).
    """
    if real.shape != fake.shape:
        raise ValueError(f"real {tuple(real.shape)} and fake {tuple(fake.shape)} differ in shape")
    score_fake = critic(fake).mean()
    generator_loss = -score_fake
    critic_loss = score_fake - critic(real).mean()
    if gp_weight > 0:
        if mix is None:
            u = torch.rand(1, generator=generator).item()
        else:
            u = float(mix)
        interp = (u * real + (1.0 - u) * fake.detach()).requires_grad_(True)
        scores = critic(interp)
        grads = torch.autograd.grad(
            outputs=scores.sum(), inputs=interp, create_graph=True, retain_graph=True
        )[0]
        penalty = (grads.flatten().norm(2) - 1.0) ** 2
        critic_loss = critic_loss + gp_weight * penalty
    return critic_loss, generator_loss


def cw_margin(
    logits: torch.Tensor, label: int, kappa: float = 0.0, targeted: bool = False
) -> torch.Tensor:
    """Margin loss on logits, clamped below at -kappa.

    Untargeted: max(Z_y - max_{c != y} Z_c, -kappa) for true class y.
    Targeted:   max(max_{c != t} Z_c - Z_t, -kappa) for target class t,
    where `label` carries t.
    """
    if logits.dim() != 1:
        raise ValueError(f"expected a 1-D logit vector, got shape {tuple(logits.shape)}")
    n = logits.shape[0]
    if not 0 <= label < n:
        raise ValueError(f"class {label} out of range for {n} classes")
    others = torch.cat([logits[:label], logits[label + 1 :]])
    if targeted:
        margin = others.max() - logits[label]
    else:
        margin = logits[label] - others.max()
    return torch.clamp(margin, min=-kappa)


def attack_loss(
    classifier,
    x_adv: torch.Tensor,
    label: int,
    kappa: float = 0.0,
    targeted: bool = False,
) -> torch.Tensor:
    """Margin attack loss of the composited full-resolution image.

    `label` is the true class when untargeted and the target class when
    targeted. classifier must expose logits(x) for a (C, H, W) tensor.
    """
    return cw_margin(classifier.logits(x_adv), label, kappa=kappa, targeted=targeted)


def rec_loss(generated: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Squared L2 distance between the fixed-noise output and its target."""
    if generated.shape != target.shape:
        raise ValueError(
            f"shape mismatch {tuple(generated.shape)} vs {tuple(target.shape)}"
        )
    return ((generated - target) ** 2).sum()


def tv_loss(patch: torch.Tensor) -> torch.Tensor:
    """Anisotropic total variation, summed over channels, boundary terms dropped."""
    if patch.dim() != 3:
        raise ValueError(f"expected a (C, h, w) patch, got {tuple(patch.shape)}")
    if patch.shape[1] < 2 and patch.shape[2] < 2:
        warnings.warn("total variation of a 1x1 patch is identically zero")
        return torch.zeros((), dtype=patch.dtype)
    dv = (patch[:, 1:, :] - patch[:, :-1, :]).abs().sum() if patch.shape[1] > 1 else 0.0
    dh = (patch[:, :, 1:] - patch[:, :, :-1]).abs().sum() if patch.shape[2] > 1 else 0.0
    return dv + dh


def nps_loss(patch: torch.Tensor, palette: torch.Tensor, per_channel: bool = False) -> torch.Tensor:
    """Non-printability score: per pixel, the product over palette colors of
    the distance to that color, summed over pixels.

    Distances are Euclidean in RGB by default, or per-channel absolute
    difference products with per_channel=True. The product is evaluated in
    log space to avoid underflow; an exact zero factor short-circuits the
    pixel's contribution to zero.
    """
    if patch.dim() != 3 or patch.shape[0] != 3:
        raise ValueError(f"expected a (3, h, w) patch, got {tuple(patch.shape)}")
    palette = torch.as_tensor(palette, dtype=patch.dtype)
    if palette.numel() == 0:
        raise ValueError("palette must contain at least one color")
    if palette.dim() != 2 or palette.shape[1] != 3:
        raise ValueError(f"palette must be (P, 3), got {tuple(palette.shape)}")
    pixels = patch.reshape(3, -1).T  # (N, 3)
    diff = pixels.unsqueeze(1) - palette.unsqueeze(0)  # (N, P, 3)
    if per_channel:
        factors = diff.abs().reshape(diff.shape[0], -1)  # (N, P*3)
    else:
        factors = diff.pow(2).sum(dim=2).sqrt()  # (N, P)
    tiny = torch.finfo(patch.dtype).tiny
    log_products = torch.log(factors.clamp_min(tiny)).sum(dim=1)
    per_pixel = torch.exp(log_products)
    dead = (factors == 0).any(dim=1)
    per_pixel = torch.where(dead, torch.zeros_like(per_pixel), per_pixel)
    return per_pixel.sum()


@dataclass
class LossParts:
    """One training step's components, before weighting."""

    adv: torch.Tensor
    gan: torch.Tensor
    rec: torch.Tensor
    tv: torch.Tensor
    nps: torch.Tensor = field(default_factory=lambda: torch.zeros(()))

    def values(self) -> dict[str, float]:
        return {
            k: float(torch.as_tensor(getattr(self, k)).detach())
            for k in ("adv", "gan", "rec", "tv", "nps")
        }


def total_loss(parts: LossParts, weights: LossWeights) -> torch.Tensor:
    """Weighted composite objective; aborts on non-finite components."""
    for name in ("adv", "gan", "rec", "tv", "nps"):
        value = getattr(parts, name)
        if not torch.isfinite(torch.as_tensor(value)).all():
            raise NonFiniteLossError(f"{name} component is non-finite: {parts.values()}")
    return (
        parts.adv
        + weights.gan * parts.gan
        + weights.rec * parts.rec
        + weights.tv * parts.tv
        + weights.nps * parts.nps
    )
