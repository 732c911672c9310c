"""Reference attacks: bounded-norm PGD and an unconstrained direct patch optimizer."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .imageops import PatchPlacement, apply_patch, crop
from .losses import cw_margin

NORMS = ("linf", "l2")


@dataclass(frozen=True)
class PgdConfig:
    """Projected-gradient-descent settings; epsilon is in model-range units.

    epsilon = 0 is the degenerate identity attack. step_size defaults to
    epsilon / 10 when unset.
    """

    norm: str
    epsilon: float
    steps: int = 40
    step_size: float | None = None
    random_start: bool = False

    def __post_init__(self):
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}, got {self.norm!r}")
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.steps < 1:
            raise ValueError(f"step count must be >= 1, got {self.steps}")

    @property
    def step(self) -> float:
        return self.step_size if self.step_size is not None else self.epsilon / 10.0


def _project(delta: torch.Tensor, cfg: PgdConfig) -> torch.Tensor:
    if cfg.norm == "linf":
        return delta.clamp(-cfg.epsilon, cfg.epsilon)
    norm = delta.flatten(1).norm(2, dim=1).clamp_min(1e-12)
    scale = (cfg.epsilon / norm).clamp(max=1.0)
    return delta * scale.view(-1, 1, 1, 1)


def pgd_perturb(
    model: nn.Module,
    xb: torch.Tensor,
    yb: torch.Tensor,
    cfg: PgdConfig,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Batched PGD on the cross-entropy training loss, projected to the
    epsilon ball and to model range."""
    if cfg.epsilon == 0:
        return xb.clone()
    delta = torch.zeros_like(xb)
    if cfg.random_start:
        if cfg.norm == "linf":
            delta = (torch.rand(xb.shape, generator=generator) * 2 - 1) * cfg.epsilon
        else:
            delta = torch.randn(xb.shape, generator=generator)
            delta = _project(delta, cfg)
    x_adv = (xb + delta).clamp(-1.0, 1.0)
    for _ in range(cfg.steps):
        x_adv = x_adv.detach().requires_grad_(True)
        loss = nn.functional.cross_entropy(model(x_adv), yb)
        grad = torch.autograd.grad(loss, x_adv)[0]
        if cfg.norm == "linf":
            step = cfg.step * grad.sign()
        else:
            gnorm = grad.flatten(1).norm(2, dim=1).clamp_min(1e-12)
            step = cfg.step * grad / gnorm.view(-1, 1, 1, 1)
        delta = _project(x_adv.detach() + step - xb, cfg)
        x_adv = (xb + delta).clamp(-1.0, 1.0)
    return x_adv.detach()


def pgd_attack(
    classifier,
    x: torch.Tensor,
    y: int,
    cfg: PgdConfig,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Single-image PGD; the output stays within the epsilon ball of x."""
    xb = x.unsqueeze(0)
    yb = torch.tensor([y], dtype=torch.int64)
    return pgd_perturb(classifier.model, xb, yb, cfg, generator=generator).squeeze(0)


def perturbation_norm(x: torch.Tensor, x_adv: torch.Tensor, norm: str) -> float:
    delta = (x_adv - x).flatten()
    if norm == "linf":
        return float(delta.abs().max())
    return float(delta.norm(2))


def direct_patch_attack(
    classifier,
    x: torch.Tensor,
    y: int,
    loc: PatchPlacement,
    steps: int,
    lr: float = 0.05,
    kappa: float = 0.0,
    targeted: bool = False,
) -> torch.Tensor:
    """Optimize patch pixels on the margin loss alone, Adam, clamped to model range.

    The patch initializes to the background crop so it starts from the
    same conspicuousness as a generator-based patch. steps = 0 returns
    the initialization. The procedure draws no randomness.
    """
    patch = crop(x, loc).detach().clone().requires_grad_(True)
    opt = torch.optim.Adam([patch], lr=lr)
    for step in range(steps):
        x_adv = apply_patch(x, patch.clamp(-1.0, 1.0), loc)
        loss = cw_margin(classifier.logits(x_adv), y, kappa=kappa, targeted=targeted)
        if not torch.isfinite(loss):
            raise RuntimeError(f"attack loss became non-finite at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
    return patch.detach().clamp(-1.0, 1.0)


def uniform_noise_patch(
    height: int, width: int, generator: torch.Generator | None = None
) -> torch.Tensor:
    """Uniform random patch in model range; the no-optimization control."""
    return torch.rand(3, height, width, generator=generator) * 2.0 - 1.0
