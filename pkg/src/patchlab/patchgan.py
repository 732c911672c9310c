"""Coarse-to-fine patch synthesis from a single image.

One generator/critic pair per pyramid level, trained sequentially from
the coarsest scale up. Each generator refines the upsampled output of
the previous scale from a noise map; the composite objective couples a
Wasserstein critic on the level's composited image with a margin attack
loss evaluated at full resolution, reconstruction from a fixed noise,
smoothness, and optionally printability.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import torch
from torch import nn

from .imageops import (
    PatchPlacement,
    ScalePyramid,
    apply_patch,
    build_pyramid,
    resample,
)
from .losses import (
    LossParts,
    LossWeights,
    attack_loss,
    gan_loss,
    nps_loss,
    rec_loss,
    total_loss,
    tv_loss,
)
from .seeding import derive_seed

# 3 levels per channel at printable intensities, in model range
DEFAULT_PALETTE = tuple(
    (r, g, b) for r in (-0.8, 0.0, 0.8) for g in (-0.8, 0.0, 0.8) for b in (-0.8, 0.0, 0.8)
)


class PatchGenerator(nn.Module):
    """Fully convolutional refiner: noise (+ prior) in, bounded patch out.

    The head adds its output to the upsampled prior before tanh, so finer
    scales learn residuals.
    """

    def __init__(self, width: int = 32, in_channels: int = 3, blocks: int = 5):
        super().__init__()
        layers = [nn.Conv2d(in_channels, width, 3, padding=1), _norm(width), nn.LeakyReLU(0.2)]
        for _ in range(blocks - 2):
            layers += [nn.Conv2d(width, width, 3, padding=1), _norm(width), nn.LeakyReLU(0.2)]
        self.features = nn.Sequential(*layers)
        self.head = nn.Conv2d(width, in_channels, 3, padding=1)

    def forward(self, noise: torch.Tensor, prior: torch.Tensor | None = None) -> torch.Tensor:
        x = noise if prior is None else noise + prior
        out = self.head(self.features(x.unsqueeze(0))).squeeze(0)
        if prior is not None:
            out = out + prior
        return torch.tanh(out)


class PatchCritic(nn.Module):
    """Markovian critic: spatial map of realism scores over local regions.

    No normalization layers, as the gradient penalty assumes per-sample
    gradients.
    """

    def __init__(self, width: int = 32, in_channels: int = 3, blocks: int = 5):
        super().__init__()
        layers = [nn.Conv2d(in_channels, width, 3, padding=1), nn.LeakyReLU(0.2)]
        for _ in range(blocks - 2):
            layers += [nn.Conv2d(width, width, 3, padding=1), nn.LeakyReLU(0.2)]
        layers.append(nn.Conv2d(width, 1, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        return self.net(image.unsqueeze(0)).squeeze(0)


def _norm(width: int) -> nn.Module:
    return nn.InstanceNorm2d(width, affine=True)


def _init_gan_weights(module: nn.Module) -> None:
    if isinstance(module, nn.Conv2d):
        nn.init.normal_(module.weight, 0.0, 0.02)
        nn.init.zeros_(module.bias)
    elif isinstance(module, nn.InstanceNorm2d) and module.affine:
        nn.init.normal_(module.weight, 1.0, 0.02)
        nn.init.zeros_(module.bias)


def scale_width(level: int, base: int = 32) -> int:
    """Channel width per scale: base at the coarsest, doubling every 4 scales."""
    return base * (2 ** (level // 4))


@dataclass
class ScaleGAN:
    """One frozen scale: its generator, critic, noise amplitude and fixed noise."""

    generator: PatchGenerator
    critic: PatchCritic
    sigma: float
    z_rec: torch.Tensor | None
    patch_hw: tuple[int, int]
    level: int

    @property
    def frozen(self) -> bool:
        params = list(self.generator.parameters()) + list(self.critic.parameters())
        return all(not p.requires_grad for p in params)

    def freeze(self) -> None:
        self.generator.eval()
        self.critic.eval()
        for p in self.generator.parameters():
            p.requires_grad_(False)
        for p in self.critic.parameters():
            p.requires_grad_(False)

    def params_digest(self) -> str:
        blob = b"".join(
            p.detach().numpy().tobytes()
            for m in (self.generator, self.critic)
            for p in m.state_dict().values()
        )
        return hashlib.sha256(blob).hexdigest()


@dataclass(frozen=True)
class Schedule:
    iterations: int = 2000
    critic_steps: int = 3
    generator_steps: int = 3
    lr: float = 5e-4
    betas: tuple[float, float] = (0.5, 0.999)

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.critic_steps < 0 or self.generator_steps < 0:
            raise ValueError("step counts must be >= 0")


@dataclass(frozen=True)
class StackConfig:
    """Everything a stack training run needs besides the image and victim."""

    r: float = 0.75
    scales: int = 2  # index of the finest level
    min_size: int = 8
    weights: LossWeights = field(default_factory=LossWeights)
    schedule: Schedule = field(default_factory=Schedule)
    noise_amp: float = 0.1
    targeted: bool = False
    target: int | None = None
    seed: int = 0
    palette: tuple = DEFAULT_PALETTE
    check_every: int = 200


@dataclass
class GeneratorStack:
    """The frozen per-scale generators plus the provenance to rerun them."""

    scales: list[ScaleGAN]
    r: float
    placement: PatchPlacement
    image_hw: tuple[int, int]
    label: int
    targeted: bool
    target: int | None
    victim_digest: str
    seed: int
    curves: list[list[dict]] = field(default_factory=list)

    @property
    def num_levels(self) -> int:
        return len(self.scales)

    @property
    def patch_hw(self) -> tuple[int, int]:
        return self.scales[-1].patch_hw


def _chain(scales, noises) -> torch.Tensor:
    """Run the generator chain coarse to fine with the given noise maps."""
    prev = None
    for sg, z in zip(scales, noises):
        prior = None if prev is None else resample(prev, *sg.patch_hw)
        prev = sg.generator(z, prior)
    return prev


def _draw_noises(scales, gen: torch.Generator) -> list[torch.Tensor]:
    return [
        sg.sigma * torch.randn(3, *sg.patch_hw, generator=gen) for sg in scales
    ]


def _rec_noises(scales) -> list[torch.Tensor]:
    return [
        sg.z_rec if sg.z_rec is not None else torch.zeros(3, *sg.patch_hw) for sg in scales
    ]


def train_scale(
    level: int,
    pyramid: ScalePyramid,
    prior_scales: list[ScaleGAN],
    victim,
    label: int,
    cfg: StackConfig,
    seed: int,
) -> tuple[ScaleGAN, list[dict]]:
    """Train one scale against frozen earlier scales and return it frozen."""
    if len(prior_scales) != level:
        raise ValueError(
            f"prior stack has {len(prior_scales)} scales, expected {level}"
        )
    for sg in prior_scales:
        if not sg.frozen:
            raise RuntimeError(f"scale {sg.level} must be frozen before training scale {level}")
    lv = pyramid.levels[level]
    finest = pyramid.finest
    patch_hw = (lv.placement.height, lv.placement.width)
    weights = cfg.weights
    sched = cfg.schedule

    torch.manual_seed(seed)
    width = scale_width(level)
    generator = PatchGenerator(width=width)
    critic = PatchCritic(width=width)
    generator.apply(_init_gan_weights)
    critic.apply(_init_gan_weights)
    gen = torch.Generator().manual_seed(derive_seed(seed, "noise"))

    if level == 0:
        sigma = 1.0
        z_rec = torch.randn(3, *patch_hw, generator=gen)
        rec_prior = None
        rec_input = z_rec
    else:
        with torch.no_grad():
            rec_prior = resample(_chain(prior_scales, _rec_noises(prior_scales)), *patch_hw)
        sigma = cfg.noise_amp * float(((rec_prior - lv.patch_target) ** 2).mean().sqrt())
        z_rec = None
        rec_input = torch.zeros(3, *patch_hw)

    opt_g = torch.optim.Adam(generator.parameters(), lr=sched.lr, betas=sched.betas)
    opt_d = torch.optim.Adam(critic.parameters(), lr=sched.lr, betas=sched.betas)
    palette = torch.tensor(cfg.palette, dtype=torch.float32) if weights.nps > 0 else None

    def sample_patch():
        with torch.no_grad():
            prior = None
            if prior_scales:
                prior = resample(
                    _chain(prior_scales, _draw_noises(prior_scales, gen)), *patch_hw
                )
        z = sigma * torch.randn(3, *patch_hw, generator=gen)
        return z, prior

    curves = []
    for it in range(sched.iterations):
        critic_value = 0.0
        for _ in range(sched.critic_steps):
            z, prior = sample_patch()
            with torch.no_grad():
                fake = apply_patch(lv.background, generator(z, prior), lv.placement)
            c_loss, _ = gan_loss(
                critic, lv.background, fake, gp_weight=weights.gradient_penalty, generator=gen
            )
            opt_d.zero_grad()
            c_loss.backward()
            opt_d.step()
            critic_value = float(c_loss.detach())

        parts = None
        for _ in range(sched.generator_steps):
            z, prior = sample_patch()
            fake_patch = generator(z, prior)
            fake_level = apply_patch(lv.background, fake_patch, lv.placement)
            _, g_gan = gan_loss(critic, lv.background, fake_level, gp_weight=0.0)
            rec_out = generator(rec_input, rec_prior)
            patch_full = resample(fake_patch, finest.placement.height, finest.placement.width)
            x_adv = apply_patch(finest.background, patch_full, finest.placement)
            parts = LossParts(
                adv=attack_loss(
                    victim, x_adv, label, kappa=weights.margin, targeted=cfg.targeted
                ),
                gan=g_gan,
                rec=rec_loss(rec_out, lv.patch_target),
                tv=tv_loss(fake_patch),
                nps=nps_loss(fake_patch, palette) if palette is not None else torch.zeros(()),
            )
            loss = total_loss(parts, weights)
            opt_g.zero_grad()
            loss.backward()
            opt_g.step()

        if parts is not None:
            row = {"iteration": it, "critic": critic_value}
            row.update(parts.values())
            curves.append(row)
        if cfg.check_every and it % cfg.check_every == 0 and parts is not None:
            _check_coupling(finest.background, x_adv, finest.placement)

    scale = ScaleGAN(
        generator=generator,
        critic=critic,
        sigma=sigma,
        z_rec=z_rec,
        patch_hw=patch_hw,
        level=level,
    )
    scale.freeze()
    return scale, curves


def _check_coupling(x_full: torch.Tensor, x_adv: torch.Tensor, loc: PatchPlacement) -> None:
    """The adversarial image may differ from the original only inside the mask."""
    outside = x_adv.detach().clone()
    outside[:, loc.top : loc.top + loc.height, loc.left : loc.left + loc.width] = x_full[
        :, loc.top : loc.top + loc.height, loc.left : loc.left + loc.width
    ]
    if not torch.equal(outside, x_full):
        raise RuntimeError("composited image differs from the original outside the patch mask")


def train_patch_stack(
    image: torch.Tensor,
    label: int,
    victim,
    placement: PatchPlacement,
    cfg: StackConfig,
) -> GeneratorStack:
    """Full coarse-to-fine run: pyramid, sequential scale training, frozen stack."""
    placement.validate_for(image.shape[1], image.shape[2])
    if cfg.targeted:
        if cfg.target is None:
            raise ValueError("targeted mode requires a target class")
        if cfg.target == label:
            raise ValueError(f"degenerate target: target class equals the true label {label}")
        if not 0 <= cfg.target < victim.num_classes:
            raise ValueError(f"target class {cfg.target} out of range")
    loss_label = cfg.target if cfg.targeted else label
    pyramid = build_pyramid(image, placement, cfg.r, cfg.scales, cfg.min_size)
    scales: list[ScaleGAN] = []
    curves = []
    for level in range(pyramid.num_levels):
        scale, curve = train_scale(
            level,
            pyramid,
            scales,
            victim,
            loss_label,
            cfg,
            seed=derive_seed(cfg.seed, "scale", str(level)),
        )
        scales.append(scale)
        curves.append(curve)
    return GeneratorStack(
        scales=scales,
        r=cfg.r,
        placement=placement,
        image_hw=(image.shape[1], image.shape[2]),
        label=label,
        targeted=cfg.targeted,
        target=cfg.target,
        victim_digest=victim.weights_digest(),
        seed=cfg.seed,
        curves=curves,
    )


def generate_patch(stack: GeneratorStack, seed: int) -> torch.Tensor:
    """Deterministic patch for a noise seed, run through the frozen chain."""
    if not stack.scales:
        raise ValueError("stack has no trained scales")
    for sg in stack.scales:
        if not sg.frozen:
            raise RuntimeError(f"scale {sg.level} is not frozen; train the stack first")
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        return _chain(stack.scales, _draw_noises(stack.scales, gen)).detach()


def save_stack(stack: GeneratorStack, out_dir: Path, extra: dict | None = None) -> Path:
    """One parameter blob per scale plus a JSON manifest and loss-curve CSVs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    curve_files = []
    for sg in stack.scales:
        blob = {
            "generator": sg.generator.state_dict(),
            "critic": sg.critic.state_dict(),
            "sigma": sg.sigma,
            "z_rec": sg.z_rec,
            "patch_hw": list(sg.patch_hw),
            "level": sg.level,
        }
        torch.save(blob, out_dir / f"scale_{sg.level:02d}.pt")
    for level, curve in enumerate(stack.curves):
        name = f"scale_{level:02d}_losses.csv"
        curve_files.append(name)
        with open(out_dir / name, "w", newline="") as fh:
            if curve:
                writer = csv.DictWriter(fh, fieldnames=list(curve[0].keys()))
                writer.writeheader()
                writer.writerows(curve)
    manifest = {
        "r": stack.r,
        "num_levels": stack.num_levels,
        "placement": {
            "top": stack.placement.top,
            "left": stack.placement.left,
            "height": stack.placement.height,
            "width": stack.placement.width,
        },
        "image_hw": list(stack.image_hw),
        "label": stack.label,
        "targeted": stack.targeted,
        "target": stack.target,
        "victim_digest": stack.victim_digest,
        "seed": stack.seed,
        "loss_curves": curve_files,
    }
    if extra:
        manifest.update(extra)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out_dir / "manifest.json"


def load_stack(stack_dir: Path) -> GeneratorStack:
    stack_dir = Path(stack_dir)
    manifest = json.loads((stack_dir / "manifest.json").read_text())
    scales = []
    for level in range(manifest["num_levels"]):
        blob = torch.load(stack_dir / f"scale_{level:02d}.pt", weights_only=True)
        width = scale_width(level)
        generator = PatchGenerator(width=width)
        critic = PatchCritic(width=width)
        generator.load_state_dict(blob["generator"])
        critic.load_state_dict(blob["critic"])
        sg = ScaleGAN(
            generator=generator,
            critic=critic,
            sigma=blob["sigma"],
            z_rec=blob["z_rec"],
            patch_hw=tuple(blob["patch_hw"]),
            level=blob["level"],
        )
        sg.freeze()
        scales.append(sg)
    pl = manifest["placement"]
    return GeneratorStack(
        scales=scales,
        r=manifest["r"],
        placement=PatchPlacement(
            top=pl["top"], left=pl["left"], height=pl["height"], width=pl["width"]
        ),
        image_hw=tuple(manifest["image_hw"]),
        label=manifest["label"],
        targeted=manifest["targeted"],
        target=manifest["target"],
        victim_digest=manifest["victim_digest"],
        seed=manifest["seed"],
    )
