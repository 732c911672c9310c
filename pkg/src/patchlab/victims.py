"""Victim classifier zoo: small conv nets, standard and PGD training, introspection.

Classifiers expose logits, named conv-block feature maps, and score
gradients so saliency attribution and the attack losses can drive them.
Trained models are frozen (eval mode, gradients off) and treated as
immutable from then on.
"""

from __future__ import annotations

import hashlib
import json
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .baselines import PgdConfig, pgd_perturb
from .datasets import ImageDataset

ARCHITECTURES = {
    # (out_channels, pool) per conv block
    "tinynet": ((16, True), (32, True), (64, False)),
    "widenet": ((32, True), (64, True), (128, False)),
    "deepnet": ((16, True), (32, False), (64, True), (64, False)),
}


class CheckpointError(RuntimeError):
    """Checkpoint missing, unreadable, or failing its integrity digest."""


class TrainingDiverged(RuntimeError):
    """Training loss went non-finite."""


class ConvBlockNet(nn.Module):
    """Stack of named conv blocks with a global-average-pool linear head."""

    def __init__(self, blocks: tuple[tuple[int, bool], ...], num_classes: int, in_channels: int = 3):
        super().__init__()
        self.block_channels = OrderedDict()
        layers = OrderedDict()
        cin = in_channels
        for i, (cout, pool) in enumerate(blocks, start=1):
            ops = [nn.Conv2d(cin, cout, 3, padding=1), nn.ReLU()]
            if pool:
                ops.append(nn.MaxPool2d(2))
            layers[f"block{i}"] = nn.Sequential(*ops)
            self.block_channels[f"block{i}"] = cout
            cin = cout
        self.blocks = nn.ModuleDict(layers)
        self.head = nn.Linear(cin, num_classes)

    def forward(self, x):
        logits, _ = self.forward_features(x)
        return logits

    def forward_features(self, x):
        feats = OrderedDict()
        h = x
        for name, block in self.blocks.items():
            h = block(h)
            feats[name] = h
        pooled = h.mean(dim=(2, 3))
        return self.head(pooled), feats


@dataclass
class VictimClassifier:
    """A trained model plus its provenance and introspection surface."""

    name: str
    arch: str
    model: nn.Module
    num_classes: int
    input_hw: tuple[int, int]
    class_names: tuple[str, ...]
    provenance: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)

    def _check_input(self, x: torch.Tensor) -> None:
        if x.dim() != 3 or (x.shape[1], x.shape[2]) != self.input_hw:
            raise ValueError(
                f"input shape {tuple(x.shape)} does not match model input {self.input_hw}"
            )

    def feature_points(self) -> tuple[str, ...]:
        return tuple(self.model.block_channels.keys())

    def point_channels(self, point: str) -> int:
        return self.model.block_channels[self._resolve_point(point)]

    def _resolve_point(self, point: str) -> str:
        points = self.feature_points()
        if point == "last":
            return points[-1]
        if point not in points:
            raise KeyError(f"unknown feature point {point!r}; registered: {points}")
        return point

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        self._check_input(x)
        return self.model(x.unsqueeze(0)).squeeze(0)

    def logits_batch(self, xb: torch.Tensor) -> torch.Tensor:
        return self.model(xb)

    def predict(self, x: torch.Tensor) -> int:
        """Argmax class; ties break to the lowest index."""
        with torch.no_grad():
            scores = self.logits(x).numpy()
        return int(np.argmax(scores))

    def predict_batch(self, xb: torch.Tensor) -> np.ndarray:
        with torch.no_grad():
            scores = self.logits_batch(xb).numpy()
        return np.argmax(scores, axis=1)

    def feature_maps(self, x: torch.Tensor, point: str) -> torch.Tensor:
        self._check_input(x)
        point = self._resolve_point(point)
        with torch.no_grad():
            _, feats = self.model.forward_features(x.unsqueeze(0))
        return feats[point].squeeze(0)

    def score_gradient(self, x: torch.Tensor, class_index: int, wrt: str = "input"):
        """Gradient of the pre-softmax score for class_index.

        wrt="input" differentiates against the image; any registered point
        name differentiates against that block's activations and also
        returns them: (gradient, activations).
        """
        self._check_input(x)
        if not 0 <= class_index < self.num_classes:
            raise ValueError(f"class {class_index} out of range [0, {self.num_classes})")
        xin = x.detach().clone().requires_grad_(True)
        if wrt == "input":
            with torch.enable_grad():
                score = self.model(xin.unsqueeze(0)).squeeze(0)[class_index]
                return torch.autograd.grad(score, xin)[0]
        point = self._resolve_point(wrt)
        with torch.enable_grad():
            logits, feats = self.model.forward_features(xin.unsqueeze(0))
            target = feats[point]
            grad = torch.autograd.grad(
                logits.squeeze(0)[class_index], target, allow_unused=True
            )[0]
        if grad is None:
            raise ValueError(f"score does not depend on feature point {point!r}")
        return grad.squeeze(0), target.detach().squeeze(0)

    def weights_digest(self) -> str:
        blob = b"".join(
            p.detach().numpy().tobytes() for p in self.model.state_dict().values()
        )
        return hashlib.sha256(blob).hexdigest()


@dataclass(frozen=True)
class TrainSchedule:
    epochs: int = 8
    batch_size: int = 128
    lr: float = 1e-3
    augment: bool = True
    seed: int = 0


def _augment_batch(xb: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    """Noise-rectangle pasting plus brightness/contrast jitter.

    The rectangle augmentation teaches invariance to random occluders, so
    uniform-noise patch controls stay weak relative to optimized patches.
    """
    xb = xb.clone()
    n, _, h, w = xb.shape
    paste = torch.rand(n, 2, generator=gen) < 0.45
    sizes = torch.randint(4, 9, (n, 2, 2), generator=gen)
    for i in range(n):
        for j in range(2):
            if not paste[i, j]:
                continue
            ph, pw = int(sizes[i, j, 0]), int(sizes[i, j, 1])
            top = int(torch.randint(0, h - ph + 1, (1,), generator=gen))
            left = int(torch.randint(0, w - pw + 1, (1,), generator=gen))
            noise = torch.rand(3, ph, pw, generator=gen) * 2.0 - 1.0
            xb[i, :, top : top + ph, left : left + pw] = noise
    contrast = 1.0 + (torch.rand(n, 1, 1, 1, generator=gen) - 0.5) * 0.2
    brightness = (torch.rand(n, 1, 1, 1, generator=gen) - 0.5) * 0.4
    return (xb * contrast + brightness).clamp(-1.0, 1.0)


def _fit(
    data: ImageDataset,
    architecture: str,
    schedule: TrainSchedule,
    perturb=None,
    provenance: dict | None = None,
    name: str | None = None,
) -> VictimClassifier:
    data.validate()
    if architecture not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {architecture!r}")
    torch.manual_seed(schedule.seed)
    model = ConvBlockNet(ARCHITECTURES[architecture], num_classes=data.num_classes)
    gen = torch.Generator().manual_seed(schedule.seed)
    opt = torch.optim.Adam(model.parameters(), lr=schedule.lr)
    n = data.train_x.shape[0]
    final_loss = float("nan")
    for epoch in range(schedule.epochs):
        order = torch.randperm(n, generator=gen)
        for start in range(0, n, schedule.batch_size):
            idx = order[start : start + schedule.batch_size]
            xb, yb = data.train_x[idx], data.train_y[idx]
            if schedule.augment:
                xb = _augment_batch(xb, gen)
            if perturb is not None:
                xb = perturb(model, xb, yb, gen)
            loss = nn.functional.cross_entropy(model(xb), yb)
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"loss became non-finite at epoch {epoch}, offset {start}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            final_loss = float(loss.detach())
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    clf = VictimClassifier(
        name=name or architecture,
        arch=architecture,
        model=model,
        num_classes=data.num_classes,
        input_hw=data.image_hw,
        class_names=data.class_names,
        provenance=provenance or {"mode": "standard", "seed": schedule.seed},
    )
    clf.metrics = {
        "final_train_loss": final_loss,
        "heldout_accuracy": heldout_accuracy(clf, data),
    }
    return clf


def heldout_accuracy(clf: VictimClassifier, data: ImageDataset, batch: int = 256) -> float:
    hits = 0
    for start in range(0, data.test_x.shape[0], batch):
        xb = data.test_x[start : start + batch]
        yb = data.test_y[start : start + batch]
        hits += int((torch.from_numpy(clf.predict_batch(xb)) == yb).sum())
    return hits / data.test_x.shape[0]


def train_classifier(
    data: ImageDataset, architecture: str, schedule: TrainSchedule, name: str | None = None
) -> VictimClassifier:
    """Standard supervised training; records held-out accuracy and final loss."""
    return _fit(
        data,
        architecture,
        schedule,
        provenance={"mode": "standard", "seed": schedule.seed},
        name=name,
    )


def adversarial_train(
    data: ImageDataset,
    architecture: str,
    schedule: TrainSchedule,
    pgd: PgdConfig,
    name: str | None = None,
) -> VictimClassifier:
    """Training on PGD-perturbed batches; epsilon = 0 degenerates to standard training."""
    if pgd.epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {pgd.epsilon}")
    perturb = None
    if pgd.epsilon > 0:
        def perturb(model, xb, yb, gen):
            return pgd_perturb(model, xb, yb, pgd, generator=gen)

    return _fit(
        data,
        architecture,
        schedule,
        perturb=perturb,
        provenance={
            "mode": "adversarial",
            "norm": pgd.norm,
            "epsilon": pgd.epsilon,
            "steps": pgd.steps,
            "seed": schedule.seed,
        },
        name=name,
    )


def robust_accuracy(
    clf: VictimClassifier, data: ImageDataset, pgd: PgdConfig, limit: int = 256, seed: int = 0
) -> float:
    """Accuracy on PGD-perturbed held-out samples."""
    gen = torch.Generator().manual_seed(seed)
    xb = data.test_x[:limit]
    yb = data.test_y[:limit]
    adv = pgd_perturb(clf.model, xb, yb, pgd, generator=gen)
    return float((torch.from_numpy(clf.predict_batch(adv)) == yb).float().mean())


def save_classifier(clf: VictimClassifier, out_dir: Path) -> Path:
    """Write weights plus a JSON manifest with an integrity digest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    weights_path = out_dir / "weights.pt"
    torch.save(clf.model.state_dict(), weights_path)
    manifest = {
        "name": clf.name,
        "architecture": clf.arch,
        "num_classes": clf.num_classes,
        "input_size": list(clf.input_hw),
        "class_names": list(clf.class_names),
        "feature_points": list(clf.feature_points()),
        "provenance": clf.provenance,
        "metrics": clf.metrics,
        "weights_sha256": hashlib.sha256(weights_path.read_bytes()).hexdigest(),
    }
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path


def load_classifier(model_dir: Path) -> VictimClassifier:
    model_dir = Path(model_dir)
    manifest_path = model_dir / "manifest.json"
    weights_path = model_dir / "weights.pt"
    if not manifest_path.exists() or not weights_path.exists():
        raise CheckpointError(f"checkpoint incomplete under {model_dir}")
    manifest = json.loads(manifest_path.read_text())
    digest = hashlib.sha256(weights_path.read_bytes()).hexdigest()
    if digest != manifest["weights_sha256"]:
        raise CheckpointError(f"integrity check failed for {weights_path}")
    model = ConvBlockNet(
        ARCHITECTURES[manifest["architecture"]], num_classes=manifest["num_classes"]
    )
    model.load_state_dict(torch.load(weights_path, weights_only=True))
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return VictimClassifier(
        name=manifest["name"],
        arch=manifest["architecture"],
        model=model,
        num_classes=manifest["num_classes"],
        input_hw=tuple(manifest["input_size"]),
        class_names=tuple(manifest["class_names"]),
        provenance=manifest["provenance"],
        metrics=manifest["metrics"],
    )
