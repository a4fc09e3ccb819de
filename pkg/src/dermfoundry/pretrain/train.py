"""Pretraining loop: augmentation, masking, teacher targets and AdamW updates."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
from torchvision.transforms import v2

from ..core import DermFoundryError, ImageGrid, ValidationError, write_json
from .losses import PretrainBatchLoss, alignment_loss
from .masking import PatchGridSpec, PatchMask, generate_block_mask
from .model import ArchConfig, PretrainModel, _mask_index, resize_for_teacher

log = logging.getLogger(__name__)


class NonFiniteLossError(DermFoundryError):
    def __init__(self, message: str, snapshot: Mapping[str, Any]):
        super().__init__(message)
        self.snapshot = dict(snapshot)


def cosine_lr(step: int, total: int, warmup: int, base_lr: float, min_lr: float = 0.0) -> float:
    """Linear warmup then half-cosine decay; ``step`` is 0-based."""
    if warmup > 0 and step < warmup:
        return base_lr * (step + 1) / warmup
    span = max(1, total - warmup)
    progress = min(1.0, (step - warmup) / span)
    return min_lr + 0.5 * (base_lr - min_lr) * (1 + math.cos(math.pi * progress))


def param_groups(model: nn.Module, weight_decay: float, lr_scale: Mapping[str, float] | None = None):
    """AdamW groups; 1-d params (norms, biases, layer scales, tokens) skip decay."""
    groups: dict[tuple[float, float], list] = {}
    names: dict[tuple[float, float], list] = {}
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        wd = 0.0 if p.ndim <= 1 else weight_decay
        scale = 1.0
        if lr_scale:
            for prefix, s in lr_scale.items():
                if name.startswith(prefix):
                    scale = s
                    break
        key = (wd, scale)
        groups.setdefault(key, []).append(p)
        names.setdefault(key, []).append(name)
    return [
        {"params": ps, "weight_decay": wd, "lr_scale": sc, "param_names": names[(wd, sc)]}
        for (wd, sc), ps in groups.items()
    ]


def set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for g in optimizer.param_groups:
        g["lr"] = lr * g.get("lr_scale", 1.0)


def build_augment(side: int, crop_min: float = 0.4, crop_max: float = 1.0, color_jitter: float = 0.4):
    return v2.Compose(
        [
            v2.RandomResizedCrop(side, scale=(crop_min, crop_max), antialias=True),
            v2.RandomHorizontalFlip(),
            v2.ColorJitter(color_jitter, color_jitter, color_jitter),
        ]
    )


def images_to_batch(images: Sequence[ImageGrid] | torch.Tensor) -> torch.Tensor:
    if isinstance(images, torch.Tensor):
        return images
    return torch.stack([im.to_tensor() for im in images])


# -- single-image operations ------------------------------------------------


@torch.no_grad()
def teacher_targets(teacher: nn.Module, images: torch.Tensor, spec: PatchGridSpec, interpolation="bicubic"):
    """Per-patch targets from the frozen teacher, (B, N, target_dim)."""
    if isinstance(images, ImageGrid):
        images = images.to_tensor()[None]
    x = resize_for_teacher(images, spec.teacher_image_side, interpolation)
    return teacher(x).detach()


def split_targets(targets: torch.Tensor, mask: PatchMask | np.ndarray):
    """Partition (B, N, D) targets into (visible rows, masked rows)."""
    B = targets.shape[0]
    m = mask.masked if isinstance(mask, PatchMask) else mask
    vis = _mask_index(m, B, keep=False)
    msk = _mask_index(m, B, keep=True)
    D = targets.shape[-1]
    return (
        torch.gather(targets, 1, vis[..., None].expand(-1, -1, D)),
        torch.gather(targets, 1, msk[..., None].expand(-1, -1, D)),
    )


def encode_visible(encoder: nn.Module, image, mask: PatchMask) -> torch.Tensor:
    x = image.to_tensor()[None] if isinstance(image, ImageGrid) else image
    if mask.count_masked == mask.masked.size:
        raise ValidationError("all patches masked; no visible tokens")
    return encoder(x, mask.masked)


def regress_masked(regressor: nn.Module, visible_latents: torch.Tensor, mask: PatchMask) -> torch.Tensor:
    if visible_latents.ndim == 2:
        visible_latents = visible_latents[None]
    return regressor(visible_latents, mask.masked)


# -- training ---------------------------------------------------------------


@dataclass
class PretrainSettings:
    mask_count: int
    learning_rate: float = 1.5e-3
    weight_decay: float = 0.05
    total_steps: int = 50
    warmup_steps: int = 2
    clip_norm: float = 3.0
    w_masked: float = 1.0
    w_visible: float = 0.0
    crop_min: float = 0.4
    crop_max: float = 1.0
    color_jitter: float = 0.4
    augment: bool = True
    min_block: int = 4
    interpolation: str = "bicubic"
    betas: tuple[float, float] = (0.9, 0.98)

    @classmethod
    def from_hyperparameters(cls, hp: Mapping[str, Any], arch: ArchConfig) -> "PretrainSettings":
        steps = int(hp.get("steps", 50))
        warm = int(round(steps * hp["warmup_epochs"] / max(1, hp["total_epochs"])))
        n = arch.grid_spec.num_patches
        count = hp.get("number_of_mask_patches")
        if count is None:
            # 118/196 from the pretraining table, rescaled to the grid
            count = int(round(n * 118 / 196))
        return cls(
            mask_count=int(count),
            learning_rate=hp["learning_rate"],
            weight_decay=hp.get("weight_decay", 0.05),
            total_steps=steps,
            warmup_steps=warm,
            clip_norm=hp["gradient_clipping_max_norm"],
            w_masked=hp["latent_alignment_loss_weight"],
            w_visible=hp["align_loss_weight"],
            crop_min=hp["crop_min_size"],
            crop_max=hp["crop_max_size"],
            color_jitter=hp["color_jitter"],
            min_block=hp.get("min_block", 4),
            interpolation=hp.get("second_interpolation", "bicubic"),
        )


@dataclass
class Pretrainer:
    model: PretrainModel
    teacher: nn.Module
    settings: PretrainSettings
    rng: np.random.Generator
    optimizer: torch.optim.Optimizer | None = None
    step_count: int = 0
    history: list[dict[str, float]] = field(default_factory=list)

    def __post_init__(self):
        if self.optimizer is None:
            self.optimizer = torch.optim.AdamW(
                param_groups(self.model, self.settings.weight_decay),
                lr=self.settings.learning_rate,
                betas=self.settings.betas,
            )
        self.spec = self.model.arch.grid_spec
        self.augment = build_augment(
            self.spec.image_side, self.settings.crop_min, self.settings.crop_max, self.settings.color_jitter
        )

    def sample_mask(self) -> PatchMask:
        return generate_block_mask(self.spec, self.settings.mask_count, self.rng, self.settings.min_block)

    def losses(self, images: torch.Tensor, mask: PatchMask):
        """Differentiable (masked_align, visible_align) for one batch and mask."""
        targets = teacher_targets(self.teacher, images, self.spec, self.settings.interpolation)
        t_vis, t_msk = split_targets(targets, mask)
        p_vis, p_msk = self.model(images, mask.masked)
        return alignment_loss(p_msk, t_msk), alignment_loss(p_vis, t_vis)

    def step(self, images, lr: float | None = None, mask: PatchMask | None = None) -> PretrainBatchLoss:
        s = self.settings
        x = images_to_batch(images)
        if s.augment:
            x = torch.stack([self.augment(im) for im in x]).clamp(0, 1)
        mask = self.sample_mask() if mask is None else mask
        if lr is None:
            lr = cosine_lr(self.step_count, s.total_steps, s.warmup_steps, s.learning_rate)
        set_lr(self.optimizer, lr)
        self.model.train()
        masked, visible = self.losses(x, mask)
        total = s.w_masked * masked if s.w_visible == 0.0 else s.w_masked * masked + s.w_visible * visible
        if not torch.isfinite(total):
            snapshot = {
                "step": self.step_count,
                "lr": lr,
                "masked_align": float(masked.detach()),
                "visible_align": float(visible.detach()),
                "mask_count": mask.count_masked,
                "param_norms": {n: float(p.detach().norm()) for n, p in self.model.named_parameters()},
            }
            raise NonFiniteLossError(f"non-finite pretraining loss at step {self.step_count}", snapshot)
        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        if s.clip_norm:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), s.clip_norm)
        self.optimizer.step()
        self.step_count += 1
        out = PretrainBatchLoss(masked.item(), visible.item(), s.w_masked, s.w_visible)
        self.history.append(
            {
                "step": self.step_count,
                "masked_align": out.masked_align,
                "visible_align": out.visible_align,
                "total": out.total,
                "lr": lr,
            }
        )
        return out


def run_pretraining(
    trainer: Pretrainer,
    images: torch.Tensor,
    batch_size: int,
    steps: int,
    out_dir: str | Path | None = None,
) -> list[dict[str, float]]:
    """Iterate shuffled minibatches for ``steps`` updates."""
    n = images.shape[0]
    order = torch.randperm(n)
    pos = 0
    for _ in range(steps):
        if pos + batch_size > n:
            order = torch.randperm(n)
            pos = 0
        idx = order[pos : pos + min(batch_size, n)]
        pos += batch_size
        try:
            trainer.step(images[idx])
        except NonFiniteLossError as exc:
            if out_dir is not None:
                write_json(Path(out_dir) / "nonfinite_snapshot.json", exc.snapshot)
            raise
        rec = trainer.history[-1]
        log.info("step %d masked_align %.4f total %.4f lr %.2e", rec["step"], rec["masked_align"], rec["total"], rec["lr"])
    return trainer.history
