"""Lesion segmentation: ViT encoder taps + a light multi-scale fusion decoder."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.transforms import v2

from .adapt import fit_side
from .core import ValidationError, apply_state, load_checkpoint, save_checkpoint, write_csv
from .evalstat import seg_metrics
from .pretrain.model import ArchConfig, ViTEncoder, build_encoder

log = logging.getLogger(__name__)


def tap_depths(depth: int, n: int = 4) -> list[int]:
    """n evenly spaced 1-based block indices ending at the last block."""
    return [max(1, math.ceil(depth * (i + 1) / n)) for i in range(n)]


def _conv(cin, cout, k=3):
    return nn.Sequential(nn.Conv2d(cin, cout, k, padding=k // 2), nn.GroupNorm(min(8, cout), cout), nn.ReLU(inplace=True))


class FusionDecoder(nn.Module):
    def __init__(self, embed_dim: int, n_taps: int = 4, width: int = 32, stem_width: int = 16):
        super().__init__()
        self.lateral = nn.ModuleList(nn.Conv2d(embed_dim, width, 1) for _ in range(n_taps))
        self.fuse = _conv(n_taps * width, width)
        self.stem = nn.Sequential(_conv(3, stem_width), _conv(stem_width, stem_width))
        self.refine = _conv(width + stem_width, stem_width)
        self.out = nn.Conv2d(stem_width, 1, 1)

    def forward(self, taps: Sequence[torch.Tensor], grid: int, image: torch.Tensor) -> torch.Tensor:
        H, W = image.shape[-2:]
        mid = (max(grid, H // 4), max(grid, W // 4))
        maps = []
        for lat, t in zip(self.lateral, taps):
            fm = t.transpose(1, 2).reshape(t.shape[0], t.shape[2], grid, grid)
            # deeper taps are read at coarser scales before fusion
            maps.append(F.interpolate(lat(fm), size=mid, mode="bilinear", align_corners=False))
        x = self.fuse(torch.cat(maps, dim=1))
        x = F.interpolate(x, size=(H, W), mode="bilinear", align_corners=False)
        x = self.refine(torch.cat([x, self.stem(image)], dim=1))
        return self.out(x)[:, 0]


class SegModel(nn.Module):
    def __init__(self, encoder: ViTEncoder, n_taps: int = 4, width: int = 32):
        super().__init__()
        self.encoder = encoder
        self.taps = tap_depths(encoder.depth, n_taps)
        self.width = width
        self.decoder = FusionDecoder(encoder.arch.embed_dim, n_taps, width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Foreground logits at the input resolution, (B, H, W)."""
        z = fit_side(x, self.encoder.arch.image_side)
        feats = self.encoder.forward_intermediates(z, sorted(set(self.taps)))
        by_depth = dict(zip(sorted(set(self.taps)), feats))
        return self.decoder([by_depth[d] for d in self.taps], self.encoder.arch.grid_spec.grid, x)


def dice_loss(logits: torch.Tensor, target: torch.Tensor, eps: float = 1.0) -> torch.Tensor:
    p = torch.sigmoid(logits).flatten(1)
    t = target.flatten(1)
    inter = (p * t).sum(1)
    return (1 - (2 * inter + eps) / (p.sum(1) + t.sum(1) + eps)).mean()


def paired_augment(image: torch.Tensor, mask: torch.Tensor, rng: np.random.Generator, jitter=None):
    """Same geometric transform on (image, mask); colour jitter on the image only."""
    if rng.random() < 0.5:
        image, mask = image.flip(-1), mask.flip(-1)
    if rng.random() < 0.5:
        image, mask = image.flip(-2), mask.flip(-2)
    k = int(rng.integers(4))
    if k:
        image, mask = torch.rot90(image, k, (-2, -1)), torch.rot90(mask, k, (-2, -1))
    if jitter is not None:
        image = jitter(image)
    return image, mask


@dataclass
class SegSettings:
    epochs: int = 100
    batch_size: int = 16
    learning_rate: float = 5e-4
    weight_decay: float = 0.01
    color_jitter: float = 0.2
    decoder_channels: int = 32
    seed: int = 0

    @classmethod
    def from_hyperparameters(cls, hp: Mapping[str, Any], seed: int = 0) -> "SegSettings":
        keys = cls.__dataclass_fields__
        return cls(**{k: hp[k] for k in keys if k in hp and k != "seed"}, seed=seed)


@dataclass
class SegTrainResult:
    model: SegModel
    best_epoch: int
    best_dsc: float
    history: list[dict[str, float]] = field(default_factory=list)
    checkpoint: Path | None = None


def _check_pairs(images: torch.Tensor, masks: torch.Tensor):
    if images.ndim != 4 or masks.ndim != 3 or images.shape[0] != masks.shape[0] or images.shape[-2:] != masks.shape[-2:]:
        raise ValidationError(f"image/mask shape mismatch: {tuple(images.shape)} vs {tuple(masks.shape)}")


@torch.no_grad()
def predict_logits(model: SegModel, images: torch.Tensor, batch_size: int = 32) -> torch.Tensor:
    model.eval()
    return torch.cat([model(images[i : i + batch_size]) for i in range(0, len(images), batch_size)])


def threshold_logits(logits: torch.Tensor | np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Strict prob > threshold, evaluated in logit space so 0 and 1 are exact limits."""
    z = torch.as_tensor(logits).double()
    if threshold <= 0:
        cut = -math.inf
    elif threshold >= 1:
        cut = math.inf
    else:
        cut = math.log(threshold / (1 - threshold))
    return (z > cut).numpy()


def mean_dsc(pred: np.ndarray, target: np.ndarray) -> float:
    return float(np.mean([seg_metrics(p, t)["dsc"] for p, t in zip(pred, target)]))


def train_seg(
    encoder: ViTEncoder,
    train_images,
    train_masks,
    val_images,
    val_masks,
    settings: SegSettings,
    out_dir: str | Path | None = None,
) -> SegTrainResult:
    """BCE + Dice with AdamW and cosine decay; keeps the best-validation-DSC epoch."""
    s = settings
    xi = torch.as_tensor(np.asarray(train_images), dtype=torch.float32)
    mi = torch.as_tensor(np.asarray(train_masks), dtype=torch.float32)
    xv = torch.as_tensor(np.asarray(val_images), dtype=torch.float32)
    mv = np.asarray(val_masks, dtype=bool)
    _check_pairs(xi, mi)
    _check_pairs(xv, torch.from_numpy(mv))
    if len(xv) == 0:
        raise ValidationError("validation split is empty")
    if not (mi.max() > 0 and mi.min() < 1):
        raise ValidationError("training masks must contain both foreground and background")
    torch.manual_seed(s.seed)
    rng = np.random.default_rng(s.seed)
    for p in encoder.parameters():
        p.requires_grad_(True)
    model = SegModel(encoder, width=s.decoder_channels)
    opt = torch.optim.AdamW(model.parameters(), lr=s.learning_rate, weight_decay=s.weight_decay)
    jitter = v2.ColorJitter(s.color_jitter, s.color_jitter, s.color_jitter) if s.color_jitter > 0 else None
    steps_per_epoch = math.ceil(len(xi) / s.batch_size)
    total = s.epochs * steps_per_epoch
    step = 0
    best = (-1.0, 0)
    best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    history = []
    for epoch in range(1, s.epochs + 1):
        model.train()
        order = rng.permutation(len(xi))
        losses = []
        for i in range(0, len(order), s.batch_size):
            idx = order[i : i + s.batch_size]
            pairs = [paired_augment(xi[j], mi[j], rng, jitter) for j in idx]
            xb = torch.stack([p[0] for p in pairs]).clamp(0, 1)
            mb = torch.stack([p[1] for p in pairs])
            for g in opt.param_groups:
                g["lr"] = 0.5 * s.learning_rate * (1 + math.cos(math.pi * step / total))
            logits = model(xb)
            loss = F.binary_cross_entropy_with_logits(logits, mb) + dice_loss(logits, mb)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            step += 1
            losses.append(loss.item())
        dsc = mean_dsc(threshold_logits(predict_logits(model, xv)), mv)
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_dsc": dsc})
        if dsc > best[0]:
            best = (dsc, epoch)
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    model.load_state_dict(best_state)
    model.eval()
    result = SegTrainResult(model, best[1], best[0], history)
    if out_dir is not None:
        out_dir = Path(out_dir)
        write_csv(out_dir / "epochs.csv", ["epoch", "train_loss", "val_dsc"], ([r["epoch"], r["train_loss"], r["val_dsc"]] for r in history))
        sidecar = {"epoch": best[1], "val_dsc": best[0], "arch": encoder.arch.to_dict(), "taps": model.taps, "width": model.width}
        result.checkpoint = save_checkpoint(out_dir / "checkpoint", model.state_dict(), sidecar)
    return result


def load_seg_model(checkpoint: str | Path) -> SegModel:
    state, sidecar = load_checkpoint(checkpoint)
    model = SegModel(build_encoder(ArchConfig.from_dict(sidecar["arch"])), width=int(sidecar.get("width", 32)))
    apply_state(model, state)
    return model.eval()


def predict_mask(image, model: SegModel, threshold: float = 0.5) -> np.ndarray:
    """Boolean foreground mask for one CHW float image (or a batch)."""
    x = torch.as_tensor(np.asarray(image), dtype=torch.float32)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or x.shape[1] != 3:
        raise ValidationError(f"expected (3,H,W) or (B,3,H,W) image, got {tuple(x.shape)}")
    masks = threshold_logits(predict_logits(model, x), threshold)
    return masks[0] if single else masks


def synthetic_disks(n: int, side: int, rng: np.random.Generator):
    from .synth import disk_on_noise

    imgs, masks = zip(*(disk_on_noise(side, rng) for _ in range(n)))
    x = np.stack([np.moveaxis(i, -1, 0) for i in imgs]).astype(np.float32)
    return x, np.stack(masks)
