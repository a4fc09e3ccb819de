"""Slide-level classification from tile features with gated attention MIL."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .adapt import assign_folds
from .core import ValidationError, derive_seed
from .evalstat import classification_metrics

log = logging.getLogger(__name__)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class EmptyBagError(ValidationError):
    pass


@dataclass(frozen=True)
class SlideBag:
    slide_id: str
    features: np.ndarray
    label: int
    case_id: str

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float32)
        if f.ndim != 2 or f.shape[0] < 1:
            raise EmptyBagError(f"slide {self.slide_id}: bag needs at least one instance, got shape {f.shape}")
        if not np.all(np.isfinite(f)):
            raise ValidationError(f"slide {self.slide_id}: non-finite instance features")
        object.__setattr__(self, "features", f)


# ---------------------------------------------------------------------------
# tiling


@dataclass(frozen=True)
class TileSet:
    coords: tuple[tuple[int, int], ...]  # (x, y) top-left in slide pixels
    tiles: torch.Tensor  # (n, 3, out_side, out_side), ImageNet-normalized
    tile_side_px: int


def tissue_mask(slide: np.ndarray, luminance_max: float = 220.0) -> np.ndarray:
    """Tissue = pixels darker than the bright glass background (uint8 RGB input)."""
    rgb = np.asarray(slide, dtype=np.float64)
    lum = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
    return lum < luminance_max


def tile_coordinates(
    slide: np.ndarray,
    tile_side: int = 256,
    magnification: float = 20.0,
    slide_magnification: float = 20.0,
    min_tissue: float = 0.25,
    luminance_max: float = 220.0,
) -> tuple[list[tuple[int, int]], int]:
    """Non-overlapping tile origins over tissue; returns (coords, tile side in slide pixels)."""
    side = int(round(tile_side * slide_magnification / magnification))
    h, w = slide.shape[:2]
    tissue = tissue_mask(slide, luminance_max)
    coords = []
    for y in range(0, h - side + 1, side):
        for x in range(0, w - side + 1, side):
            if tissue[y : y + side, x : x + side].mean() >= min_tissue:
                coords.append((x, y))
    if not coords:
        raise EmptyBagError("no tissue tiles detected")
    return coords, side


def extract_tiles(slide: np.ndarray, coords: Sequence[tuple[int, int]], side: int, out_side: int = 224) -> torch.Tensor:
    crops = np.stack([slide[y : y + side, x : x + side] for x, y in coords]).astype(np.float32) / 255.0
    t = torch.from_numpy(np.ascontiguousarray(crops.transpose(0, 3, 1, 2)))
    t = F.interpolate(t, size=(out_side, out_side), mode="bilinear", align_corners=False, antialias=True)
    mean = torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1)
    std = torch.tensor(IMAGENET_STD).view(1, 3, 1, 1)
    return (t - mean) / std


def tile_contract(slide: np.ndarray, tile_side: int = 256, magnification: float = 20.0, **kw) -> TileSet:
    coords, side = tile_coordinates(slide, tile_side, magnification, **kw)
    return TileSet(tuple(coords), extract_tiles(slide, coords, side), side)


# ---------------------------------------------------------------------------
# model


class GatedAttention(nn.Module):
    def __init__(self, dim: int = 512, hidden: int = 384, dropout: float = 0.25):
        super().__init__()
        self.V = nn.Sequential(nn.Linear(dim, hidden), nn.Tanh(), nn.Dropout(dropout))
        self.U = nn.Sequential(nn.Linear(dim, hidden), nn.Sigmoid(), nn.Dropout(dropout))
        self.w = nn.Linear(hidden, 1)

    def forward(self, h):
        return self.w(self.V(h) * self.U(h)).squeeze(-1)


class GatedABMIL(nn.Module):
    """Input projection -> gated attention pooling -> linear classifier."""

    def __init__(
        self,
        in_dim: int,
        num_classes: int = 2,
        embed_dim: int = 512,
        attn_hidden: int = 384,
        input_dropout: float = 0.10,
        attn_dropout: float = 0.25,
    ):
        super().__init__()
        self.fc = nn.Sequential(nn.Dropout(input_dropout), nn.Linear(in_dim, embed_dim), nn.ReLU())
        self.attention = GatedAttention(embed_dim, attn_hidden, attn_dropout)
        self.classifier = nn.Linear(embed_dim, num_classes)

    def forward(self, instances: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(n, D) instances -> (logits (C,), attention (n,) in input order)."""
        if instances.ndim != 2 or instances.shape[0] == 0:
            raise EmptyBagError(f"bag needs shape (n>=1, D), got {tuple(instances.shape)}")
        # canonical instance order makes the floating-point reduction order
        # independent of the order the bag was given in
        order = canonical_order(instances)
        h = self.fc(instances[order])
        a = torch.softmax(self.attention(h), dim=0)
        logits = self.classifier(a @ h)
        attn = torch.empty_like(a)
        attn[order] = a
        return logits, attn


def canonical_order(x: torch.Tensor) -> torch.Tensor:
    arr = x.detach().cpu().numpy()
    return torch.from_numpy(np.lexsort(arr.T[::-1]).copy())


# ---------------------------------------------------------------------------
# training


@dataclass
class MILSettings:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    max_epochs: int = 20
    patience: int = 5
    folds: int = 5
    val_fraction: float = 0.2
    embed_dim: int = 512
    attn_hidden: int = 384
    input_dropout: float = 0.10
    attn_dropout: float = 0.25
    seed: int = 0

    @classmethod
    def from_hyperparameters(cls, hp: Mapping[str, Any], seed: int = 0) -> "MILSettings":
        keys = cls.__dataclass_fields__
        return cls(**{k: hp[k] for k in keys if k in hp and k != "seed"}, seed=seed)


@dataclass
class FoldResult:
    fold: int
    epochs_run: int
    best_epoch: int
    metrics: dict[str, Any]
    val_losses: list[float] = field(default_factory=list)


@dataclass
class MILCVResult:
    folds: list[FoldResult]
    oof_probs: np.ndarray
    slide_ids: tuple[str, ...]
    labels: np.ndarray
    fold_of: np.ndarray

    @property
    def mean_auroc(self) -> float | None:
        vals = [f.metrics["auroc"] for f in self.folds if f.metrics.get("auroc") is not None]
        return float(np.mean(vals)) if vals else None


def _bag_loss(model, bags: Sequence[SlideBag]) -> float:
    model.eval()
    with torch.no_grad():
        losses = [F.cross_entropy(model(torch.from_numpy(b.features))[0][None], torch.tensor([b.label])).item() for b in bags]
    return float(np.mean(losses))


def _predict(model, bags: Sequence[SlideBag]) -> np.ndarray:
    model.eval()
    with torch.no_grad():
        return np.stack([torch.softmax(model(torch.from_numpy(b.features))[0], -1).double().numpy() for b in bags])


def train_mil(
    train: Sequence[SlideBag],
    val: Sequence[SlideBag],
    in_dim: int,
    num_classes: int,
    s: MILSettings,
    seed: int,
) -> tuple[GatedABMIL, int, int, list[float]]:
    """One fold: AdamW + cosine, early stopping on validation loss."""
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = GatedABMIL(in_dim, num_classes, s.embed_dim, s.attn_hidden, s.input_dropout, s.attn_dropout)
    opt = torch.optim.AdamW(model.parameters(), lr=s.learning_rate, weight_decay=s.weight_decay)
    total = s.max_epochs * len(train)
    step = 0
    best_loss, best_epoch, best_state = math.inf, 0, None
    val_losses = []
    epoch = 0
    for epoch in range(1, s.max_epochs + 1):
        model.train()
        for i in rng.permutation(len(train)):
            b = train[i]
            for g in opt.param_groups:
                g["lr"] = 0.5 * s.learning_rate * (1 + math.cos(math.pi * step / total))
            logits, _ = model(torch.from_numpy(b.features))
            loss = F.cross_entropy(logits[None], torch.tensor([b.label]))
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            step += 1
        vl = _bag_loss(model, val if val else train)
        val_losses.append(vl)
        if vl < best_loss:
            best_loss, best_epoch = vl, epoch
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        elif epoch - best_epoch >= s.patience:
            break
    model.load_state_dict(best_state)
    return model.eval(), epoch, best_epoch, val_losses


def check_case_folds(bags: Sequence[SlideBag], fold_of: Mapping[str, int]) -> None:
    seen: dict[str, int] = {}
    for b in bags:
        f = fold_of[b.slide_id]
        if seen.setdefault(b.case_id, f) != f:
            raise ValidationError(f"case {b.case_id!r} spans folds {seen[b.case_id]} and {f}")


def train_mil_cv(
    bags: Sequence[SlideBag],
    k: int = 5,
    settings: MILSettings | None = None,
    num_classes: int | None = None,
    folds: Mapping[str, int] | None = None,
) -> MILCVResult:
    """k-fold CV grouped by case and stratified by label; OOF slide probabilities."""
    s = settings or MILSettings(folds=k)
    if not bags:
        raise ValidationError("no bags to train on")
    ids = [b.slide_id for b in bags]
    labels = np.array([b.label for b in bags])
    C = num_classes or int(labels.max()) + 1
    D = bags[0].features.shape[1]
    if any(b.features.shape[1] != D for b in bags):
        raise ValidationError("all bags must share the instance feature dimension")
    fold_of = dict(folds) if folds is not None else assign_folds(ids, labels, k, s.seed, [b.case_id for b in bags])
    check_case_folds(bags, fold_of)
    fold_arr = np.array([fold_of[i] for i in ids])
    oof = np.zeros((len(bags), C))
    results = []
    for f in range(k):
        test_idx = np.flatnonzero(fold_arr == f)
        train_idx = np.flatnonzero(fold_arr != f)
        # case-grouped validation split from the training folds
        tr_ids = [ids[i] for i in train_idx]
        inner_k = max(2, int(round(1 / s.val_fraction)))
        try:
            inner = assign_folds(tr_ids, labels[train_idx], inner_k, derive_seed(s.seed, "val", f), [bags[i].case_id for i in train_idx])
            val_sel = np.array([inner[i] == 0 for i in tr_ids])
        except ValidationError:
            val_sel = np.zeros(len(train_idx), dtype=bool)
        tr = [bags[i] for i, v in zip(train_idx, val_sel) if not v]
        va = [bags[i] for i, v in zip(train_idx, val_sel) if v]
        model, ran, best, vls = train_mil(tr, va, D, C, s, derive_seed(s.seed, "mil-fold", f) % (2**31))
        probs = _predict(model, [bags[i] for i in test_idx])
        oof[test_idx] = probs
        m = classification_metrics(labels[test_idx], probs)
        metrics = {"auroc": m["auroc"], "w_f1": m["w_f1"], "bacc": m["bacc"]}
        results.append(FoldResult(f, ran, best, metrics, vls))
        log.info("fold %d: epochs %d best %d auroc %s", f, ran, best, metrics["auroc"])
    return MILCVResult(results, oof, tuple(ids), labels, fold_arr)


def synthetic_bags(
    n_bags: int,
    rng: np.random.Generator,
    dim: int = 32,
    instances=(8, 24),
    n_clusters: int = 4,
    spread: float = 0.6,
) -> list[SlideBag]:
    """Bags of clustered instances; positive iff the bag holds an instance of the marked cluster 0."""
    centers = rng.normal(0, 2.0, (n_clusters, dim))
    bags = []
    labels = np.arange(n_bags) % 2
    rng.shuffle(labels)
    for b, y in enumerate(labels):
        n = int(rng.integers(instances[0], instances[1] + 1))
        cl = rng.integers(1, n_clusters, n)
        if y:
            hits = rng.integers(max(1, n // 4), max(2, n // 2) + 1)
            cl[rng.choice(n, hits, replace=False)] = 0
        feats = centers[cl] + spread * rng.normal(0, 1, (n, dim))
        bags.append(SlideBag(f"slide{b}", feats, int(y), f"case{b}"))
    return bags
