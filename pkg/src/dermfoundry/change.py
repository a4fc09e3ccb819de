"""Siamese short-term change detection over preprocessed dermoscopy pairs."""

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

from .adapt import fit_side, to_batch
from .core import ShapeError, ValidationError, apply_state, load_checkpoint, save_checkpoint, write_csv
from .evalstat import auroc, classification_metrics
from .pretrain.model import ArchConfig, ViTEncoder, build_encoder
from .seqprep import ARMS, preprocess_pair
from .synth import change_pair, to_float_chw

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PairExample:
    img_t0: np.ndarray  # HxWx3 uint8
    img_t1: np.ndarray
    changed: bool
    malignant_change: bool | None = None
    pair_id: str = ""

    def __post_init__(self):
        if np.shape(self.img_t0) != np.shape(self.img_t1):
            raise ValidationError(f"pair {self.pair_id}: image sizes differ")
        if self.malignant_change and not self.changed:
            raise ValidationError(f"pair {self.pair_id}: malignant_change requires changed")


def contrastive_loss(emb_a: torch.Tensor, emb_b: torch.Tensor, same, margin: float = 1.0) -> torch.Tensor:
    """Per-pair d^2 for unchanged pairs, max(0, margin - d)^2 for changed ones; mean over the batch."""
    if emb_a.shape != emb_b.shape:
        raise ShapeError(f"embedding shapes differ: {tuple(emb_a.shape)} vs {tuple(emb_b.shape)}")
    same_t = torch.as_tensor(same, dtype=emb_a.dtype, device=emb_a.device)
    d = torch.linalg.vector_norm(emb_a - emb_b, dim=-1)
    per = same_t * d.pow(2) + (1 - same_t) * torch.clamp(margin - d, min=0).pow(2)
    return per.mean()


class SiameseChangeNet(nn.Module):
    """One encoder applied to both images; two-layer head over combined features."""

    def __init__(self, encoder: ViTEncoder, hidden: int = 128, symmetric: bool = True):
        super().__init__()
        self.encoder = encoder
        self.symmetric = symmetric
        dim = encoder.arch.embed_dim
        self.head = nn.Sequential(nn.Linear(2 * dim, hidden), nn.ReLU(), nn.Linear(hidden, 2))

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        """l2-normalized mean-pooled embedding."""
        x = fit_side(x, self.encoder.arch.image_side)
        return F.normalize(self.encoder(x).mean(dim=1), dim=-1)

    def head_input(self, f0: torch.Tensor, f1: torch.Tensor) -> torch.Tensor:
        if self.symmetric:
            return torch.cat([f0 + f1, (f0 - f1).abs()], dim=-1)
        return torch.cat([f0, f1], dim=-1)

    def forward(self, x0: torch.Tensor, x1: torch.Tensor):
        f0, f1 = self.embed(x0), self.embed(x1)
        return self.head(self.head_input(f0, f1)), f0, f1


@dataclass(frozen=True)
class ChangePrediction:
    prob_change: float
    prob_same: float
    raw_input: bool


def pairs_to_tensors(pairs: Sequence[PairExample]):
    x0 = torch.from_numpy(to_float_chw(np.stack([p.img_t0 for p in pairs])))
    x1 = torch.from_numpy(to_float_chw(np.stack([p.img_t1 for p in pairs])))
    y = torch.tensor([int(p.changed) for p in pairs])
    return x0, x1, y


@torch.no_grad()
def predict_change(model: SiameseChangeNet, x0: torch.Tensor, x1: torch.Tensor, batch_size: int = 64) -> np.ndarray:
    model.eval()
    out = []
    for i in range(0, len(x0), batch_size):
        logits, _, _ = model(x0[i : i + batch_size], x1[i : i + batch_size])
        out.append(torch.softmax(logits, -1)[:, 1].double().numpy())
    return np.concatenate(out) if out else np.zeros(0)


def detect_change(
    pair: PairExample, model: SiameseChangeNet, stages: str | Sequence[str] | None = ()
) -> ChangePrediction:
    """Probability that the lesion changed; pairs run without any preprocessing are flagged raw."""
    a, b, rep = preprocess_pair(pair.img_t0, pair.img_t1, stages)
    x0, x1, _ = pairs_to_tensors([PairExample(a, b, pair.changed)])
    p = float(predict_change(model, x0, x1)[0])
    return ChangePrediction(p, 1.0 - p, rep.raw_input)


@dataclass
class ChangeSettings:
    epochs: int = 10
    batch_size: int = 16
    learning_rate: float = 1e-3
    weight_decay: float = 0.05
    margin: float = 1.0
    contrastive_weight: float = 1.0
    ce_weight: float = 1.0
    head_hidden: int = 128
    symmetric_head: bool = True
    seed: int = 0

    @classmethod
    def from_hyperparameters(cls, hp: Mapping[str, Any], seed: int = 0) -> "ChangeSettings":
        keys = cls.__dataclass_fields__
        return cls(**{k: hp[k] for k in keys if k in hp and k != "seed"}, seed=seed)


@dataclass
class ChangeTrainResult:
    model: SiameseChangeNet
    best_epoch: int
    best_auroc: float | None
    history: list[dict[str, float]] = field(default_factory=list)
    checkpoint: Path | None = None


def train_change(
    train: Sequence[PairExample],
    val: Sequence[PairExample],
    encoder: ViTEncoder,
    settings: ChangeSettings,
    out_dir: str | Path | None = None,
) -> ChangeTrainResult:
    """Joint contrastive + cross-entropy training; keeps the best-validation-AUROC epoch."""
    s = settings
    if len({p.changed for p in train}) < 2:
        raise ValidationError("change training set must contain both changed and unchanged pairs")
    if not val:
        raise ValidationError("validation split is empty")
    torch.manual_seed(s.seed)
    rng = np.random.default_rng(s.seed)
    for p in encoder.parameters():
        p.requires_grad_(True)
    model = SiameseChangeNet(encoder, s.head_hidden, s.symmetric_head)
    opt = torch.optim.AdamW(model.parameters(), lr=s.learning_rate, weight_decay=s.weight_decay)
    x0, x1, y = pairs_to_tensors(train)
    v0, v1, vy = pairs_to_tensors(val)
    steps_per_epoch = math.ceil(len(y) / s.batch_size)
    total = s.epochs * steps_per_epoch
    step = 0
    best_auc, best_epoch, best_state = -math.inf, 0, None
    history = []
    for epoch in range(1, s.epochs + 1):
        model.train()
        order = torch.from_numpy(rng.permutation(len(y)))
        sums = {"loss": 0.0, "contrastive": 0.0, "ce": 0.0}
        for i in range(0, len(order), s.batch_size):
            idx = order[i : i + s.batch_size]
            for g in opt.param_groups:
                g["lr"] = 0.5 * s.learning_rate * (1 + math.cos(math.pi * step / total))
            logits, f0, f1 = model(x0[idx], x1[idx])
            con = contrastive_loss(f0, f1, 1 - y[idx], s.margin)
            ce = F.cross_entropy(logits, y[idx])
            loss = s.contrastive_weight * con + s.ce_weight * ce
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            step += 1
            n = len(idx)
            sums["loss"] += loss.item() * n
            sums["contrastive"] += con.item() * n
            sums["ce"] += ce.item() * n
        prob = predict_change(model, v0, v1)
        auc = auroc(vy.numpy(), prob)
        rec = {k: v / len(y) for k, v in sums.items()}
        rec.update(epoch=epoch, val_auroc=auc)
        history.append(rec)
        score = -math.inf if auc is None else auc
        if score > best_auc:
            best_auc, best_epoch = score, epoch
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    model.load_state_dict(best_state)
    model.eval()
    result = ChangeTrainResult(model, best_epoch, None if best_auc == -math.inf else best_auc, history)
    if out_dir is not None:
        out_dir = Path(out_dir)
        cols = ["epoch", "loss", "contrastive", "ce", "val_auroc"]
        write_csv(out_dir / "epochs.csv", cols, ([r[c] for c in cols] for r in history))
        sidecar = {
            "epoch": best_epoch,
            "val_auroc": result.best_auroc,
            "arch": encoder.arch.to_dict(),
            "head_hidden": s.head_hidden,
            "symmetric_head": s.symmetric_head,
        }
        result.checkpoint = save_checkpoint(out_dir / "checkpoint", model.state_dict(), sidecar)
    return result


def load_change_model(checkpoint: str | Path) -> SiameseChangeNet:
    state, sidecar = load_checkpoint(checkpoint)
    enc = build_encoder(ArchConfig.from_dict(sidecar["arch"]))
    model = SiameseChangeNet(enc, int(sidecar["head_hidden"]), bool(sidecar["symmetric_head"]))
    apply_state(model, state)
    return model.eval()


def evaluate_change(model: SiameseChangeNet, pairs: Sequence[PairExample]) -> dict[str, Any]:
    x0, x1, y = pairs_to_tensors(pairs)
    prob = predict_change(model, x0, x1)
    m = classification_metrics(y.numpy(), prob)
    return {k: m[k] for k in ("auroc", "sensitivity", "specificity", "bacc")}


def preprocess_pairs(pairs: Sequence[PairExample], arm: str, seed: int = 0) -> list[PairExample]:
    if arm not in ARMS:
        raise ValidationError(f"unknown preprocessing arm {arm!r}; choose from {sorted(ARMS)}")
    out = []
    for p in pairs:
        a, b, _ = preprocess_pair(p.img_t0, p.img_t1, ARMS[arm], seed=seed)
        out.append(PairExample(a, b, p.changed, p.malignant_change, p.pair_id))
    return out


def run_ablation(
    train: Sequence[PairExample],
    val: Sequence[PairExample],
    test: Sequence[PairExample],
    arch: ArchConfig,
    settings: ChangeSettings,
    arms: Sequence[str] = ("default", "warp", "mask", "whole"),
) -> list[dict[str, Any]]:
    """Same model recipe under each preprocessing arm; one metrics row per arm."""
    rows = []
    for arm in arms:
        torch.manual_seed(settings.seed)
        enc = build_encoder(arch)
        res = train_change(preprocess_pairs(train, arm), preprocess_pairs(val, arm), enc, settings)
        rows.append({"arm": arm, **evaluate_change(res.model, preprocess_pairs(test, arm))})
    return rows


def synthetic_pairs(n: int, side: int, rng: np.random.Generator, jitter: float = 0.0, disk_radius: int = 12):
    """Balanced pairs; a changed pair gains a dark disk in the lesion at t1."""
    labels = np.arange(n) % 2 == 1
    rng.shuffle(labels)
    out = []
    for i, ch in enumerate(labels):
        t0, t1 = change_pair(side, rng, bool(ch), disk_radius=disk_radius, jitter=jitter)
        out.append(PairExample(t0, t1, bool(ch), pair_id=f"pair{i}"))
    return out
