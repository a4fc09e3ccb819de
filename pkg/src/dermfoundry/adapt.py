"""Downstream adaptation: frozen-feature linear probing, fine-tuning, out-of-fold prediction."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.optimize import minimize
from scipy.special import logsumexp, softmax
from torchvision.transforms import v2

from .core import (
    ImageGrid,
    ShapeError,
    ValidationError,
    apply_state,
    load_checkpoint,
    save_checkpoint,
    write_csv,
)
from .evalstat import classification_metrics
from .pretrain.model import ArchConfig, ViTEncoder, build_encoder, encoder_state_from_pretrain, freeze
from .pretrain.train import cosine_lr, param_groups, set_lr

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FeatureMatrix:
    features: np.ndarray
    labels: np.ndarray
    ids: tuple[str, ...]

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        if f.ndim != 2:
            raise ShapeError(f"features must be 2-D, got {f.shape}")
        if not np.all(np.isfinite(f)):
            raise ValidationError("features contain non-finite entries")
        lab = np.asarray(self.labels, dtype=np.int64)
        if len(lab) != len(f) or len(self.ids) != len(f):
            raise ShapeError("features, labels and ids must have equal length")
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "labels", lab)

    def subset(self, idx) -> "FeatureMatrix":
        idx = np.asarray(idx)
        return FeatureMatrix(self.features[idx], self.labels[idx], tuple(self.ids[i] for i in idx))

    def __len__(self):
        return len(self.features)


# ---------------------------------------------------------------------------
# encoders and features


def load_encoder(checkpoint: str | Path | None, arch: ArchConfig | None = None) -> ViTEncoder:
    """Frozen encoder from a checkpoint directory (pretrain or encoder state).

    Without a checkpoint the encoder is the seeded random initialization for
    ``arch``, which is what the fixture pipelines use.
    """
    if checkpoint is None:
        return freeze(build_encoder(arch or ArchConfig.fixture()))
    state, sidecar = load_checkpoint(checkpoint)
    if arch is None:
        arch = ArchConfig.from_dict(sidecar.get("arch", {})) if "arch" in sidecar else ArchConfig.fixture()
    enc = build_encoder(arch)
    apply_state(enc, encoder_state_from_pretrain(state))
    return freeze(enc)


def to_batch(images) -> torch.Tensor:
    if isinstance(images, torch.Tensor):
        return images.float()
    if isinstance(images, np.ndarray):
        return torch.from_numpy(np.asarray(images, dtype=np.float32))
    return torch.stack([im.to_tensor() if isinstance(im, ImageGrid) else torch.as_tensor(im) for im in images])


def fit_side(x: torch.Tensor, side: int) -> torch.Tensor:
    if x.shape[-1] == side and x.shape[-2] == side:
        return x
    return F.interpolate(x, size=(side, side), mode="bilinear", align_corners=False, antialias=True)


@torch.no_grad()
def extract_features(
    images,
    encoder: ViTEncoder,
    labels: Sequence[int] | None = None,
    ids: Sequence[str] | None = None,
    batch_size: int = 64,
) -> FeatureMatrix:
    """Mean-pooled patch-token features, one row per image in input order."""
    x = to_batch(images)
    encoder.eval()
    side = encoder.arch.image_side
    feats = []
    for i in range(0, len(x), batch_size):
        feats.append(encoder.pooled(fit_side(x[i : i + batch_size], side)).double().numpy())
    f = np.concatenate(feats) if feats else np.zeros((0, encoder.arch.embed_dim))
    lab = np.zeros(len(f), dtype=np.int64) if labels is None else np.asarray(labels)
    ids = tuple(str(i) for i in range(len(f))) if ids is None else tuple(ids)
    return FeatureMatrix(f, lab, ids)


# ---------------------------------------------------------------------------
# linear probe


def probe_lambda(embed_dim: int, num_classes: int) -> float:
    return embed_dim * num_classes / 100


@dataclass(frozen=True)
class ProbeModel:
    weights: np.ndarray  # (C, M)
    bias: np.ndarray  # (C,)
    lam: float
    n_iter: int = 0
    grad_norm: float = 0.0

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]


def probe_objective(W, b, X, y, lam) -> float:
    """Summed multinomial cross-entropy + (lam/2)||W||^2 (bias unpenalized)."""
    Z = X @ W.T + b
    return float(np.sum(logsumexp(Z, axis=1) - Z[np.arange(len(y)), y]) + 0.5 * lam * np.sum(W * W))


def linear_probe_fit(
    train: FeatureMatrix,
    num_classes: int,
    lam: float | None = None,
    max_iter: int = 1000,
    tol: float = 1e-5,
) -> ProbeModel:
    X = train.features
    y = train.labels
    M = X.shape[1]
    C = num_classes
    if len(X) < C:
        raise ValidationError(f"need at least {C} samples for {C} classes")
    missing = sorted(set(range(C)) - set(np.unique(y).tolist()))
    if missing:
        raise ValidationError(f"class(es) {missing} absent from training data")
    lam = probe_lambda(M, C) if lam is None else float(lam)
    Y = np.eye(C)[y]

    def fun(theta):
        W = theta[: C * M].reshape(C, M)
        b = theta[C * M :]
        Z = X @ W.T + b
        lse = logsumexp(Z, axis=1)
        loss = np.sum(lse - Z[np.arange(len(y)), y]) + 0.5 * lam * np.sum(W * W)
        P = np.exp(Z - lse[:, None])
        G = P - Y
        gW = G.T @ X + lam * W
        gb = G.sum(0)
        return loss, np.concatenate([gW.ravel(), gb])

    # L-BFGS-B stops on the max-abs projected gradient; dividing by sqrt(dim)
    # makes that bound imply the Euclidean-norm tolerance.
    n_params = C * M + C
    theta = np.zeros(n_params)
    used = 0
    while True:
        res = minimize(
            fun,
            theta,
            jac=True,
            method="L-BFGS-B",
            options={"maxiter": max_iter - used, "gtol": tol / np.sqrt(n_params), "ftol": 0.0, "maxcor": 20},
        )
        theta = res.x
        used += max(1, int(res.nit))
        grad_norm = float(np.linalg.norm(fun(theta)[1]))
        # a line-search stall short of tolerance restarts with fresh curvature pairs
        if grad_norm < tol or used >= max_iter or res.nit == 0:
            break
    return ProbeModel(theta[: C * M].reshape(C, M), theta[C * M :], lam, used, grad_norm)


def linear_probe_predict(model: ProbeModel, features) -> np.ndarray:
    X = features.features if isinstance(features, FeatureMatrix) else np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.weights.shape[1]:
        raise ShapeError(f"features have dim {X.shape[-1]}, probe expects {model.weights.shape[1]}")
    return softmax(X @ model.weights.T + model.bias, axis=1)


def predict_labels(prob: np.ndarray) -> np.ndarray:
    return np.argmax(prob, axis=1)


# ---------------------------------------------------------------------------
# out-of-fold prediction


def _unit_key(seed: int, unit: str) -> str:
    return hashlib.sha256(f"{seed}:{unit}".encode()).hexdigest()


def assign_folds(
    ids: Sequence[str],
    strata: Sequence[Any],
    k: int,
    seed: int = 0,
    groups: Sequence[str | None] | None = None,
) -> dict[str, int]:
    """Stratified, group-aware fold assignment keyed on identifiers.

    Rows sharing a group (patient/case) form one unit that never straddles
    folds. Units are ordered by a seeded hash of their key, so the result is
    independent of input order. Within each stratum units are dealt
    round-robin, starting where the previous stratum stopped.
    """
    ids = [str(i) for i in ids]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate ids in fold assignment")
    if groups is None:
        units = ids
    else:
        units = [g if g not in (None, "") else f"__row__{i}" for g, i in zip(groups, ids)]
    unit_strata: dict[str, Any] = {}
    for u, s in zip(units, strata):
        if u in unit_strata and unit_strata[u] != s:
            # mixed-stratum group: stratify on the smallest value for determinism
            unit_strata[u] = min(unit_strata[u], s, key=repr)
        else:
            unit_strata.setdefault(u, s)
    by_stratum: dict[Any, list[str]] = {}
    for u, s in unit_strata.items():
        by_stratum.setdefault(s, []).append(u)
    smallest = min(len(v) for v in by_stratum.values())
    if k > smallest:
        raise ValidationError(f"k={k} folds exceeds smallest stratum size {smallest}")
    unit_fold: dict[str, int] = {}
    offset = 0
    for s in sorted(by_stratum, key=repr):
        members = sorted(by_stratum[s], key=lambda u: _unit_key(seed, u))
        for j, u in enumerate(members):
            unit_fold[u] = (offset + j) % k
        offset = (offset + len(members)) % k
    return {i: unit_fold[u] for i, u in zip(ids, units)}


@dataclass
class OOFResult:
    ids: tuple[str, ...]
    true_labels: np.ndarray
    probs: np.ndarray
    folds: np.ndarray

    def rows(self):
        for i, t, p, f in zip(self.ids, self.true_labels, self.probs, self.folds):
            yield [i, int(t), *[float(v) for v in p], int(f)]

    def header(self) -> list[str]:
        return ["id", "true_label", *[f"prob_{c}" for c in range(self.probs.shape[1])], "fold"]

    def write(self, path) -> Path:
        return write_csv(path, self.header(), self.rows())


def probe_fit_predict(num_classes: int, lam: float | None = None, max_iter: int = 1000, tol: float = 1e-5):
    def fit_predict(train: FeatureMatrix, test: FeatureMatrix) -> np.ndarray:
        return linear_probe_predict(linear_probe_fit(train, num_classes, lam, max_iter, tol), test)

    return fit_predict


def out_of_fold_predict(
    data: FeatureMatrix,
    k: int,
    stratify_by: Sequence[Any] | None = None,
    groups: Sequence[str | None] | None = None,
    seed: int = 0,
    num_classes: int | None = None,
    fit_predict: Callable[[FeatureMatrix, FeatureMatrix], np.ndarray] | None = None,
) -> OOFResult:
    """Predict every row with a model trained on the other folds."""
    C = num_classes if num_classes is not None else int(data.labels.max()) + 1
    strata = data.labels if stratify_by is None else stratify_by
    fold_of = assign_folds(data.ids, strata, k, seed, groups)
    folds = np.array([fold_of[i] for i in data.ids])
    fit_predict = fit_predict or probe_fit_predict(C)
    probs = np.zeros((len(data), C))
    for f in range(k):
        test = np.flatnonzero(folds == f)
        train = np.flatnonzero(folds != f)
        probs[test] = fit_predict(data.subset(train), data.subset(test))
    return OOFResult(data.ids, data.labels, probs, folds)


# ---------------------------------------------------------------------------
# fine-tuning


class Classifier(nn.Module):
    """Encoder + mean pooling + norm + single linear head."""

    def __init__(self, encoder: ViTEncoder, num_classes: int):
        super().__init__()
        self.encoder = encoder
        self.fc_norm = nn.LayerNorm(encoder.arch.embed_dim)
        self.head = nn.Linear(encoder.arch.embed_dim, num_classes)
        nn.init.trunc_normal_(self.head.weight, std=0.02)
        nn.init.zeros_(self.head.bias)

    def forward(self, x):
        x = fit_side(x, self.encoder.arch.image_side)
        return self.head(self.fc_norm(self.encoder(x).mean(dim=1)))


def layer_decay_multipliers(depth: int, decay: float) -> dict[str, float]:
    """Per-prefix lr multipliers: deepest block 1, each shallower block x decay.

    The patch embedding sits one step below the shallowest block; the head
    and final norms train at the full rate.
    """
    out = {f"encoder.blocks.{i}.": decay ** (depth - 1 - i) for i in range(depth)}
    out["encoder.patch_embed."] = decay**depth
    return out


def mix_batch(
    x: torch.Tensor,
    y: torch.Tensor,
    num_classes: int,
    mixup_alpha: float,
    cutmix_alpha: float,
    generator: np.random.Generator,
    switch_prob: float = 0.5,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Mixup / CutMix with soft targets; both alphas 0 returns the batch and one-hot targets."""
    target = F.one_hot(y, num_classes).to(x.dtype)
    use_mixup = mixup_alpha > 0
    use_cutmix = cutmix_alpha > 0
    if not (use_mixup or use_cutmix):
        return x, target
    if use_mixup and use_cutmix:
        use_cutmix = generator.random() < switch_prob
        use_mixup = not use_cutmix
    perm = torch.arange(len(x) - 1, -1, -1)  # pair with the flipped batch
    if use_cutmix:
        lam = generator.beta(cutmix_alpha, cutmix_alpha)
        H, W = x.shape[-2:]
        cut = np.sqrt(1 - lam)
        ch, cw = int(H * cut), int(W * cut)
        cy, cx = generator.integers(H), generator.integers(W)
        y0, y1 = np.clip([cy - ch // 2, cy + ch // 2], 0, H)
        x0, x1 = np.clip([cx - cw // 2, cx + cw // 2], 0, W)
        x = x.clone()
        x[..., y0:y1, x0:x1] = x[perm][..., y0:y1, x0:x1]
        lam = 1 - (y1 - y0) * (x1 - x0) / (H * W)
    else:
        lam = generator.beta(mixup_alpha, mixup_alpha)
        x = lam * x + (1 - lam) * x[perm]
    return x, lam * target + (1 - lam) * target[perm]


def soft_cross_entropy(logits: torch.Tensor, soft_targets: torch.Tensor) -> torch.Tensor:
    return torch.sum(-soft_targets * F.log_softmax(logits, dim=-1), dim=-1).mean()


@dataclass
class FinetuneSettings:
    epochs: int = 50
    warmup_epochs: int = 10
    batch_size: int = 256
    learning_rate: float = 5e-4
    layer_decay: float = 0.75
    weight_decay: float = 0.05
    drop_path: float = 0.2
    reprob: float = 0.25
    mixup: float = 0.8
    cutmix: float = 1.0
    selection_metric: str = "auroc"
    seed: int = 0

    @classmethod
    def from_hyperparameters(cls, hp: Mapping[str, Any], seed: int = 0) -> "FinetuneSettings":
        keys = cls.__dataclass_fields__
        return cls(**{k: hp[k] for k in keys if k in hp}, seed=seed)


@dataclass
class FinetuneResult:
    model: Classifier
    best_epoch: int
    val_metrics: dict[str, Any]
    history: list[dict[str, Any]] = field(default_factory=list)
    checkpoint: Path | None = None


@torch.no_grad()
def predict_proba(model: nn.Module, x: torch.Tensor, batch_size: int = 64) -> np.ndarray:
    model.eval()
    out = [F.softmax(model(x[i : i + batch_size]), dim=-1).double().numpy() for i in range(0, len(x), batch_size)]
    return np.concatenate(out)


def finetune(
    encoder: ViTEncoder,
    train_x,
    train_y,
    val_x,
    val_y,
    num_classes: int,
    settings: FinetuneSettings,
    out_dir: str | Path | None = None,
    sidecar_extra: Mapping[str, Any] | None = None,
) -> FinetuneResult:
    """Full fine-tune; keeps the epoch with the best validation metric."""
    train_x, val_x = to_batch(train_x), to_batch(val_x)
    train_y = torch.as_tensor(np.asarray(train_y), dtype=torch.long)
    val_y = np.asarray(val_y)
    if len(val_x) == 0:
        raise ValidationError("validation split is empty")
    s = settings
    for p in encoder.parameters():
        p.requires_grad_(True)
    for i, blk in enumerate(encoder.blocks):
        blk.drop_path.p = s.drop_path * i / max(1, encoder.depth - 1)
    model = Classifier(encoder, num_classes)
    opt = torch.optim.AdamW(
        param_groups(model, s.weight_decay, layer_decay_multipliers(encoder.depth, s.layer_decay)), lr=s.learning_rate
    )
    rng = np.random.default_rng(s.seed)
    erase = v2.RandomErasing(p=s.reprob) if s.reprob > 0 else None
    steps_per_epoch = max(1, int(np.ceil(len(train_x) / s.batch_size)))
    total = s.epochs * steps_per_epoch
    warm = s.warmup_epochs * steps_per_epoch
    best = (-np.inf, -1)
    best_state = None
    best_metrics: dict[str, Any] = {}
    history = []
    step = 0
    for epoch in range(s.epochs):
        model.train()
        order = torch.from_numpy(rng.permutation(len(train_x)))
        losses = []
        for i in range(0, len(order), s.batch_size):
            idx = order[i : i + s.batch_size]
            xb, yb = train_x[idx], train_y[idx]
            if rng.random() < 0.5:
                xb = xb.flip(-1)
            if erase is not None:
                xb = torch.stack([erase(im) for im in xb])
            xb, tb = mix_batch(xb, yb, num_classes, s.mixup, s.cutmix, rng)
            lr = cosine_lr(step, total, warm, s.learning_rate)
            set_lr(opt, lr)
            loss = soft_cross_entropy(model(xb), tb)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(loss.item())
            step += 1
        prob = predict_proba(model, val_x)
        metrics = classification_metrics(val_y, prob)
        score = metrics.get(s.selection_metric)
        score = -np.inf if score is None else score
        val_loss = float(-np.mean(np.log(np.clip(prob[np.arange(len(val_y)), val_y], 1e-12, None))))
        rec = {"epoch": epoch + 1, "train_loss": float(np.mean(losses)), "val_loss": val_loss, "lr": lr}
        rec.update({k: metrics[k] for k in ("w_f1", "auroc", "bacc", "aupr")})
        history.append(rec)
        if score > best[0]:
            best = (score, epoch + 1)
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            best_metrics = {k: v for k, v in metrics.items() if k != "reasons"}
    model.load_state_dict(best_state)
    model.eval()
    result = FinetuneResult(model, best[1], best_metrics, history)
    if out_dir is not None:
        out_dir = Path(out_dir)
        cols = ["epoch", "train_loss", "val_loss", "w_f1", "auroc", "bacc", "aupr", "lr"]
        write_csv(out_dir / "epochs.csv", cols, ([r[c] for c in cols] for r in history))
        sidecar = {
            "epoch": best[1],
            "selection_metric": s.selection_metric,
            "metrics": best_metrics,
            "arch": encoder.arch.to_dict(),
            "num_classes": num_classes,
            **(sidecar_extra or {}),
        }
        result.checkpoint = save_checkpoint(out_dir / "checkpoint", model.state_dict(), sidecar)
    return result


def load_classifier(checkpoint: str | Path) -> Classifier:
    state, sidecar = load_checkpoint(checkpoint)
    enc = build_encoder(ArchConfig.from_dict(sidecar["arch"]))
    model = Classifier(enc, int(sidecar["num_classes"]))
    apply_state(model, state)
    return model.eval()
