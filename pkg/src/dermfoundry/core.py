"""Shared domain types, manifests, seeding and checkpoint persistence."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import random
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
import torch

DATA_ENV = "DERMFOUNDRY_DATA"
GROUPS = ("train", "val", "test")
MANIFEST_COLUMNS = ("image_ref", "label", "patient_id", "group")
WEIGHTS_FILE = "weights.bin"
SIDECAR_FILE = "sidecar.json"


class DermFoundryError(Exception):
    """Base class for all package errors."""


class ValidationError(DermFoundryError, ValueError):
    pass


class SchemaError(ValidationError):
    pass


class ShapeError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class CheckpointCorruptionError(DermFoundryError):
    pass


# ---------------------------------------------------------------------------
# images


@dataclass(frozen=True)
class ImageGrid:
    """Decoded raster, channels x height x width, values in [0, 1]."""

    pixels: np.ndarray
    source_path: str = ""

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim == 2:
            px = px[None]
        if px.ndim != 3 or px.shape[0] not in (1, 3):
            raise ShapeError(f"expected C x H x W with C in (1, 3), got {px.shape}")
        if px.shape[1] < 1 or px.shape[2] < 1:
            raise ShapeError(f"empty raster {px.shape}")
        if not np.all(np.isfinite(px)):
            raise ValidationError("image contains non-finite values")
        object.__setattr__(self, "pixels", px)

    @property
    def channels(self) -> int:
        return self.pixels.shape[0]

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]

    def to_uint8(self) -> np.ndarray:
        """H x W x C uint8 view for OpenCV-style processing."""
        hwc = np.transpose(self.pixels, (1, 2, 0))
        return np.clip(np.round(hwc * 255.0), 0, 255).astype(np.uint8)

    @classmethod
    def from_uint8(cls, array: np.ndarray, source_path: str = "") -> "ImageGrid":
        arr = np.asarray(array)
        if arr.ndim == 2:
            arr = arr[..., None]
        return cls(np.transpose(arr.astype(np.float32) / 255.0, (2, 0, 1)), source_path)

    def to_tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.pixels.copy())


def load_image(path: str | os.PathLike) -> ImageGrid:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"))
    return ImageGrid.from_uint8(arr, str(path))


def save_image(path: str | os.PathLike, image: ImageGrid | np.ndarray) -> None:
    from PIL import Image

    arr = image.to_uint8() if isinstance(image, ImageGrid) else np.asarray(image)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr).save(path)


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class ManifestRow:
    image_ref: str
    label: int | None
    patient_id: str | None
    group: str
    extras: Mapping[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class Manifest:
    rows: tuple[ManifestRow, ...]
    num_classes: int
    label_names: tuple[str, ...] = ()
    root: str = ""

    def split(self, group: str) -> list[ManifestRow]:
        return [r for r in self.rows if r.group == group]

    def resolve(self, ref: str) -> Path:
        p = Path(ref)
        if p.is_absolute():
            return p
        root = os.environ.get(DATA_ENV) or self.root
        return Path(root) / p

    def labels(self, group: str | None = None) -> np.ndarray:
        rows = self.rows if group is None else self.split(group)
        return np.array([-1 if r.label is None else r.label for r in rows], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.rows)


def _validate_rows(rows: Sequence[ManifestRow]) -> int:
    seen: set[str] = set()
    for r in rows:
        if r.image_ref in seen:
            raise ValidationError(f"duplicate image_ref {r.image_ref!r}")
        seen.add(r.image_ref)
        if r.group not in GROUPS:
            raise ValidationError(f"row {r.image_ref!r}: group must be one of {GROUPS}, got {r.group!r}")
    labels = sorted({r.label for r in rows if r.label is not None})
    if labels and labels != list(range(len(labels))):
        raise ValidationError(f"label ids must be contiguous from 0, got {labels}")
    return len(labels)


def make_manifest(rows: Iterable[ManifestRow], root: str = "", label_names: Sequence[str] = ()) -> Manifest:
    rows = tuple(rows)
    n = _validate_rows(rows)
    if label_names and len(label_names) != n:
        raise ValidationError(f"label vocabulary has {len(label_names)} names for {n} classes")
    return Manifest(rows, n, tuple(label_names), root)


def load_manifest(path: str | os.PathLike, vocab_path: str | os.PathLike | None = None) -> Manifest:
    """Parse a manifest CSV (``image_ref,label,patient_id,group`` + extras)."""
    path = Path(path)
    text = path.read_text()
    if not text.strip():
        raise SchemaError(f"{path}: empty manifest, no header row")
    reader = csv.DictReader(io.StringIO(text))
    header = reader.fieldnames or []
    missing = [c for c in MANIFEST_COLUMNS if c not in header]
    if missing:
        raise SchemaError(f"{path}: missing column(s) {missing}")
    extra_cols = [c for c in header if c not in MANIFEST_COLUMNS]
    rows = []
    for rec in reader:
        label = rec["label"].strip()
        pid = rec["patient_id"].strip()
        try:
            lab = int(label) if label else None
        except ValueError as exc:
            raise ValidationError(f"non-integer label {label!r}") from exc
        rows.append(
            ManifestRow(
                image_ref=rec["image_ref"].strip(),
                label=lab,
                patient_id=pid or None,
                group=rec["group"].strip(),
                extras=MappingProxyType({c: rec[c] for c in extra_cols}),
            )
        )
    names: Sequence[str] = ()
    if vocab_path is not None:
        vocab = json.loads(Path(vocab_path).read_text())
        names = [vocab[str(i)] for i in range(len(vocab))] if isinstance(vocab, dict) else list(vocab)
    return make_manifest(rows, root=str(path.parent), label_names=names)


def write_manifest(path: str | os.PathLike, rows: Sequence[ManifestRow]) -> None:
    extra_cols = sorted({k for r in rows for k in r.extras})
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(MANIFEST_COLUMNS) + extra_cols)
        for r in rows:
            w.writerow(
                [r.image_ref, "" if r.label is None else r.label, r.patient_id or "", r.group]
                + [r.extras.get(c, "") for c in extra_cols]
            )


# ---------------------------------------------------------------------------
# seeding


def seed_all(seed: int) -> None:
    """Seed python, numpy and torch global streams."""
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def derive_seed(seed: int, *keys: Any) -> int:
    """Stable child seed for (seed, worker, epoch, ...) style streams."""
    h = hashlib.sha256(repr((seed,) + keys).encode()).digest()
    return int.from_bytes(h[:8], "little") & (2**63 - 1)


# ---------------------------------------------------------------------------
# configs


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_json_default)


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.ndarray,)):
        return o.tolist()
    if isinstance(o, MappingProxyType):
        return dict(o)
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o)}")


def config_hash(config: Mapping[str, Any]) -> str:
    return hashlib.sha256(canonical_json(dict(config)).encode()).hexdigest()


@dataclass(frozen=True)
class RunConfig:
    seed: int
    task: str
    hyperparameters: Mapping[str, Any]
    output_dir: str = "runs/default"

    @classmethod
    def build(cls, task: str, seed: int = 0, output_dir: str = "runs/default", **overrides) -> "RunConfig":
        from .config import resolve_hyperparameters

        return cls(seed, task, MappingProxyType(resolve_hyperparameters(task, overrides)), output_dir)

    def to_dict(self) -> dict[str, Any]:
        return {
            "seed": self.seed,
            "task": self.task,
            "hyperparameters": dict(self.hyperparameters),
            "output_dir": self.output_dir,
        }

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        return config_hash(d)

    def __getitem__(self, key: str) -> Any:
        return self.hyperparameters[key]


# ---------------------------------------------------------------------------
# checkpoints


def _to_numpy_state(state: Mapping[str, Any]) -> dict[str, np.ndarray]:
    out = {}
    for k, v in state.items():
        if isinstance(v, torch.Tensor):
            v = v.detach().cpu().numpy()
        out[k] = np.asarray(v)
    return out


def save_checkpoint(out_dir: str | os.PathLike, model_state: Mapping[str, Any], sidecar: Mapping[str, Any]) -> Path:
    """Write ``{weights.bin, sidecar.json}`` into ``out_dir`` and return it."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    arrays = _to_numpy_state(model_state)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    blob = buf.getvalue()
    (out / WEIGHTS_FILE).write_bytes(blob)
    meta = dict(sidecar)
    if "config" in meta and "config_hash" not in meta:
        meta["config_hash"] = config_hash(meta["config"])
    meta["weights_sha256"] = hashlib.sha256(blob).hexdigest()
    meta["param_shapes"] = {k: list(v.shape) for k, v in arrays.items()}
    (out / SIDECAR_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True, default=_json_default) + "\n")
    return out


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, torch.Tensor], dict[str, Any]]:
    path = Path(path)
    if not path.is_dir():
        raise ValidationError(f"{path}: not a checkpoint directory")
    try:
        sidecar = json.loads((path / SIDECAR_FILE).read_text())
        blob = (path / WEIGHTS_FILE).read_bytes()
    except FileNotFoundError as exc:
        raise CheckpointCorruptionError(f"{path}: incomplete checkpoint ({exc.filename} missing)") from exc
    digest = hashlib.sha256(blob).hexdigest()
    if sidecar.get("weights_sha256") != digest:
        raise CheckpointCorruptionError(f"{path}: weights hash {digest[:12]} does not match sidecar")
    if "config" in sidecar and sidecar.get("config_hash") != config_hash(sidecar["config"]):
        raise CheckpointCorruptionError(f"{path}: sidecar config_hash does not match stored config")
    with np.load(io.BytesIO(blob), allow_pickle=False) as z:
        state = {k: torch.from_numpy(z[k].copy()) for k in z.files}
    return state, sidecar


def apply_state(module: torch.nn.Module, state: Mapping[str, torch.Tensor], strict: bool = True) -> None:
    """Copy ``state`` into ``module``; first mismatching parameter is named."""
    own = module.state_dict()
    for name, tensor in own.items():
        if name not in state:
            if strict:
                raise ShapeError(f"missing parameter {name!r} (expected shape {tuple(tensor.shape)})")
            continue
        if tuple(state[name].shape) != tuple(tensor.shape):
            raise ShapeError(
                f"parameter {name!r}: checkpoint shape {tuple(state[name].shape)} != model shape {tuple(tensor.shape)}"
            )
    if strict:
        unexpected = [k for k in state if k not in own]
        if unexpected:
            raise ShapeError(f"unexpected parameter {unexpected[0]!r} in checkpoint")
    module.load_state_dict({k: v for k, v in state.items() if k in own}, strict=strict)


# ---------------------------------------------------------------------------
# deterministic table output


def fmt(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: str | os.PathLike, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])
    return path


def read_csv(path: str | os.PathLike) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_json(path: str | os.PathLike, obj: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path
