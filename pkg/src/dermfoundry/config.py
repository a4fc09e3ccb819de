"""Per-task hyperparameter schemas and layered config resolution."""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any, Mapping

from .core import ConfigError

ENV_PREFIX = "DERMFOUNDRY_HP_"

# architecture keys accepted by every task that builds an encoder
ENCODER_KEYS: dict[str, Any] = {
    "encoder_preset": "fixture",  # fixture | vit_large
    "first_input_size": None,
    "patch_size": None,
    "encoder_embed_dimension": None,
    "encoder_depth": None,
    "encoder_number_of_heads": None,
    "checkpoint": None,
}

PRETRAIN: dict[str, Any] = {
    **ENCODER_KEYS,
    # keys below mirror the pretraining hyperparameter table
    "teacher_model": "random",  # random (frozen fixture) | path to a saved teacher module
    "second_input_size": None,
    "second_interpolation": "bicubic",
    "number_of_output_dimensions": None,
    "crop_min_size": 0.4,
    "crop_max_size": 1.0,
    "vocabulary_size": 8000,  # listed in the table; unused by the architecture
    "batch_size": 16,
    "learning_rate": 1.5e-3,
    "warmup_epochs": 20,
    "total_epochs": 500,
    "gradient_clipping_max_norm": 3.0,
    "layer_scale_init_value": None,
    "color_jitter": 0.4,
    "drop_path": 0.2,
    "mask_generator": "block",
    "number_of_mask_patches": None,
    "decoder_layer_scale_init_value": None,
    "regressor_depth": None,
    "decoder_depth": 0,
    "decoder_embed_dimension": None,
    "decoder_number_of_heads": None,
    "align_loss_weight": 0.0,
    "latent_alignment_loss_weight": 1.0,
    # desk-scale knobs
    "steps": 50,
    "weight_decay": 0.05,
    "min_block": 4,
}

PROBE: dict[str, Any] = {
    **ENCODER_KEYS,
    "lambda_override": None,
    "max_iter": 1000,
    "tol": 1e-5,
}

FINETUNE: dict[str, Any] = {
    **ENCODER_KEYS,
    "batch_size": 256,
    "epochs": 50,
    "warmup_epochs": 10,
    "learning_rate": 5e-4,
    "layer_decay": 0.75,
    "weight_decay": 0.05,
    "drop_path": 0.2,
    "reprob": 0.25,
    "mixup": 0.8,
    "cutmix": 1.0,
    "selection_metric": "auroc",
}

OOF: dict[str, Any] = {
    **ENCODER_KEYS,
    "folds": 5,
    "stratify_by": "label",
    "lambda_override": None,
    "max_iter": 1000,
    "tol": 1e-5,
}

SEG_TRAIN: dict[str, Any] = {
    **ENCODER_KEYS,
    "batch_size": 16,
    "epochs": 100,
    "learning_rate": 5e-4,
    "weight_decay": 0.01,
    "color_jitter": 0.2,
    "decoder_channels": 32,
}

SEG_PREDICT: dict[str, Any] = {"threshold": 0.5}

SEQPREP: dict[str, Any] = {
    "stages": "corner,hair,warp,mask",
    "corner_threshold": 100,
    "corner_scale": 0.8,
    "corner_inpaint_radius": 10,
    "corner_bailout_coverage": 0.98,
    "hair_kernel": 17,
    "hair_threshold": 10,
    "hair_inpaint_radius": 3,
    "akaze_threshold": 9e-5,
    "akaze_octaves": 4,
    "ransac_residual_threshold": 3.0,
    "ransac_max_trials": 2000,
    "mask_dilation": 8,
}

CHANGE: dict[str, Any] = {
    **ENCODER_KEYS,
    "batch_size": 16,
    "epochs": 10,
    "learning_rate": 1e-3,
    "weight_decay": 0.05,
    "margin": 1.0,
    "contrastive_weight": 1.0,
    "ce_weight": 1.0,
    "symmetric_head": True,
    "head_hidden": 128,
    "preproc": "whole",
}

TBP: dict[str, Any] = {
    **ENCODER_KEYS,
    "risk_threshold": 0.5,
    "ml_threshold": 0.5,
    "n_trees": 200,
    "max_depth": None,
    "iqr_multiplier": 1.5,
    "min_lesions_per_patient": 4,
    "modules": "risk,ud,ml",
}

MIL: dict[str, Any] = {
    "folds": 5,
    "max_epochs": 20,
    "learning_rate": 1e-4,
    "weight_decay": 1e-5,
    "patience": 5,
    "val_fraction": 0.2,
    "embed_dim": 512,
    "attn_hidden": 384,
    "input_dropout": 0.10,
    "attn_dropout": 0.25,
}

SURVIVAL: dict[str, Any] = {
    "covariates": "",
    "horizons": "36,60,84",
    "ipcw": True,
}

REPORT: dict[str, Any] = {
    "n_bootstrap": 1000,
    "n_permutations": 1000,
    "level": 0.95,
    "group_key": None,
}

TASK_SCHEMAS: dict[str, dict[str, Any]] = {
    "pretrain": PRETRAIN,
    "probe": PROBE,
    "finetune": FINETUNE,
    "oof": OOF,
    "seg-train": SEG_TRAIN,
    "seg-predict": SEG_PREDICT,
    "seqprep": SEQPREP,
    "change-train": CHANGE,
    "change-eval": CHANGE,
    "tbp-screen": TBP,
    "mil-train": MIL,
    "survival": SURVIVAL,
    "report": REPORT,
}


def _coerce(raw: str, default: Any, name: str = "") -> Any:
    try:
        return _coerce_value(raw, default)
    except ValueError as exc:
        raise ConfigError(f"bad value for hyperparameter {name!r}: {exc}") from None


def _coerce_value(raw: str, default: Any) -> Any:
    if isinstance(default, bool):
        v = raw.strip().lower()
        if v not in ("1", "true", "yes", "on", "0", "false", "no", "off"):
            raise ValueError(f"not a boolean: {raw!r}")
        return v in ("1", "true", "yes", "on")
    if isinstance(default, str):
        return raw
    if isinstance(default, int) and not isinstance(default, bool):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    try:
        return json.loads(raw)
    except (json.JSONDecodeError, ValueError):
        return raw


def resolve_hyperparameters(
    task: str,
    file_values: Mapping[str, Any] | None = None,
    env: Mapping[str, str] | None = None,
    flags: Mapping[str, Any] | None = None,
) -> dict[str, Any]:
    """Merge defaults < file < env < flags, rejecting unknown keys."""
    if task not in TASK_SCHEMAS:
        raise ConfigError(f"unknown task {task!r}")
    schema = TASK_SCHEMAS[task]
    out = dict(schema)
    for source, values in (("config file", file_values or {}), ("flags", flags or {})):
        for key in values:
            if key not in schema:
                raise ConfigError(f"unknown hyperparameter {key!r} for task {task!r} (from {source})")
        if source == "flags":
            for key, raw in (env if env is not None else os.environ).items():
                if key.startswith(ENV_PREFIX):
                    name = key[len(ENV_PREFIX):].lower()
                    if name not in schema:
                        raise ConfigError(f"unknown hyperparameter {name!r} for task {task!r} (from env {key})")
                    out[name] = _coerce(raw, schema[name], name)
        for key, value in values.items():
            out[key] = _coerce(value, schema[key], key) if isinstance(value, str) and schema[key] is not None else value
    return out


def load_config_file(path: str | os.PathLike | None) -> dict[str, Any]:
    if path is None:
        return {}
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return data
