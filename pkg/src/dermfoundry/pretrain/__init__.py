from .losses import PretrainBatchLoss, alignment_loss
from .masking import PatchGridSpec, PatchMask, generate_block_mask, largest_block_area
from .model import (
    ArchConfig,
    MaskRegressor,
    PretrainModel,
    RandomFrozenTeacher,
    TeacherUnavailableError,
    ViTEncoder,
    arch_from_hyperparameters,
    build_encoder,
    build_teacher,
)
from .train import (
    NonFiniteLossError,
    Pretrainer,
    PretrainSettings,
    cosine_lr,
    encode_visible,
    regress_masked,
    run_pretraining,
    split_targets,
    teacher_targets,
)

__all__ = [
    "ArchConfig",
    "MaskRegressor",
    "NonFiniteLossError",
    "PatchGridSpec",
    "PatchMask",
    "PretrainBatchLoss",
    "PretrainModel",
    "PretrainSettings",
    "Pretrainer",
    "RandomFrozenTeacher",
    "TeacherUnavailableError",
    "ViTEncoder",
    "alignment_loss",
    "arch_from_hyperparameters",
    "build_encoder",
    "build_teacher",
    "cosine_lr",
    "encode_visible",
    "generate_block_mask",
    "largest_block_area",
    "regress_masked",
    "run_pretraining",
    "split_targets",
    "teacher_targets",
]
