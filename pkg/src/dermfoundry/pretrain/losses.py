from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from ..core import ShapeError


@dataclass(frozen=True)
class PretrainBatchLoss:
    masked_align: float
    visible_align: float
    w_masked: float = 1.0
    w_visible: float = 0.0

    @property
    def total(self) -> float:
        if self.w_visible == 0.0:
            return self.w_masked * self.masked_align
        return self.w_masked * self.masked_align + self.w_visible * self.visible_align


def alignment_loss(predicted: torch.Tensor, target: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Mean over patches of ||p/|p| - t/|t|||^2.

    Accepts (N, D) or (B, N, D). Orthogonal unit rows score 2; an empty patch
    set scores 0.
    """
    if predicted.shape[:-1] != target.shape[:-1]:
        raise ShapeError(f"row count mismatch: predicted {tuple(predicted.shape)} vs target {tuple(target.shape)}")
    if predicted.shape[-1] != target.shape[-1]:
        raise ShapeError(f"dim mismatch: {predicted.shape[-1]} vs {target.shape[-1]}; project before the loss")
    if predicted.numel() == 0:
        return predicted.new_zeros(())
    p = F.normalize(predicted, dim=-1, eps=eps)
    t = F.normalize(target, dim=-1, eps=eps)
    return ((p - t) ** 2).sum(-1).mean()
