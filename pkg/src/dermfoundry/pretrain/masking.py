"""Patch-grid geometry and block mask generation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..core import ValidationError


@dataclass(frozen=True)
class PatchGridSpec:
    image_side: int = 224
    patch_side: int = 16
    teacher_image_side: int = 196

    def __post_init__(self):
        if self.image_side % self.patch_side:
            raise ValidationError(f"image_side {self.image_side} not divisible by patch_side {self.patch_side}")
        if self.teacher_image_side % self.grid:
            raise ValidationError(
                f"teacher_image_side {self.teacher_image_side} does not tile into a {self.grid}x{self.grid} grid"
            )

    @property
    def grid(self) -> int:
        return self.image_side // self.patch_side

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def teacher_patch_side(self) -> int:
        # equal patch counts for student and teacher
        return self.teacher_image_side // self.grid


@dataclass(frozen=True)
class PatchMask:
    masked: np.ndarray  # bool, flattened row-major over the grid

    def __post_init__(self):
        object.__setattr__(self, "masked", np.asarray(self.masked, dtype=bool).ravel())

    @property
    def count_masked(self) -> int:
        return int(self.masked.sum())

    @property
    def visible_index(self) -> np.ndarray:
        return np.flatnonzero(~self.masked)

    @property
    def masked_index(self) -> np.ndarray:
        return np.flatnonzero(self.masked)


def generate_block_mask(
    spec: PatchGridSpec,
    target_count: int,
    rng: np.random.Generator,
    min_block: int = 4,
    max_block: int | None = None,
    aspect_range: tuple[float, float] = (0.3, 1 / 0.3),
) -> PatchMask:
    """Mask exactly ``target_count`` patches as a union of rectangles.

    Rectangles (aspect ratio within ``aspect_range``) are drawn until the
    count is reached; the block that would overshoot is trimmed in raster
    order and is the only block allowed below ``min_block``.
    """
    g = spec.grid
    n = g * g
    if not 0 <= target_count <= n:
        raise ValidationError(f"target_count {target_count} outside [0, {n}]")
    mask = np.zeros((g, g), dtype=bool)
    count = 0
    log_lo, log_hi = math.log(aspect_range[0]), math.log(aspect_range[1])
    cap = max_block if max_block is not None else n
    while count < target_count:
        remaining = target_count - count
        hi = max(min_block, min(remaining, cap))
        area = rng.uniform(min_block, hi)
        aspect = math.exp(rng.uniform(log_lo, log_hi))
        h = min(g, max(1, int(round(math.sqrt(area * aspect)))))
        w = min(g, max(1, int(round(math.sqrt(area / aspect)))))
        while h * w < min_block:
            if w < g:
                w += 1
            elif h < g:
                h += 1
            else:
                break
        # placements range over offsets that may hang off the grid edge so
        # every cell is covered with equal probability; clipped rectangles
        # must keep min_block cells and gain at least one visible cell
        for _ in range(64):
            top = int(rng.integers(-h + 1, g))
            left = int(rng.integers(-w + 1, g))
            r0, r1, c0, c1 = _clip(top, left, h, w, g)
            if (r1 - r0) * (c1 - c0) >= min(min_block, h * w) and not mask[r0:r1, c0:c1].all():
                break
        else:
            # dense regime: anchor the rectangle on a random visible cell
            free = np.flatnonzero(~mask.ravel())
            ar, ac = divmod(int(free[rng.integers(len(free))]), g)
            top = min(max(0, ar - int(rng.integers(h))), g - h)
            left = min(max(0, ac - int(rng.integers(w))), g - w)
            r0, r1, c0, c1 = _clip(top, left, h, w, g)
        block = mask[r0:r1, c0:c1]
        new_cells = np.argwhere(~block)
        if len(new_cells) > remaining:
            new_cells = new_cells[:remaining]
        block[new_cells[:, 0], new_cells[:, 1]] = True
        count += len(new_cells)
    return PatchMask(mask.ravel())


def _clip(top: int, left: int, h: int, w: int, g: int) -> tuple[int, int, int, int]:
    return max(0, top), min(g, top + h), max(0, left), min(g, left + w)


def random_mask(spec: PatchGridSpec, target_count: int, rng: np.random.Generator) -> PatchMask:
    """Uniform random patch subset (non-block baseline)."""
    if not 0 <= target_count <= spec.num_patches:
        raise ValidationError(f"target_count {target_count} outside [0, {spec.num_patches}]")
    m = np.zeros(spec.num_patches, dtype=bool)
    m[rng.choice(spec.num_patches, target_count, replace=False)] = True
    return PatchMask(m)


def largest_block_area(mask: PatchMask, grid: int) -> int:
    """Area of the largest all-masked axis-aligned rectangle."""
    m = mask.masked.reshape(grid, grid)
    heights = np.zeros(grid, dtype=int)
    best = 0
    for row in m:
        heights = np.where(row, heights + 1, 0)
        stack: list[int] = []
        for i in range(grid + 1):
            cur = heights[i] if i < grid else 0
            while stack and heights[stack[-1]] >= cur:
                top = stack.pop()
                width = i if not stack else i - stack[-1] - 1
                best = max(best, int(heights[top]) * width)
            stack.append(i)
    return best
