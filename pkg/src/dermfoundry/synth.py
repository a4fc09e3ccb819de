"""Synthetic fixtures standing in for the private clinical datasets.

Everything here is deterministic given a ``numpy.random.Generator``.
"""

from __future__ import annotations

import numpy as np
import cv2

SKIN_TONES = np.array([[224, 172, 150], [198, 134, 110], [236, 188, 160], [170, 110, 85]], dtype=np.float64)


def skin_background(side: int, rng: np.random.Generator, texture: float = 6.0) -> np.ndarray:
    """Smooth skin-tone field with low-frequency shading and fine noise, float RGB."""
    base = SKIN_TONES[rng.integers(len(SKIN_TONES))] + rng.normal(0, 8, 3)
    coarse = rng.normal(0, 1, (max(2, side // 16), max(2, side // 16), 3))
    coarse = cv2.resize(coarse, (side, side), interpolation=cv2.INTER_CUBIC)
    img = base + 10 * coarse + rng.normal(0, texture, (side, side, 3))
    return img


def lesion_image(
    side: int,
    rng: np.random.Generator,
    color: tuple[float, float, float] | None = None,
    radius: float | None = None,
    center: tuple[float, float] | None = None,
    texture: float = 6.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Dermoscopy-like image (uint8 HxWx3) with an irregular lesion and its mask."""
    img = skin_background(side, rng, texture)
    r = radius if radius is not None else rng.uniform(0.15, 0.3) * side
    cx, cy = center if center is not None else (side / 2 + rng.normal(0, side * 0.05), side / 2 + rng.normal(0, side * 0.05))
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    theta = np.arctan2(yy - cy, xx - cx)
    wobble = 1 + 0.12 * np.sin(3 * theta + rng.uniform(0, 6.28)) + 0.06 * np.sin(5 * theta + rng.uniform(0, 6.28))
    dist = np.hypot(yy - cy, xx - cx) / (r * wobble)
    mask = dist <= 1.0
    col = np.array(color if color is not None else (110, 70, 50), dtype=np.float64) + rng.normal(0, 6, 3)
    inner = np.clip(1.0 - dist, 0, 1)[..., None]
    pigment = col + 25 * rng.normal(0, 1, (side, side, 3)) * 0.3
    alpha = np.clip((1.0 - dist) * 6, 0, 1)[..., None]
    img = img * (1 - alpha) + (pigment - 15 * inner) * alpha
    return np.clip(img, 0, 255).astype(np.uint8), mask


def textured_image(side: int, rng: np.random.Generator) -> np.ndarray:
    """Lesion on skin with dense blob texture; suited to keypoint registration tests."""
    img, _ = lesion_image(side, rng)
    img = img.astype(np.float64)
    for _ in range(side * side // 90):
        x, y = rng.uniform(0, side, 2)
        rr = rng.uniform(1.5, 5.0)
        shade = rng.normal(0, 35, 3)
        half = int(np.ceil(3 * rr))
        x0, x1 = max(0, int(x) - half), min(side, int(x) + half + 1)
        y0, y1 = max(0, int(y) - half), min(side, int(y) + half + 1)
        yy, xx = np.mgrid[y0:y1, x0:x1]
        blob = np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2 * rr**2))
        img[y0:y1, x0:x1] += blob[..., None] * shade
    return np.clip(img, 0, 255).astype(np.uint8)


def disk_on_noise(side: int, rng: np.random.Generator, radius_range=(0.18, 0.35)) -> tuple[np.ndarray, np.ndarray]:
    """Float RGB image in [0,1] with one dark disk on noise, and its boolean mask."""
    r = rng.uniform(*radius_range) * side
    cx, cy = rng.uniform(r, side - r, 2)
    yy, xx = np.mgrid[0:side, 0:side]
    mask = (xx + 0.5 - cx) ** 2 + (yy + 0.5 - cy) ** 2 <= r * r
    bg = rng.uniform(0.55, 0.8, 3)
    fg = bg - rng.uniform(0.25, 0.4)
    img = np.where(mask[..., None], fg, bg) + rng.normal(0, 0.06, (side, side, 3))
    return np.clip(img, 0, 1).astype(np.float32), mask


def draw_hairs(image: np.ndarray, rng: np.random.Generator, n: int = 3, thickness: int = 2, contrast: float = 40.0):
    """Draw ``n`` dark quadratic curves; returns (image, boolean hair mask)."""
    out = image.copy()
    h, w = out.shape[:2]
    mask = np.zeros((h, w), dtype=np.uint8)
    for _ in range(n):
        p0 = rng.uniform([0, 0], [w, h])
        p2 = rng.uniform([0, 0], [w, h])
        p1 = (p0 + p2) / 2 + rng.normal(0, w * 0.15, 2)
        t = np.linspace(0, 1, 200)[:, None]
        pts = (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t**2 * p2
        cv2.polylines(mask, [np.round(pts).astype(np.int32)], False, 255, thickness)
    hair = mask > 0
    gray_local = cv2.GaussianBlur(out, (0, 0), 4).astype(np.float64)
    darker = np.clip(gray_local - contrast, 0, 255)
    out = np.where(hair[..., None], darker, out).astype(np.uint8)
    return out, hair


def add_dark_corners(image: np.ndarray, radius_frac: float = 0.45) -> np.ndarray:
    """Black out everything outside a centred circle (dermatoscope vignette)."""
    h, w = image.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w]
    outside = np.hypot(xx - w / 2, yy - h / 2) > radius_frac * min(h, w) * 1.0
    out = image.copy()
    out[outside] = (out[outside] * 0.08).astype(np.uint8)
    return out


def euclidean_warp(image: np.ndarray, angle_deg: float, shift: tuple[float, float]) -> np.ndarray:
    """Rotate about the centre by ``angle_deg`` then translate by ``shift`` (dx, dy)."""
    h, w = image.shape[:2]
    M = cv2.getRotationMatrix2D((w / 2 - 0.5, h / 2 - 0.5), angle_deg, 1.0)
    M[:, 2] += shift
    return cv2.warpAffine(image, M, (w, h), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REFLECT)


def change_pair(side: int, rng: np.random.Generator, changed: bool, disk_radius: int = 12, jitter: float = 0.0):
    """Sequential pair; a changed pair gains a dark disk of ``disk_radius`` px."""
    # milder skin texture keeps the black-hat hair detector quiet on hairless pairs
    t0, mask = lesion_image(side, rng, texture=3.0)
    t1 = t0.astype(np.float64) + rng.normal(0, 3, t0.shape)
    if changed:
        ys, xs = np.nonzero(mask)
        k = rng.integers(len(ys))
        cy, cx = ys[k], xs[k]
        yy, xx = np.mgrid[0:side, 0:side]
        disk = (xx - cx) ** 2 + (yy - cy) ** 2 <= disk_radius**2
        t1[disk] = t1[disk] * 0.35
    t1 = np.clip(t1, 0, 255).astype(np.uint8)
    if jitter:
        t1 = euclidean_warp(t1, rng.uniform(-jitter, jitter), tuple(rng.uniform(-jitter, jitter, 2)))
    return t0, t1


def class_images(n: int, side: int, rng: np.random.Generator, n_classes: int = 2):
    """Lesion images whose class sets the pigment colour; returns (uint8 stack, labels)."""
    palette = [(170, 40, 30), (20, 90, 150), (60, 140, 50), (90, 90, 90)]
    labels = np.arange(n) % n_classes
    rng.shuffle(labels)
    # fixed radius so pigment, not lesion size, is what separates the classes
    imgs = [lesion_image(side, rng, color=palette[c % len(palette)], radius=0.3 * side)[0] for c in labels]
    return np.stack(imgs), labels


def to_float_chw(images_uint8: np.ndarray) -> np.ndarray:
    arr = np.asarray(images_uint8, dtype=np.float32) / 255.0
    return np.ascontiguousarray(np.moveaxis(arr, -1, -3))
