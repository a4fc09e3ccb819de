"""Sequential dermoscopy preprocessing: dark corners, hair, registration and lesion focusing."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import cv2
import numpy as np
from skimage.measure import ransac
from skimage.transform import EuclideanTransform, warp

from .core import ValidationError

log = logging.getLogger(__name__)

STAGES = ("corner", "hair", "warp", "mask")

# ablation arms for the change detector: arm name -> enabled stages
ARMS: dict[str, tuple[str, ...]] = {
    "default": (),
    "warp": ("warp",),
    "mask": ("mask",),
    "whole": STAGES,
}


def _wrap_angle(a: float) -> float:
    a = math.atan2(math.sin(a), math.cos(a))
    return math.pi if a == -math.pi else a


@dataclass(frozen=True)
class EuclideanTransform2D:
    """x -> R(rotation) x + translation, in (x, y) pixel coordinates."""

    rotation: float = 0.0
    translation: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "rotation", _wrap_angle(float(self.rotation)))
        object.__setattr__(self, "translation", (float(self.translation[0]), float(self.translation[1])))

    @property
    def matrix(self) -> np.ndarray:
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        return np.array([[c, -s, self.translation[0]], [s, c, self.translation[1]], [0.0, 0.0, 1.0]])

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "EuclideanTransform2D":
        m = np.asarray(m, dtype=np.float64)
        return cls(math.atan2(m[1, 0], m[0, 0]), (m[0, 2], m[1, 2]))

    @classmethod
    def identity(cls) -> "EuclideanTransform2D":
        return cls()

    def compose(self, other: "EuclideanTransform2D") -> "EuclideanTransform2D":
        """self after other: x -> self(other(x))."""
        return EuclideanTransform2D.from_matrix(self.matrix @ other.matrix)

    def inverse(self) -> "EuclideanTransform2D":
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        tx, ty = self.translation
        return EuclideanTransform2D(-self.rotation, (-(c * tx + s * ty), s * tx - c * ty))

    def apply(self, points) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return p @ self.matrix[:2, :2].T + self.matrix[:2, 2]

    @property
    def degrees(self) -> float:
        return math.degrees(self.rotation)


def to_gray(image: np.ndarray) -> np.ndarray:
    if image.ndim == 2:
        return image
    return cv2.cvtColor(image, cv2.COLOR_RGB2GRAY)


def _check_rgb(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValidationError(f"expected an HxWx3 image, got shape {image.shape}")
    if image.dtype != np.uint8:
        raise ValidationError(f"expected uint8 pixels, got {image.dtype}")
    return image


# ---------------------------------------------------------------------------
# dark corners


@dataclass(frozen=True)
class CornerInfo:
    detected: bool
    center: tuple[float, float] | None = None
    fitted_radius: float | None = None
    applied_radius: float | None = None
    coverage: float | None = None

    @property
    def circle(self):
        if not self.detected:
            return None
        return (self.center[0], self.center[1], self.applied_radius)


def _circle_coverage(h: int, w: int, cx: float, cy: float, r: float) -> float:
    yy, xx = np.mgrid[0:h, 0:w]
    return float(np.mean((xx - cx) ** 2 + (yy - cy) ** 2 <= r * r))


def remove_dark_corner(
    image: np.ndarray,
    threshold: int = 100,
    shrink: float = 0.8,
    inpaint_radius: int = 10,
    max_coverage: float = 0.98,
) -> tuple[np.ndarray, CornerInfo]:
    """Inpaint everything outside the shrunken enclosing circle of the largest bright contour."""
    image = _check_rgb(image)
    h, w = image.shape[:2]
    _, binary = cv2.threshold(to_gray(image), threshold, 255, cv2.THRESH_BINARY)
    contours, _ = cv2.findContours(binary, cv2.RETR_TREE, cv2.CHAIN_APPROX_SIMPLE)
    if not contours:
        return image.copy(), CornerInfo(False)
    largest = max(contours, key=cv2.contourArea)
    (cx, cy), r = cv2.minEnclosingCircle(largest)
    if r <= 0:
        return image.copy(), CornerInfo(False)
    coverage = _circle_coverage(h, w, cx, cy, r)
    if coverage >= max_coverage:
        return image.copy(), CornerInfo(False, (cx, cy), r, None, coverage)
    applied = r * shrink
    mask = np.full((h, w), 255, dtype=np.uint8)
    cv2.circle(mask, (int(round(cx)), int(round(cy))), int(round(applied)), 0, -1)
    out = cv2.inpaint(image, mask, inpaint_radius, cv2.INPAINT_TELEA)
    return out, CornerInfo(True, (float(cx), float(cy)), float(r), float(applied), coverage)


# ---------------------------------------------------------------------------
# hair


def hair_mask(image: np.ndarray, kernel: int = 17, threshold: int = 10) -> np.ndarray:
    se = cv2.getStructuringElement(cv2.MORPH_RECT, (kernel, kernel))
    blackhat = cv2.morphologyEx(to_gray(image), cv2.MORPH_BLACKHAT, se)
    return blackhat > threshold


def remove_hair(
    image: np.ndarray, kernel: int = 17, threshold: int = 10, inpaint_radius: int = 3
) -> tuple[np.ndarray, float, np.ndarray]:
    """Black-hat hair detection + Telea inpainting; returns (image, hair fraction, mask)."""
    image = _check_rgb(image)
    mask = hair_mask(image, kernel, threshold)
    if not mask.any():
        return image.copy(), 0.0, mask
    out = cv2.inpaint(image, mask.astype(np.uint8) * 255, inpaint_radius, cv2.INPAINT_TELEA)
    return out, float(mask.mean()), mask


# ---------------------------------------------------------------------------
# registration


def akaze_detector(threshold: float = 9e-5, octaves: int = 4):
    params = dict(descriptor_size=0, threshold=threshold, nOctaves=octaves)
    if hasattr(cv2, "AKAZE_create"):
        return cv2.AKAZE_create(**params)
    return cv2.xfeatures2d.AKAZE_create(**params)


@dataclass(frozen=True)
class Registration:
    warped: np.ndarray
    transform: EuclideanTransform2D  # fixed coordinates -> moving coordinates
    inliers: int
    matches: int
    failed: bool


def warp_image(image: np.ndarray, transform: EuclideanTransform2D) -> np.ndarray:
    """Resample so that out(p) = image(transform(p)); reflective padding, bilinear."""
    out = warp(
        image,
        EuclideanTransform(matrix=transform.matrix),
        mode="reflect",
        order=1,
        preserve_range=True,
    )
    if image.dtype == np.uint8:
        return np.clip(np.rint(out), 0, 255).astype(np.uint8)
    return out.astype(image.dtype)


def match_keypoints(fixed: np.ndarray, moving: np.ndarray, akaze_threshold: float = 9e-5, akaze_octaves: int = 4):
    det = akaze_detector(akaze_threshold, akaze_octaves)
    kf, df = det.detectAndCompute(to_gray(fixed), None)
    km, dm = det.detectAndCompute(to_gray(moving), None)
    if df is None or dm is None or len(kf) == 0 or len(km) == 0:
        return np.zeros((0, 2)), np.zeros((0, 2))
    matcher = cv2.BFMatcher(cv2.NORM_HAMMING, crossCheck=True)
    matches = sorted(matcher.match(df, dm), key=lambda m: (m.distance, m.queryIdx, m.trainIdx))
    src = np.array([kf[m.queryIdx].pt for m in matches], dtype=np.float64).reshape(-1, 2)
    dst = np.array([km[m.trainIdx].pt for m in matches], dtype=np.float64).reshape(-1, 2)
    return src, dst


def register_pair(
    fixed: np.ndarray,
    moving: np.ndarray,
    residual_threshold: float = 3.0,
    max_trials: int = 2000,
    min_inliers: int = 3,
    seed: int = 0,
    akaze_threshold: float = 9e-5,
    akaze_octaves: int = 4,
) -> Registration:
    """Estimate the rigid motion between two images and warp ``moving`` onto ``fixed``."""
    fixed, moving = _check_rgb(fixed), _check_rgb(moving)
    if fixed.shape != moving.shape:
        raise ValidationError(f"image sizes differ: {fixed.shape} vs {moving.shape}")
    src, dst = match_keypoints(fixed, moving, akaze_threshold, akaze_octaves)
    n = len(src)
    if n >= 2:
        # a fit with no inliers is reported below as a failed registration
        with warnings.catch_warnings():
            warnings.filterwarnings("ignore", message="No inliers found")
            model, inl = ransac(
                (src, dst),
                EuclideanTransform,
                min_samples=2,
                residual_threshold=residual_threshold,
                max_trials=max_trials,
                rng=seed,
            )
        n_in = int(inl.sum()) if inl is not None else 0
    else:
        model, n_in = None, 0
    if model is None or n_in < min_inliers:
        log.warning("registration failed: %d matches, %d inliers", n, n_in)
        return Registration(moving.copy(), EuclideanTransform2D.identity(), n_in, n, True)
    T = EuclideanTransform2D.from_matrix(model.params)
    return Registration(warp_image(moving, T), T, n_in, n, False)


# ---------------------------------------------------------------------------
# lesion focusing


def otsu_lesion_mask(image: np.ndarray) -> np.ndarray:
    """Fallback lesion mask: the darker Otsu class, largest connected component."""
    gray = cv2.GaussianBlur(to_gray(image), (5, 5), 0)
    _, dark = cv2.threshold(gray, 0, 1, cv2.THRESH_BINARY_INV + cv2.THRESH_OTSU)
    n, lab, stats, _ = cv2.connectedComponentsWithStats(dark.astype(np.uint8))
    if n <= 1:
        return np.zeros(gray.shape, dtype=bool)
    k = 1 + int(np.argmax(stats[1:, cv2.CC_STAT_AREA]))
    return lab == k


def focus_lesion(image: np.ndarray, mask: np.ndarray, dilation: int = 8) -> tuple[np.ndarray, bool]:
    """Paint pixels outside the dilated mask with the median exterior colour.

    Returns (image, empty_mask_flag); an empty mask passes the image through.
    """
    image = _check_rgb(image)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != image.shape[:2]:
        raise ValidationError(f"mask shape {mask.shape} does not match image {image.shape[:2]}")
    if not mask.any():
        log.warning("empty lesion mask; focusing skipped")
        return image.copy(), True
    se = cv2.getStructuringElement(cv2.MORPH_ELLIPSE, (2 * dilation + 1, 2 * dilation + 1))
    keep = cv2.dilate(mask.astype(np.uint8), se) > 0
    exterior = ~keep
    out = image.copy()
    if exterior.any():
        median = np.rint(np.median(image[exterior], axis=0)).astype(np.uint8)
        out[exterior] = median
    return out, False


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class PreprocessReport:
    stages: tuple[str, ...]
    dark_corner_detected: tuple[bool, bool] = (False, False)
    corner_circle: tuple[tuple[float, float, float] | None, tuple[float, float, float] | None] = (None, None)
    hair_pixel_fraction: tuple[float, float] = (0.0, 0.0)
    transform: EuclideanTransform2D = field(default_factory=EuclideanTransform2D.identity)
    inlier_count: int = 0
    matched_count: int = 0
    registration_failed: bool = False
    empty_mask: tuple[bool, bool] = (False, False)
    raw_input: bool = False

    COLUMNS = (
        "stages",
        "dark_corner_t0",
        "dark_corner_t1",
        "corner_circle_t0",
        "corner_circle_t1",
        "hair_fraction_t0",
        "hair_fraction_t1",
        "rotation_rad",
        "dx",
        "dy",
        "inlier_count",
        "matched_count",
        "registration_failed",
    )

    def row(self) -> list:
        def circ(c):
            return "" if c is None else ";".join(repr(float(v)) for v in c)

        return [
            "+".join(self.stages) or "none",
            int(self.dark_corner_detected[0]),
            int(self.dark_corner_detected[1]),
            circ(self.corner_circle[0]),
            circ(self.corner_circle[1]),
            self.hair_pixel_fraction[0],
            self.hair_pixel_fraction[1],
            self.transform.rotation,
            self.transform.translation[0],
            self.transform.translation[1],
            self.inlier_count,
            self.matched_count,
            int(self.registration_failed),
        ]


_PARAM_MAP = {
    "corner_threshold": ("corner", "threshold"),
    "corner_scale": ("corner", "shrink"),
    "corner_inpaint_radius": ("corner", "inpaint_radius"),
    "corner_bailout_coverage": ("corner", "max_coverage"),
    "hair_kernel": ("hair", "kernel"),
    "hair_threshold": ("hair", "threshold"),
    "hair_inpaint_radius": ("hair", "inpaint_radius"),
    "akaze_threshold": ("warp", "akaze_threshold"),
    "akaze_octaves": ("warp", "akaze_octaves"),
    "ransac_residual_threshold": ("warp", "residual_threshold"),
    "ransac_max_trials": ("warp", "max_trials"),
    "mask_dilation": ("mask", "dilation"),
}


def _stage_kwargs(params: Mapping[str, Any]) -> dict[str, dict[str, Any]]:
    out: dict[str, dict[str, Any]] = {s: {} for s in STAGES}
    for key, value in params.items():
        if key in _PARAM_MAP:
            stage, arg = _PARAM_MAP[key]
            out[stage][arg] = value
    return out


def parse_stages(spec: str | Sequence[str] | None) -> tuple[str, ...]:
    if spec is None:
        return STAGES
    items = [s.strip() for s in spec.split(",")] if isinstance(spec, str) else list(spec)
    items = [s for s in items if s and s != "none"]
    unknown = [s for s in items if s not in STAGES]
    if unknown:
        raise ValidationError(f"unknown preprocessing stage(s) {unknown}; choose from {list(STAGES)}")
    # pipeline order is fixed regardless of how the stages were listed
    return tuple(s for s in STAGES if s in items)


def preprocess_pair(
    img_t0: np.ndarray,
    img_t1: np.ndarray,
    stages: str | Sequence[str] | None = None,
    masks: tuple[np.ndarray, np.ndarray] | None = None,
    mask_fn: Callable[[np.ndarray], np.ndarray] | None = None,
    seed: int = 0,
    params: Mapping[str, Any] | None = None,
) -> tuple[np.ndarray, np.ndarray, PreprocessReport]:
    """corner -> hair on both images, register t1 onto t0, then focus both on the lesion.

    ``params`` takes the seqprep config keys (thresholds, radii, RANSAC and
    AKAZE settings); missing keys keep the function defaults.
    """
    stages = parse_stages(stages)
    kw = _stage_kwargs(params or {})
    a, b = _check_rgb(img_t0).copy(), _check_rgb(img_t1).copy()
    if a.shape != b.shape:
        raise ValidationError(f"pair sizes differ: {a.shape} vs {b.shape}")
    rep = PreprocessReport(stages, raw_input=not stages)
    if "corner" in stages:
        a, ca = remove_dark_corner(a, **kw["corner"])
        b, cb = remove_dark_corner(b, **kw["corner"])
        rep.dark_corner_detected = (ca.detected, cb.detected)
        rep.corner_circle = (ca.circle, cb.circle)
    if "hair" in stages:
        a, ha, _ = remove_hair(a, **kw["hair"])
        b, hb, _ = remove_hair(b, **kw["hair"])
        rep.hair_pixel_fraction = (ha, hb)
    if "warp" in stages:
        reg = register_pair(a, b, seed=seed, **kw["warp"])
        b = reg.warped
        rep.transform = reg.transform
        rep.inlier_count = reg.inliers
        rep.matched_count = reg.matches
        rep.registration_failed = reg.failed
    if "mask" in stages:
        if masks is not None:
            ma, mb = masks
        else:
            fn = mask_fn or otsu_lesion_mask
            ma, mb = fn(a), fn(b)
        a, ea = focus_lesion(a, ma, **kw["mask"])
        b, eb = focus_lesion(b, mb, **kw["mask"])
        rep.empty_mask = (ea, eb)
    return a, b, rep
