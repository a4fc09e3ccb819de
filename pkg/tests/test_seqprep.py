import math

import cv2
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dermfoundry.core import ValidationError
from dermfoundry.seqprep import (
    STAGES,
    EuclideanTransform2D,
    PreprocessReport,
    focus_lesion,
    parse_stages,
    preprocess_pair,
    register_pair,
    remove_dark_corner,
    remove_hair,
    warp_image,
)
from dermfoundry.synth import add_dark_corners, draw_hairs, skin_background, textured_image

from _helpers import known_motion, warp_error

angles = st.floats(-math.pi, math.pi, allow_nan=False)
shifts = st.floats(-100, 100, allow_nan=False)


# -- transforms ---------------------------------------------------------------


@settings(max_examples=100, deadline=None)
@given(angles, shifts, shifts)
def test_compose_with_inverse_is_identity(a, dx, dy):
    T = EuclideanTransform2D(a, (dx, dy))
    for I in (T.compose(T.inverse()), T.inverse().compose(T)):
        assert np.allclose(I.matrix, np.eye(3), atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.floats(-20, 20, allow_nan=False))
def test_rotation_range(a):
    r = EuclideanTransform2D(a).rotation
    assert -math.pi < r <= math.pi
    assert EuclideanTransform2D(-math.pi).rotation == math.pi


def test_matrix_round_trip():
    T = EuclideanTransform2D(0.3, (4.0, -2.5))
    U = EuclideanTransform2D.from_matrix(T.matrix)
    assert U.rotation == pytest.approx(0.3) and U.translation == pytest.approx((4.0, -2.5))
    assert np.allclose(T.apply([[1.0, 0.0]]), [[4.0 + math.cos(0.3), -2.5 + math.sin(0.3)]])


def test_warp_then_inverse_restores_interior():
    rng = np.random.default_rng(0)
    img = cv2.GaussianBlur(textured_image(128, rng), (0, 0), 1.0).astype(np.float64) / 255
    T = EuclideanTransform2D(math.radians(8), (5.0, -3.0))
    back = warp_image(warp_image(img, T), T.inverse())
    inner = np.s_[24:-24, 24:-24]
    assert np.mean(np.abs(back[inner] - img[inner])) < 2 / 255


# -- dark corners ----------------------------------------------------------------


def test_dark_corner_circle_geometry():
    img = np.zeros((256, 256, 3), np.uint8)
    cv2.circle(img, (128, 128), 100, (200, 180, 170), -1)
    out, info = remove_dark_corner(img)
    assert info.detected
    assert abs(info.fitted_radius - 100) <= 2
    assert abs(info.applied_radius - 80) <= 2
    assert info.circle[2] == info.applied_radius
    assert not np.array_equal(out, img)


def test_dark_corner_noop_cases():
    bright = np.full((64, 64, 3), 200, np.uint8)
    out, info = remove_dark_corner(bright)
    assert not info.detected and np.array_equal(out, bright)
    black = np.zeros((64, 64, 3), np.uint8)
    out, info = remove_dark_corner(black)
    assert not info.detected and info.circle is None and np.array_equal(out, black)


def test_dark_corner_rejects_bad_input():
    with pytest.raises(ValidationError):
        remove_dark_corner(np.zeros((8, 8), np.uint8))


# -- hair ----------------------------------------------------------------------


def test_hair_detection_and_inpainting():
    rng = np.random.default_rng(0)
    base = skin_background(128, rng, texture=3.0)
    base = np.clip(base, 0, 255).astype(np.uint8)
    hairy, hair = draw_hairs(base, rng, n=3, thickness=2)
    out, frac, mask = remove_hair(hairy)
    assert (mask & hair).sum() / hair.sum() >= 0.9
    assert frac == pytest.approx(mask.mean())
    gray_in = cv2.cvtColor(hairy, cv2.COLOR_RGB2GRAY).astype(np.float64)
    gray_out = cv2.cvtColor(out, cv2.COLOR_RGB2GRAY).astype(np.float64)
    ys, xs = np.nonzero(hair)
    for y, x in zip(ys, xs):
        win = np.s_[max(0, y - 6) : y + 7, max(0, x - 6) : x + 7]
        around = gray_in[win][~mask[win]]
        assert abs(gray_out[y, x] - np.median(around)) <= 15


def test_hair_idempotent_and_hairless_noop():
    rng = np.random.default_rng(1)
    base = np.clip(skin_background(128, rng, texture=3.0), 0, 255).astype(np.uint8)
    hairy, _ = draw_hairs(base, rng)
    once, _, _ = remove_hair(hairy)
    twice, _, _ = remove_hair(once)
    assert np.any(once != twice, axis=-1).mean() < 0.001
    flat = np.full((64, 64, 3), (190, 150, 130), np.uint8)
    out, frac, _ = remove_hair(flat)
    assert frac == 0.0 and np.array_equal(out, flat)


# -- registration --------------------------------------------------------------


def test_register_identity():
    img = textured_image(192, np.random.default_rng(2))
    reg = register_pair(img, img)
    assert not reg.failed
    assert abs(reg.transform.rotation) <= 0.005
    assert max(map(abs, reg.transform.translation)) <= 0.5
    assert reg.inliers <= reg.matches


@pytest.mark.parametrize("angle,shift", [(0.0, (7.0, -4.0)), (10.0, (0.0, 0.0))])
def test_registerknown_motion(angle, shift):
    img = textured_image(192, np.random.default_rng(3))
    moving, M = known_motion(img, angle, shift)
    reg = register_pair(img, moving)
    d, a = warp_error(reg, M, 192)
    assert d <= 0.5 and a <= 0.5
    if angle == 0:
        assert reg.transform.translation == pytest.approx(shift, abs=0.5)


def test_register_failure_is_flagged_not_raised():
    flat = np.full((64, 64, 3), 128, np.uint8)
    reg = register_pair(flat, flat)
    assert reg.failed and reg.inliers < 3
    assert reg.transform == EuclideanTransform2D.identity()
    with pytest.raises(ValidationError):
        register_pair(flat, flat[:32])


# -- focusing ------------------------------------------------------------------


def test_focus_identity_empty_and_half_plane():
    rng = np.random.default_rng(4)
    img = rng.integers(0, 256, (40, 40, 3), dtype=np.uint8)
    out, flag = focus_lesion(img, np.ones((40, 40), bool))
    assert np.array_equal(out, img) and not flag
    out, flag = focus_lesion(img, np.zeros((40, 40), bool))
    assert np.array_equal(out, img) and flag
    half = np.zeros((40, 40), bool)
    half[:, :10] = True
    out, _ = focus_lesion(img, half, dilation=8)
    exterior = np.zeros((40, 40), bool)
    exterior[:, 18:] = True  # last mask column 9, dilated by 8
    median = np.rint(np.median(img[exterior], axis=0)).astype(np.uint8)
    assert np.all(out[exterior] == median)
    assert np.array_equal(out[half], img[half])


# -- pipeline ------------------------------------------------------------------


def test_parse_stages_fixed_order():
    assert parse_stages("mask,warp,corner") == ("corner", "warp", "mask")
    assert parse_stages(None) == STAGES
    assert parse_stages("none") == ()
    with pytest.raises(ValidationError):
        parse_stages("corner,blur")


def test_pipeline_identical_pair():
    img = textured_image(192, np.random.default_rng(5))
    a, b, rep = preprocess_pair(img, img)
    assert abs(rep.transform.rotation) <= 0.005
    assert max(map(abs, rep.transform.translation)) <= 0.5
    assert np.mean(np.abs(a.astype(int) - b.astype(int))) < 1.0
    assert len(rep.row()) == len(PreprocessReport.COLUMNS)


def test_pipeline_known_shift():
    img = textured_image(192, np.random.default_rng(6))
    moving, _ = known_motion(img, 0.0, (6.0, 3.0))
    _, _, rep = preprocess_pair(img, moving)
    assert not rep.registration_failed
    assert rep.transform.translation == pytest.approx((6.0, 3.0), abs=0.5)


def test_pipeline_corner_only_in_second_image():
    img = textured_image(192, np.random.default_rng(7))
    _, _, rep = preprocess_pair(img, add_dark_corners(img), stages="corner")
    assert rep.dark_corner_detected == (False, True)
    assert rep.corner_circle[0] is None and rep.corner_circle[1][2] > 0


def test_pipeline_no_stages_passthrough():
    img = textured_image(64, np.random.default_rng(8))
    a, b, rep = preprocess_pair(img, img, stages="none")
    assert np.array_equal(a, img) and np.array_equal(b, img) and rep.raw_input
