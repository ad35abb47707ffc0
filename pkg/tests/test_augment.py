import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kdsearch import autograd as ag
from kdsearch.augment import (
    CropRange,
    FeatureMap,
    ShiftedProposal,
    bilinear_crop,
    fsa_shift,
    isa_crop_range,
    isa_expand_and_crop,
    roi_align,
    roi_align_batch,
    sample_grid,
)
from kdsearch.types import FULL_SIZE_AUG, AugConfig, BoundingBox, Rng, iou

from conftest import GRAD_RTOL, check_grads

# --- ISA --------------------------------------------------------------------------


def test_isa_range_examples():
    r = isa_crop_range(BoundingBox(0, 0, 64, 128), FULL_SIZE_AUG)
    assert (r.r_w, r.r_h) == (10.0, 10.0)
    r = isa_crop_range(BoundingBox(0, 0, 64, 2000), FULL_SIZE_AUG)
    assert r.r_h == 40.0
    assert 2 * 2000 * 10 / 256 == 156.25
    r = isa_crop_range(BoundingBox(0, 0, 64, 128), AugConfig(alpha=40, delta_p=0, patch_h=256, patch_w=128))
    assert (r.r_w, r.r_h) == (0.0, 0.0)


@settings(max_examples=200, deadline=None)
@given(
    st.floats(0.5, 3000), st.floats(0.5, 3000), st.floats(0, 50), st.floats(0, 60),
    st.integers(1, 512), st.integers(1, 512),
)
def test_isa_range_formula_and_clamp(w, h, dp, alpha, ph, pw):
    cfg = AugConfig(alpha=alpha, delta_p=dp, patch_h=ph, patch_w=pw)
    r = isa_crop_range(BoundingBox(0, 0, w, h), cfg)
    assert r.r_h == min(2 * h * dp / ph, alpha)
    assert r.r_w == min(2 * w * dp / pw, alpha)
    assert 0 <= r.r_w <= alpha and 0 <= r.r_h <= alpha


def test_isa_zero_range_returns_box():
    box = BoundingBox(10, 10, 20, 40, identity=2)
    cfg = AugConfig(delta_p=0.0)
    assert isa_expand_and_crop(box, cfg, Rng(0), (128, 192)) == box


def test_isa_seeded_and_statistics():
    box = BoundingBox(500, 500, 64, 128)
    cfg = FULL_SIZE_AUG  # r_w = r_h = 10
    a = isa_expand_and_crop(box, cfg, Rng(1), (2000, 2000))
    assert a == isa_expand_and_crop(box, cfg, Rng(1), (2000, 2000))
    rng = Rng(2)
    dx = np.array([isa_expand_and_crop(box, cfg, rng, (2000, 2000)).x - box.x for _ in range(10_000)])
    assert np.abs(dx).max() <= 10
    # |U(-10, 10)| is U(0, 10): mean 5, sd 10/sqrt(12)
    sigma = 10 / np.sqrt(12) / np.sqrt(len(dx))
    assert abs(np.abs(dx).mean() - 5) < 3 * sigma


def test_isa_crop_keeps_size_and_clips_to_image():
    rng = Rng(3)
    box = BoundingBox(0, 0, 20, 40)
    for _ in range(200):
        c = isa_expand_and_crop(box, AugConfig(alpha=8, delta_p=4), rng, (128, 192))
        assert c.x >= 0 and c.y >= 0 and c.x2 <= 192 and c.y2 <= 128
        assert c.w <= 20 and c.h <= 40


def test_isa_box_outside_image_falls_back():
    box = BoundingBox(-5, 0, 20, 40)
    assert isa_expand_and_crop(box, AugConfig(), Rng(0), (128, 192)) == box


# --- FSA --------------------------------------------------------------------------


def test_fsa_range_example():
    cfg = AugConfig(stride=16)
    rng = Rng(4)
    box = BoundingBox(100, 100, 40, 80)
    for _ in range(500):
        p = fsa_shift(box, CropRange(12.0, 0.0), cfg, rng)
        fx, fy = p.feature_shift
        assert abs(fx) <= 0.75 and abs(p.dx) <= 12 and fy == 0.0


def test_fsa_zero_range():
    p = fsa_shift(BoundingBox(0, 0, 8, 8), CropRange(0, 0), AugConfig(), Rng(0))
    assert (p.dx, p.dy) == (0.0, 0.0)


def test_fsa_image_shift_equals_feature_shift_times_stride():
    rng = Rng(5)
    cfg = AugConfig(stride=16)
    for _ in range(100):
        p = fsa_shift(BoundingBox(50, 60, 30, 70), CropRange(9.3, 11.7), cfg, rng)
        fx, fy = p.feature_shift
        assert p.dx / cfg.stride == fx and p.dy / cfg.stride == fy


def test_fsa_student_and_teacher_rectangles_agree():
    rng = Rng(6)
    cfg = AugConfig()
    for _ in range(1000):
        w, h = rng.uniform(8, 30), rng.uniform(20, 60)
        box = BoundingBox(rng.uniform(0, 192 - w), rng.uniform(0, 128 - h), w, h)
        p = fsa_shift(box, isa_crop_range(box, cfg), cfg, rng, (128, 192))
        teacher = p.image_box()
        student = p.feature_window() * cfg.stride
        np.testing.assert_allclose(student, teacher.as_array(), atol=1e-9, rtol=0)
        assert teacher.x >= -1e-9 and teacher.x2 <= 192 + 1e-9


@pytest.mark.parametrize("cfg", [FULL_SIZE_AUG, AugConfig()], ids=["full-size", "desk"])
def test_shifted_boxes_keep_iou(cfg):
    # ranges proportional to the box (2*delta_p/patch per axis) keep the
    # shifted proposal a valid detection of its ground truth
    rng = Rng(7)
    scale = 256 / cfg.patch_h
    for _ in range(500):
        w, h = rng.uniform(8, 40) * scale, rng.uniform(20, 60) * scale
        box = BoundingBox(100 * scale, 100 * scale, w, h)
        p = fsa_shift(box, isa_crop_range(box, cfg), cfg, rng)
        assert iou(box, p.image_box()) >= 0.5


def test_quarter_size_ranges_can_break_iou():
    # a diagonal shift of a quarter of the box on both axes leaves IoU 9/23
    box = BoundingBox(0, 0, 16, 16)
    assert iou(box, box.shifted(4, 4)) == pytest.approx(9 / 23)


# --- RoIAlign -----------------------------------------------------------------------


def _ramp(h, w, a=1.0, b=0.0, c=0.0):
    ys, xs = np.mgrid[0:h, 0:w] + 0.5
    return (a * xs + b * ys + c)[None]


def test_roi_align_constant_field():
    fm = np.full((2, 6, 6), 3.25)
    out = roi_align(fm, np.array([0.7, 1.2, 3.1, 2.5]), 4, 3).data
    np.testing.assert_allclose(out, 3.25, atol=1e-12, rtol=0)


def test_roi_align_ramp_example():
    # f(x, y) = x at cell centers; full-map proposal pooled to 2x2
    fm = _ramp(4, 4)
    out = roi_align(fm, np.array([0.0, 0.0, 4.0, 4.0]), 2, 2).data[0]
    np.testing.assert_allclose(out, [[1.0, 3.0], [1.0, 3.0]], atol=1e-12)


def test_roi_align_exact_on_linear_fields():
    rng = np.random.default_rng(8)
    for _ in range(100):
        a, b, c = rng.normal(size=3)
        fm = _ramp(9, 11, a, b, c)
        # stay within the outermost centers where bilinear is exact
        x, y = rng.uniform(0.5, 5), rng.uniform(0.5, 4)
        w, h = rng.uniform(0.5, 10.5 - x), rng.uniform(0.5, 8.5 - y)
        oh, ow = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        out = roi_align(fm, np.array([x, y, w, h]), oh, ow).data[0]
        ys, xs = sample_grid((x, y, w, h), oh, ow)
        np.testing.assert_allclose(out, a * xs[None] + b * ys[:, None] + c, atol=1e-9, rtol=0)


def test_roi_align_zero_shift_identity():
    rng = np.random.default_rng(9)
    fm = FeatureMap(rng.normal(size=(3, 8, 8)), stride=4)
    box = BoundingBox(4.0, 6.0, 12.0, 20.0)
    a = roi_align(fm, ShiftedProposal(box, 0.0, 0.0, 4)).data
    b = roi_align(fm, box.as_array() / 4).data
    np.testing.assert_array_equal(a, b)


def test_roi_align_partial_and_outside():
    fm = np.ones((1, 4, 4))
    out = roi_align(fm, np.array([-4.0, 0.0, 8.0, 4.0]), 1, 4).data[0, 0]
    # sample x-centers at -3, -1, 1, 3: the first two are outside the map
    np.testing.assert_array_equal(out, [0.0, 0.0, 1.0, 1.0])
    with pytest.raises(ValueError):
        roi_align(fm, np.array([5.0, 0.0, 1.0, 1.0]))
    with pytest.raises(ValueError):
        roi_align(fm, np.array([0.0, 0.0, 0.0, 1.0]))
    with pytest.raises(ValueError):
        roi_align(FeatureMap(fm, 8), ShiftedProposal(BoundingBox(0, 0, 4, 4), stride=4))


@pytest.mark.parametrize("seed", range(5))
def test_roi_align_gradient(seed):
    rng = np.random.default_rng(seed)
    fm = rng.normal(size=(1, 6, 6))
    box = np.array([rng.uniform(-0.5, 2), rng.uniform(-0.5, 2), rng.uniform(1, 4), rng.uniform(1, 4)])
    coef = rng.normal(size=(1, 3, 2))
    assert check_grads(lambda f: (roi_align(f, box, 3, 2) * coef).sum(), fm) < GRAD_RTOL


def test_roi_align_batch_gradient_multi_image():
    rng = np.random.default_rng(10)
    fm = rng.normal(size=(2, 2, 5, 5))
    rois = np.array([[0, 0.3, 0.4, 3.0, 2.2], [1, 1.1, 0.2, 2.5, 4.0], [1, 0.0, 0.0, 5.0, 5.0]])
    coef = rng.normal(size=(3, 2, 4, 2))
    assert check_grads(lambda f: (roi_align_batch(f, rois, 4, 2) * coef).sum(), fm) < GRAD_RTOL


def test_bilinear_crop_matches_roi_align():
    rng = np.random.default_rng(11)
    img = rng.uniform(size=(3, 20, 30))
    box = (3.3, 2.1, 11.7, 14.2)
    a = bilinear_crop(img, box, 7, 5)
    b = roi_align(ag.Tensor(img), np.array(box), 7, 5).data
    np.testing.assert_allclose(a, b, atol=1e-12)
