"""Two-stage inference geometry, exercised through the predictor seam.

Most tests monkeypatch kneemark.pipeline._predict_coords with a
deterministic stand-in, so crop/resize/flip bookkeeping is checked exactly,
independent of any network weights.
"""

import numpy as np
import pytest

import kneemark.pipeline as pipeline
from kneemark.imaging import (
    BILATERAL_HALF_SIDES,
    Image,
    Side,
    crop_roi,
    flip_index_permutation,
    resize_to,
    split_bilateral,
)
from kneemark.nn.model import ModelConfig, build_model
from kneemark.pipeline import (
    RECENTER_INDEX,
    PipelineConfig,
    infer_bilateral,
    infer_knee,
    localize_landmarks,
    locate_joint_center,
)

CFG1 = PipelineConfig(roi_spacing_mm=1.0, crop_spacing_mm=0.3, crop_mm=19.2, passes=1)
CFG2 = PipelineConfig(roi_spacing_mm=1.0, crop_spacing_mm=0.3, crop_mm=19.2, passes=2)


@pytest.fixture(scope="module")
def lm16():
    return build_model(ModelConfig(width=4, depth=1, landmarks=16, input_side=16, dropout=0.0), seed=3)


@pytest.fixture(scope="module")
def roi1():
    return build_model(ModelConfig(width=4, depth=1, landmarks=1, input_side=16, dropout=0.0), seed=4)


def _source(rng, w=96, h=96, spacing=0.3):
    return Image(rng.uniform(0.0, 1.0, (h, w)), spacing=spacing, id="src")


GRID16 = np.stack(
    [(np.arange(16) % 4) / 4.0 + 0.1, (np.arange(16) // 4) / 4.0 + 0.05], axis=1
)


def test_localize_right_inverts_known_targets(monkeypatch, rng):
    img = _source(rng)
    center = (40.3, 30.7)
    targets = rng.uniform(20.0, 70.0, (16, 2))
    # source spacing equals crop spacing, so the resampled frame is the source
    _, tf = crop_roi(img, (center[0] * 0.3, center[1] * 0.3), CFG1.crop_mm)
    tf = tf.with_resize(16)
    fake_out = tf.to_roi(targets) / 16.0
    monkeypatch.setattr(pipeline, "_predict_coords", lambda model, px: fake_out)
    lm = build_model(ModelConfig(width=4, depth=1, landmarks=16, input_side=16, dropout=0.0), seed=3)
    res = localize_landmarks(lm, img, center, Side.RIGHT, CFG1)
    np.testing.assert_allclose(res.landmarks.points, targets, atol=1e-6)
    assert res.center_px == center
    assert res.refined_center_px is None and res.passes == 1
    assert res.landmarks.image_id == "src"


def test_localize_left_inverts_known_targets(monkeypatch, rng, lm16):
    img = _source(rng)
    center = (95.0 - 40.3, 30.7)
    targets = rng.uniform(25.0, 70.0, (16, 2))
    perm = flip_index_permutation(16)
    crop, tf = crop_roi(img, (center[0] * 0.3, center[1] * 0.3), CFG1.crop_mm)
    tf = tf.with_resize(16).with_flip()
    fake_out = tf.to_roi(targets[perm]) / 16.0
    seen = []

    def fake(model, px):
        seen.append(px.copy())
        return fake_out

    monkeypatch.setattr(pipeline, "_predict_coords", fake)
    res = localize_landmarks(lm16, img, center, Side.LEFT, CFG1)
    np.testing.assert_allclose(res.landmarks.points, targets, atol=1e-6)
    # the network saw the mirrored crop raster
    expected_px = resize_to(crop, 16).pixels[:, ::-1]
    np.testing.assert_array_equal(seen[0], expected_px)


def test_two_passes_equal_manual_recentering(monkeypatch, rng, lm16):
    img = _source(rng)
    monkeypatch.setattr(pipeline, "_predict_coords", lambda model, px: GRID16)
    c0 = (40.3, 30.7)
    two = localize_landmarks(lm16, img, c0, Side.RIGHT, CFG2)
    first = localize_landmarks(lm16, img, c0, Side.RIGHT, CFG1)
    c1 = tuple(first.landmarks.points[RECENTER_INDEX])
    second = localize_landmarks(lm16, img, c1, Side.RIGHT, CFG1)
    np.testing.assert_allclose(two.landmarks.points, second.landmarks.points, atol=1e-9)
    assert two.refined_center_px == pytest.approx(c1, abs=1e-9)
    assert two.passes == 2 and two.center_px == c0
    # the constant predictor still moves the crop, so pass 2 differs
    assert not np.allclose(two.landmarks.points, first.landmarks.points)


def test_left_right_mirror_consistency_real_model(lm16, rng):
    pixels = rng.uniform(0.0, 1.0, (96, 96))
    img_r = Image(pixels, spacing=0.3, id="r")
    img_l = Image(pixels[:, ::-1].copy(), spacing=0.3, id="l")
    center_r = (40.3, 30.7)
    center_l = (95.0 - center_r[0], center_r[1])
    rr = localize_landmarks(lm16, img_r, center_r, Side.RIGHT, CFG1)
    rl = localize_landmarks(lm16, img_l, center_l, Side.LEFT, CFG1)
    mirrored = rr.landmarks.points.copy()
    mirrored[:, 0] = 95.0 - mirrored[:, 0]
    perm = flip_index_permutation(16)
    np.testing.assert_allclose(rl.landmarks.points, mirrored[perm], atol=1e-3)


def test_locate_joint_center_geometry(monkeypatch, rng, roi1):
    img = Image(rng.uniform(0.0, 1.0, (160, 100)), spacing=0.7, id="whole")
    monkeypatch.setattr(pipeline, "_predict_coords", lambda model, px: np.array([[0.3, 0.6]]))
    # resample 100x160 @0.7 -> 70x112 @1.0; model frame is 16x16
    def hop(v, a, b):
        return (v + 0.5) * (b / a) - 0.5

    ex = hop(hop(0.3 * 16, 16, 70), 70, 100)
    ey = hop(hop(0.6 * 16, 16, 112), 112, 160)
    got = locate_joint_center(roi1, img, Side.RIGHT, CFG1)
    assert got == pytest.approx((ex, ey), rel=1e-12)
    exl = hop(hop(15.0 - 0.3 * 16, 16, 70), 70, 100)
    got_l = locate_joint_center(roi1, img, Side.LEFT, CFG1)
    assert got_l == pytest.approx((exl, ey), rel=1e-12)


def test_locate_joint_center_needs_single_point_model(lm16, rng):
    img = _source(rng)
    with pytest.raises(ValueError):
        locate_joint_center(lm16, img, Side.RIGHT, CFG1)


def test_infer_knee_center_bypass_and_roi_stage(monkeypatch, rng, roi1, lm16):
    img = _source(rng)

    def fake(model, px):
        if model.cfg.landmarks == 1:
            return np.array([[0.45, 0.55]])
        return GRID16

    monkeypatch.setattr(pipeline, "_predict_coords", fake)
    given = infer_knee(None, lm16, img, Side.RIGHT, CFG2, center_px=(40.3, 30.7))
    assert given.center_from_model is False
    assert given.center_px == (40.3, 30.7)
    auto = infer_knee(roi1, lm16, img, Side.RIGHT, CFG2)
    assert auto.center_from_model is True
    assert auto.center_px == locate_joint_center(roi1, img, Side.RIGHT, CFG2)
    with pytest.raises(ValueError):
        infer_knee(None, lm16, img, Side.RIGHT, CFG2)


def test_infer_bilateral_offsets_match_manual_halves(monkeypatch, rng, lm16):
    composite = Image(rng.uniform(0.0, 1.0, (96, 192)), spacing=0.3, id="bi")
    monkeypatch.setattr(pipeline, "_predict_coords", lambda model, px: GRID16)
    centers = {Side.RIGHT: (40.3, 30.7), Side.LEFT: (136.3, 30.7)}
    out = infer_bilateral(None, lm16, composite, CFG2, centers=centers)
    assert set(out) == {Side.RIGHT, Side.LEFT}
    left_half, right_half = split_bilateral(composite)
    manual_r = infer_knee(None, lm16, left_half, Side.RIGHT, CFG2, center_px=(40.3, 30.7))
    manual_l = infer_knee(None, lm16, right_half, Side.LEFT, CFG2, center_px=(136.3 - 96.0, 30.7))
    np.testing.assert_array_equal(out[Side.RIGHT].landmarks.points, manual_r.landmarks.points)
    expected_l = np.array(manual_l.landmarks.points, copy=True)
    expected_l[:, 0] += 96.0
    np.testing.assert_array_equal(out[Side.LEFT].landmarks.points, expected_l)
    assert out[Side.RIGHT].center_px == (40.3, 30.7)
    assert out[Side.LEFT].center_px == (136.3, 30.7)
    assert out[Side.LEFT].refined_center_px[0] == manual_l.refined_center_px[0] + 96.0
    for side, res in out.items():
        assert res.side is side
        assert res.landmarks.image_id == "bi"
    assert BILATERAL_HALF_SIDES["left"] is Side.RIGHT
    assert BILATERAL_HALF_SIDES["right"] is Side.LEFT


def test_pipeline_validation(rng, lm16, roi1):
    img = _source(rng)
    with pytest.raises(ValueError):
        PipelineConfig(passes=3)
    with pytest.raises(ValueError):
        PipelineConfig(crop_mm=-1.0)
    with pytest.raises(ValueError):
        localize_landmarks(lm16, img, (40.0, 40.0), Side.RIGHT, CFG1, passes=5)
    # re-centering needs the middle tibial landmark
    with pytest.raises(ValueError):
        localize_landmarks(roi1, img, (40.0, 40.0), Side.RIGHT, CFG2)


def test_single_pass_on_single_point_model(monkeypatch, rng, roi1):
    img = _source(rng)
    monkeypatch.setattr(pipeline, "_predict_coords", lambda model, px: np.array([[0.5, 0.5]]))
    res = localize_landmarks(roi1, img, (40.3, 30.7), Side.RIGHT, CFG1)
    assert res.landmarks.count == 1 and res.passes == 1
