"""Two-stage inference: joint-center localization on a coarse resample,
then landmark regression on a fine-spacing crop around that center.

Stage geometry. The whole (single-knee) image is resampled to
roi_spacing_mm and squashed to the center model's square input; its one
predicted point, mapped back to the source frame, becomes the crop center.
The landmark stage resamples the source to crop_spacing_mm, extracts a
crop_mm x crop_mm region, resizes it to the landmark model's input, and
regresses the 16 points. With passes=2 the landmark stage runs twice, the
second crop re-centered on the first pass's middle tibial landmark
(index 4), which corrects a sloppy stage-one center.

Left knees are mirrored into right-knee orientation before every model
call; predictions are mirrored back and the landmark index remap (an
involution) is re-applied, so results always follow the source image's
left-to-right numbering.
"""

from dataclasses import dataclass

import numpy as np

from .imaging import (
    BILATERAL_HALF_SIDES,
    Frame,
    Image,
    LandmarkSet,
    Side,
    crop_roi,
    flip_index_permutation,
    resample,
    resize_pixels,
    resize_to,
    scale_points,
    split_bilateral,
)
from .nn.model import HourglassModel, forward
from .nn.tensor import no_grad

RECENTER_INDEX = 4


@dataclass(frozen=True)
class PipelineConfig:
    roi_spacing_mm: float = 1.0
    crop_spacing_mm: float = 0.3
    crop_mm: float = 140.0
    passes: int = 2

    def __post_init__(self):
        if not (self.roi_spacing_mm > 0 and self.crop_spacing_mm > 0 and self.crop_mm > 0):
            raise ValueError("spacings and crop size must be positive")
        if self.passes not in (1, 2):
            raise ValueError(f"passes must be 1 or 2, got {self.passes}")


@dataclass
class KneeResult:
    """Inference output for one knee, in the source image's pixel frame."""

    landmarks: LandmarkSet
    center_px: tuple[float, float]
    refined_center_px: tuple[float, float] | None
    side: Side
    passes: int
    center_from_model: bool


def _predict_coords(model: HourglassModel, pixels: np.ndarray) -> np.ndarray:
    """Eval-mode forward of one (S, S) raster; returns (M, 2) normalized.

    The seam tests use to substitute an oracle predictor when exercising
    the geometry around the network.
    """
    x = pixels.astype(np.float32)[None, None]
    with no_grad():
        out = forward(model, x, train=False)
    return out.data[0].astype(np.float64)


def locate_joint_center(model: HourglassModel, img: Image, side: Side, cfg: PipelineConfig) -> tuple[float, float]:
    """Stage one: predict the joint center, returned in source pixel coords."""
    if model.cfg.landmarks != 1:
        raise ValueError(f"center model must predict a single point, this one predicts {model.cfg.landmarks}")
    res = resample(img, cfg.roi_spacing_mm)
    s = model.cfg.input_side
    px = resize_pixels(res.pixels, s, s)
    if side is Side.LEFT:
        px = px[:, ::-1]
    pred = _predict_coords(model, px)[0] * s
    if side is Side.LEFT:
        pred = np.array([(s - 1) - pred[0], pred[1]])
    pt = scale_points(pred[None, :], s, s, res.width, res.height)
    pt = scale_points(pt, res.width, res.height, img.width, img.height)[0]
    return (float(pt[0]), float(pt[1]))


def localize_landmarks(
    model: HourglassModel,
    img: Image,
    center_px: tuple[float, float],
    side: Side,
    cfg: PipelineConfig,
    passes: int | None = None,
    center_from_model: bool = False,
) -> KneeResult:
    """Stage two: crop around center_px and regress the landmarks."""
    passes = cfg.passes if passes is None else passes
    if passes not in (1, 2):
        raise ValueError(f"passes must be 1 or 2, got {passes}")
    if passes == 2 and model.cfg.landmarks <= RECENTER_INDEX:
        raise ValueError(
            f"re-centering needs landmark {RECENTER_INDEX}, model predicts only {model.cfg.landmarks}"
        )
    res = resample(img, cfg.crop_spacing_mm)
    c_res = scale_points(
        np.array([center_px], dtype=np.float64), img.width, img.height, res.width, res.height
    )[0]
    perm = flip_index_permutation(model.cfg.landmarks) if side is Side.LEFT else None
    refined_res = None
    pts_res = None
    for p in range(passes):
        crop, tf = crop_roi(res, (c_res[0] * res.spacing, c_res[1] * res.spacing), cfg.crop_mm)
        tf = tf.with_resize(model.cfg.input_side)
        inp = resize_to(crop, model.cfg.input_side)
        px = inp.pixels
        if side is Side.LEFT:
            tf = tf.with_flip()
            px = np.ascontiguousarray(px[:, ::-1])
        pred = _predict_coords(model, px) * model.cfg.input_side
        pts_res = tf.to_source(pred)
        if perm is not None:
            pts_res = pts_res[perm]
        if p + 1 < passes:
            c_res = pts_res[RECENTER_INDEX].copy()
            refined_res = c_res
    pts_src = scale_points(pts_res, res.width, res.height, img.width, img.height)
    refined = None
    if refined_res is not None:
        refined_pt = scale_points(refined_res[None, :], res.width, res.height, img.width, img.height)[0]
        refined = (float(refined_pt[0]), float(refined_pt[1]))
    return KneeResult(
        landmarks=LandmarkSet(pts_src, frame=Frame.PIXEL, image_id=img.id),
        center_px=(float(center_px[0]), float(center_px[1])),
        refined_center_px=refined,
        side=side,
        passes=passes,
        center_from_model=center_from_model,
    )


def infer_knee(
    roi_model: HourglassModel | None,
    lm_model: HourglassModel,
    img: Image,
    side: Side,
    cfg: PipelineConfig,
    center_px: tuple[float, float] | None = None,
    passes: int | None = None,
) -> KneeResult:
    """Full chain on a single-knee image; center_px (source pixel frame)
    bypasses the center model when given."""
    from_model = center_px is None
    if center_px is None:
        if roi_model is None:
            raise ValueError("either a center model or an explicit center is required")
        center_px = locate_joint_center(roi_model, img, side, cfg)
    return localize_landmarks(lm_model, img, center_px, side, cfg, passes, center_from_model=from_model)


def infer_bilateral(
    roi_model: HourglassModel | None,
    lm_model: HourglassModel,
    img: Image,
    cfg: PipelineConfig,
    centers: dict[Side, tuple[float, float]] | None = None,
    passes: int | None = None,
) -> dict[Side, KneeResult]:
    """Run both knees of a two-knee composite.

    The image is split at its vertical midline; the left half holds the
    patient's right knee. Results (and any given centers) are in the full
    composite's pixel frame.
    """
    left_half, right_half = split_bilateral(img)
    offsets = {"left": 0.0, "right": float(img.width // 2)}
    halves = {"left": left_half, "right": right_half}
    out: dict[Side, KneeResult] = {}
    for half_name, half in halves.items():
        side = BILATERAL_HALF_SIDES[half_name]
        dx = offsets[half_name]
        center = None
        if centers is not None and side in centers:
            full_c = centers[side]
            center = (full_c[0] - dx, full_c[1])
        result = infer_knee(roi_model, lm_model, half, side, cfg, center_px=center, passes=passes)
        pts = np.array(result.landmarks.points, copy=True)
        pts[:, 0] += dx
        out[side] = KneeResult(
            landmarks=LandmarkSet(pts, frame=Frame.PIXEL, image_id=img.id),
            center_px=(result.center_px[0] + dx, result.center_px[1]),
            refined_center_px=(
                None if result.refined_center_px is None
                else (result.refined_center_px[0] + dx, result.refined_center_px[1])
            ),
            side=side,
            passes=result.passes,
            center_from_model=result.center_from_model,
        )
    return out
