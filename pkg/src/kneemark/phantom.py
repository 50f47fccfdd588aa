"""Synthetic knee radiograph generator.

Produces deterministic single-knee (or two-knee composite) images with
ground-truth landmarks for tests and end-to-end rehearsal of the tooling.
Each knee shows two opposed bone contours separated by a joint gap: the
lower (tibial) contour carries landmarks 0-8 left to right, the upper
(femoral) contour landmarks 9-15. Higher severity grades narrow the gap and
add contour wobble. A left knee is, by construction, the exact mirror of a
right-knee draw, so flip consistency has a closed-form oracle.

All randomness is drawn from numpy streams keyed as [seed, patient, knee],
so a corpus is a pure function of its spec.
"""

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .imaging import (
    KNEE_LANDMARK_COUNT,
    AnnotationRecord,
    Frame,
    Image,
    LandmarkSet,
    Side,
    flip_horizontal,
    write_annotations,
    write_png,
)

N_TIBIAL = 9
N_FEMORAL = 7


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry and noise knobs for one corpus.

    side_px/spacing_mm set the canvas; the default 96 px at 0.3 mm keeps
    the whole knee inside a 19.2 mm (64 px) crop around landmark 4 with a
    few pixels of margin. center_jitter_px blurs the cheap center label
    relative to landmark 4, as a human click would.
    """

    side_px: int = 96
    spacing_mm: float = 0.3
    span_frac: float = 0.5
    gap_px: float = 8.0
    gap_kl_px: float = 1.2
    wobble_kl_px: float = 0.35
    center_jitter_px: float = 1.5
    noise: float = 0.01
    blur_sigma: float = 0.6
    seed: int = 0

    def __post_init__(self):
        if self.side_px < 32:
            raise ValueError(f"side_px must be >= 32, got {self.side_px}")
        if not (self.spacing_mm > 0 and self.span_frac > 0 and self.gap_px > 0):
            raise ValueError("spacing_mm, span_frac, and gap_px must be positive")
        if self.span_frac > 0.9:
            raise ValueError("span_frac > 0.9 pushes landmarks off the canvas")


def knee_rng(spec: PhantomSpec, patient: int, knee: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed, patient, knee])


def _build_right_knee(spec: PhantomSpec, kl: int, rng: np.random.Generator):
    """Render a right-knee canvas and its 16 landmarks (pixel frame)."""
    s = spec.side_px
    # shape parameters; draw order is part of the determinism contract
    dx = rng.uniform(-0.03, 0.03) * s
    dy = rng.uniform(-0.03, 0.03) * s
    span = spec.span_frac * s * (1.0 + rng.uniform(-0.05, 0.05))
    tilt = rng.uniform(-0.05, 0.05)
    c_tib = rng.uniform(1.0, 2.0)
    c_fem = rng.uniform(3.0, 5.0)
    freq_t = rng.uniform(1.5, 3.0)
    freq_f = rng.uniform(1.5, 3.0)
    phase_t = rng.uniform(0.0, 2.0 * math.pi)
    phase_f = rng.uniform(0.0, 2.0 * math.pi)
    brightness = rng.uniform(0.9, 1.1)

    x_c = (s - 1) / 2.0 + dx
    y_mid = (s - 1) / 2.0 + dy
    gap = max(spec.gap_px - spec.gap_kl_px * kl, 1.5)
    wob = spec.wobble_kl_px * kl

    xs = np.arange(s, dtype=np.float64)
    u = (xs - x_c) / (span / 2.0)
    y_tib = y_mid + gap / 2.0 + c_tib * u ** 2 + tilt * (xs - x_c) + wob * np.sin(freq_t * math.pi * u + phase_t)
    y_fem = y_mid - gap / 2.0 - c_fem * u ** 2 + tilt * (xs - x_c) + wob * np.sin(freq_f * math.pi * u + phase_f)

    ys = np.arange(s, dtype=np.float64)[:, None]
    in_tib = np.abs(u) <= 1.05
    in_fem = np.abs(u) <= 0.95
    canvas = 0.12 + 0.03 * (ys / s) * np.ones((s, s))
    canvas[(ys >= y_tib[None, :]) & in_tib[None, :]] = 0.50
    canvas[(ys <= y_fem[None, :]) & in_fem[None, :]] = 0.45
    canvas[(np.abs(ys - y_tib[None, :]) <= 1.2) & in_tib[None, :]] = 0.85
    canvas[(np.abs(ys - y_fem[None, :]) <= 1.2) & in_fem[None, :]] = 0.78

    canvas = canvas * brightness + rng.normal(0.0, spec.noise, size=(s, s))
    canvas = ndimage.gaussian_filter(canvas, sigma=spec.blur_sigma, mode="nearest")
    canvas = np.clip(canvas, 0.0, 1.0)

    def on_curve(frac: float, curve_y, width: float) -> tuple[float, float]:
        x = x_c + (frac - 0.5) * width
        uu = (x - x_c) / (span / 2.0)
        if curve_y is y_tib:
            y = y_mid + gap / 2.0 + c_tib * uu ** 2 + tilt * (x - x_c) + wob * math.sin(freq_t * math.pi * uu + phase_t)
        else:
            y = y_mid - gap / 2.0 - c_fem * uu ** 2 + tilt * (x - x_c) + wob * math.sin(freq_f * math.pi * uu + phase_f)
        return x, y

    pts = []
    for i in range(N_TIBIAL):
        pts.append(on_curve(i / (N_TIBIAL - 1), y_tib, span))
    for j in range(N_FEMORAL):
        pts.append(on_curve(j / (N_FEMORAL - 1), y_fem, span * 0.9))
    points = np.array(pts, dtype=np.float64)
    assert points.shape == (KNEE_LANDMARK_COUNT, 2)
    return canvas, points


def make_knee(spec: PhantomSpec, patient: int, side: Side, kl: int | None = None):
    """One knee image with ground truth.

    Returns (image, landmarks, kl, center): landmarks in the image's pixel
    frame, center the jittered cheap label near landmark 4. The knee index
    inside the rng key is 0 for right, 1 for left.
    """
    if kl is None:
        kl = patient % 5
    if not (0 <= kl <= 4):
        raise ValueError(f"kl grade must be in 0..4, got {kl}")
    knee_idx = 0 if side is Side.RIGHT else 1
    rng = knee_rng(spec, patient, knee_idx)
    canvas, points = _build_right_knee(spec, kl, rng)
    name = f"p{patient:03d}_{side.value}"
    img = Image(canvas, spacing=spec.spacing_mm, id=name)
    lms = LandmarkSet(points, frame=Frame.PIXEL, image_id=name)
    if side is Side.LEFT:
        img, lms = flip_horizontal(img, lms)
    jitter = rng.uniform(-spec.center_jitter_px, spec.center_jitter_px, size=2)
    center = (float(lms.points[4, 0] + jitter[0]), float(lms.points[4, 1] + jitter[1]))
    return img, lms, kl, center


def make_bilateral(spec: PhantomSpec, patient: int, kl: int | None = None):
    """Two-knee composite: the patient's right knee fills the left half.

    Returns (image, parts) where parts maps Side -> (landmarks, center, kl)
    with coordinates in the composite frame.
    """
    right_img, right_lms, kl_r, center_r = make_knee(spec, patient, Side.RIGHT, kl)
    left_img, left_lms, kl_l, center_l = make_knee(spec, patient, Side.LEFT, kl)
    s = spec.side_px
    canvas = np.concatenate([right_img.pixels, left_img.pixels], axis=1)
    name = f"p{patient:03d}_B"
    img = Image(canvas, spacing=spec.spacing_mm, id=name)

    def shifted(lms: LandmarkSet, center, dx: float):
        pts = np.array(lms.points, copy=True)
        pts[:, 0] += dx
        return (
            LandmarkSet(pts, frame=Frame.PIXEL, image_id=name),
            (center[0] + dx, center[1]),
        )

    lms_r, center_r = shifted(right_lms, center_r, 0.0)
    lms_l, center_l = shifted(left_lms, center_l, float(s))
    parts = {Side.RIGHT: (lms_r, center_r, kl_r), Side.LEFT: (lms_l, center_l, kl_l)}
    return img, parts


def write_corpus(root, spec: PhantomSpec, n_patients: int, bilateral: bool = False) -> Path:
    """Write PNGs plus annotations.csv under root; returns the CSV path.

    Single-knee mode emits two images per patient (R and L). Bilateral mode
    emits one composite per patient with two annotation rows referencing it.
    Image paths in the CSV are relative to root.
    """
    if n_patients < 1:
        raise ValueError("need at least one patient")
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for p in range(n_patients):
        pid = f"p{p:03d}"
        if bilateral:
            img, parts = make_bilateral(spec, p)
            rel = f"images/{img.id}.png"
            write_png(img, root / rel, bit_depth=16)
            for side in (Side.RIGHT, Side.LEFT):
                lms, center, kl = parts[side]
                records.append(AnnotationRecord(
                    image=rel, spacing=spec.spacing_mm, patient_id=pid, side=side,
                    kl=kl, landmarks=lms, center=center,
                ))
        else:
            for side in (Side.RIGHT, Side.LEFT):
                img, lms, kl, center = make_knee(spec, p, side)
                rel = f"images/{img.id}.png"
                write_png(img, root / rel, bit_depth=16)
                records.append(AnnotationRecord(
                    image=rel, spacing=spec.spacing_mm, patient_id=pid, side=side,
                    kl=kl, landmarks=lms, center=center,
                ))
    csv_path = root / "annotations.csv"
    write_annotations(records, csv_path)
    return csv_path
