"""Training-time augmentation: random homography warps, photometric noise,
cutout, and target jitter.

Every transform draws from an explicit numpy Generator so the full pipeline
is a pure function of (master seed, epoch, sample index); see sample_rng.
Geometric warps move landmarks through the exact same homography used for
the image (forward projection), so predictions and targets stay consistent.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .imaging import Frame, Image, LandmarkSet, sample_bilinear


class DegenerateTransformError(ValueError):
    """Homography collapsed (zero determinant or a point mapped to infinity)."""


@dataclass(frozen=True)
class AugmentationConfig:
    """Ranges are symmetric (+/- value) unless given as (lo, hi) pairs.

    Defaults are mild; the full-scale geometry ranges are rotation 10 deg,
    translation 5% of the side, scale [0.9, 1.1], shear 5 deg, projective
    1e-4. cutout_frac is the zeroed fraction of image area (0 disables).
    jitter_px adds uniform noise to target coordinates after warping.
    """

    rotation_deg: float = 10.0
    translate_frac: float = 0.05
    scale_range: tuple[float, float] = (0.9, 1.1)
    shear_deg: float = 5.0
    projective: float = 1e-4
    warp_prob: float = 1.0
    gamma_range: tuple[float, float] = (0.5, 2.0)
    gamma_prob: float = 0.5
    sp_frac_max: float = 0.02
    sp_prob: float = 0.2
    median_kernel: int = 3
    median_prob: float = 0.2
    gauss_sigma_range: tuple[float, float] = (0.5, 1.0)
    gauss_prob: float = 0.2
    noise_sigma_max: float = 0.02
    noise_prob: float = 0.3
    cutout_frac: float = 0.0
    jitter_px: float = 0.0
    max_out_of_frame: float = 0.25
    seed: int = 0

    def __post_init__(self):
        for name in ("warp_prob", "gamma_prob", "sp_prob", "median_prob", "gauss_prob", "noise_prob"):
            p = getattr(self, name)
            if not (0.0 <= p <= 1.0):
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        for name in ("rotation_deg", "translate_frac", "shear_deg", "projective",
                     "sp_frac_max", "noise_sigma_max", "jitter_px"):
            v = getattr(self, name)
            if v < 0:
                raise ValueError(f"{name} must be >= 0, got {v}")
        for name in ("scale_range", "gamma_range", "gauss_sigma_range"):
            lo, hi = getattr(self, name)
            if not (lo <= hi):
                raise ValueError(f"{name} must be ordered (lo, hi), got {(lo, hi)}")
        if not (0.0 <= self.cutout_frac < 1.0):
            raise ValueError(f"cutout_frac must be in [0, 1), got {self.cutout_frac}")
        if self.median_kernel < 1 or self.median_kernel % 2 == 0:
            raise ValueError(f"median_kernel must be odd and >= 1, got {self.median_kernel}")
        if not (0.0 <= self.max_out_of_frame <= 1.0):
            raise ValueError("max_out_of_frame must be in [0, 1]")

    @classmethod
    def disabled(cls, seed: int = 0) -> "AugmentationConfig":
        """Identity pipeline: no warp, no photometric noise, no cutout."""
        return cls(
            rotation_deg=0.0, translate_frac=0.0, scale_range=(1.0, 1.0),
            shear_deg=0.0, projective=0.0, warp_prob=0.0,
            gamma_prob=0.0, sp_prob=0.0, median_prob=0.0, gauss_prob=0.0,
            noise_prob=0.0, cutout_frac=0.0, jitter_px=0.0, seed=seed,
        )


def sample_rng(master_seed: int, epoch: int, index: int) -> np.random.Generator:
    """Deterministic per-sample stream, independent across (epoch, index)."""
    return np.random.default_rng([master_seed, epoch, index])


# ---------------------------------------------------------------------------
# Homographies (3x3, acting on column vectors [x, y, 1])

def rotation_homography(deg: float, center: tuple[float, float]) -> np.ndarray:
    t = math.radians(deg)
    c, s = math.cos(t), math.sin(t)
    return _about_center(np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]), center)

def translation_homography(dx: float, dy: float) -> np.ndarray:
    return np.array([[1.0, 0.0, dx], [0.0, 1.0, dy], [0.0, 0.0, 1.0]])

def scale_homography(s: float, center: tuple[float, float]) -> np.ndarray:
    return _about_center(np.array([[s, 0.0, 0.0], [0.0, s, 0.0], [0.0, 0.0, 1.0]]), center)

def shear_homography(deg: float, center: tuple[float, float]) -> np.ndarray:
    k = math.tan(math.radians(deg))
    return _about_center(np.array([[1.0, k, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]), center)

def projective_homography(gx: float, gy: float, center: tuple[float, float]) -> np.ndarray:
    return _about_center(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [gx, gy, 1.0]]), center)

def _about_center(h: np.ndarray, center: tuple[float, float]) -> np.ndarray:
    cx, cy = center
    to = translation_homography(cx, cy)
    back = translation_homography(-cx, -cy)
    return to @ h @ back


def image_center(width: int, height: int) -> tuple[float, float]:
    return ((width - 1) / 2.0, (height - 1) / 2.0)


def sample_homography(cfg: AugmentationConfig, width: int, height: int, rng: np.random.Generator) -> np.ndarray:
    """Draw rotation * translation * scale * shear * projective about the
    image center, each component uniform in its configured range.

    Degenerate draws (near-zero determinant or an image corner pushed to
    infinity) are redrawn a bounded number of times, then fall back to the
    identity.
    """
    center = image_center(width, height)
    side = max(width, height)
    for _ in range(5):
        rot = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg)
        dx = rng.uniform(-cfg.translate_frac, cfg.translate_frac) * side
        dy = rng.uniform(-cfg.translate_frac, cfg.translate_frac) * side
        sc = rng.uniform(cfg.scale_range[0], cfg.scale_range[1])
        sh = rng.uniform(-cfg.shear_deg, cfg.shear_deg)
        gx = rng.uniform(-cfg.projective, cfg.projective)
        gy = rng.uniform(-cfg.projective, cfg.projective)
        h = (
            rotation_homography(rot, center)
            @ translation_homography(dx, dy)
            @ scale_homography(sc, center)
            @ shear_homography(sh, center)
            @ projective_homography(gx, gy, center)
        )
        if _usable(h, width, height):
            return h
    return np.eye(3)


def _usable(h: np.ndarray, width: int, height: int) -> bool:
    if abs(np.linalg.det(h)) < 1e-8:
        return False
    corners = np.array([[0, 0, 1], [width - 1, 0, 1], [0, height - 1, 1], [width - 1, height - 1, 1]], dtype=np.float64)
    ws = corners @ h.T[:, 2]
    return bool(np.all(np.abs(ws) > 1e-6))


def project_points(h: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Apply a homography to (N, 2) points."""
    pts = np.asarray(points, dtype=np.float64)
    hom = np.column_stack([pts, np.ones(len(pts))]) @ h.T
    w = hom[:, 2]
    if np.any(np.abs(w) < 1e-12):
        raise DegenerateTransformError("point mapped to infinity under homography")
    return hom[:, :2] / w[:, None]


def warp(img: Image, lms: LandmarkSet | None, h: np.ndarray) -> tuple[Image, LandmarkSet | None]:
    """Warp the image by inverse mapping (zero fill) and project the
    landmarks forward through the same homography.

    Landmarks may leave the frame; callers decide whether to redraw.
    """
    try:
        hinv = np.linalg.inv(h)
    except np.linalg.LinAlgError as exc:
        raise DegenerateTransformError("homography is singular") from exc
    grid_x, grid_y = np.meshgrid(
        np.arange(img.width, dtype=np.float64), np.arange(img.height, dtype=np.float64)
    )
    ones = np.ones_like(grid_x)
    denom = hinv[2, 0] * grid_x + hinv[2, 1] * grid_y + hinv[2, 2] * ones
    src_x = (hinv[0, 0] * grid_x + hinv[0, 1] * grid_y + hinv[0, 2]) / denom
    src_y = (hinv[1, 0] * grid_x + hinv[1, 1] * grid_y + hinv[1, 2]) / denom
    pixels = np.clip(sample_bilinear(img.pixels, src_x, src_y, fill=0.0), 0.0, 1.0)
    out_img = Image(pixels, spacing=img.spacing, id=img.id)
    if lms is None:
        return out_img, None
    if lms.frame is not Frame.PIXEL:
        raise ValueError("warp expects landmarks in the pixel frame")
    warped = project_points(h, lms.points)
    return out_img, LandmarkSet(warped, frame=Frame.PIXEL, image_id=lms.image_id)


# ---------------------------------------------------------------------------
# Photometric transforms (landmarks never move)

def photometric(img: Image, cfg: AugmentationConfig, rng: np.random.Generator) -> Image:
    """Apply gamma, salt&pepper, median blur, gaussian blur, and additive
    gaussian noise, each with its configured probability, in that order.
    Output is clipped to [0, 1].
    """
    px = img.pixels
    if rng.random() < cfg.gamma_prob:
        gamma = rng.uniform(cfg.gamma_range[0], cfg.gamma_range[1])
        px = np.power(px, gamma)
    if rng.random() < cfg.sp_prob:
        frac = rng.uniform(0.0, cfg.sp_frac_max)
        px = salt_and_pepper(px, frac, rng)
    if rng.random() < cfg.median_prob:
        px = ndimage.median_filter(px, size=cfg.median_kernel, mode="reflect")
    if rng.random() < cfg.gauss_prob:
        sigma = rng.uniform(cfg.gauss_sigma_range[0], cfg.gauss_sigma_range[1])
        px = ndimage.gaussian_filter(px, sigma=sigma, mode="nearest")
    if rng.random() < cfg.noise_prob:
        sigma = rng.uniform(0.0, cfg.noise_sigma_max)
        px = px + rng.normal(0.0, sigma, size=px.shape)
    px = np.clip(px, 0.0, 1.0)
    return Image(px, spacing=img.spacing, id=img.id)


def salt_and_pepper(pixels: np.ndarray, frac: float, rng: np.random.Generator) -> np.ndarray:
    """Each pixel independently becomes 0 or 1 (even odds) with probability frac."""
    if not (0.0 <= frac <= 1.0):
        raise ValueError(f"fraction must be in [0, 1], got {frac}")
    hit = rng.random(pixels.shape) < frac
    salt = rng.random(pixels.shape) < 0.5
    out = np.array(pixels, copy=True)
    out[hit & salt] = 1.0
    out[hit & ~salt] = 0.0
    return out


def cutout(img: Image, frac: float, rng: np.random.Generator) -> Image:
    """Zero a square patch of side round(sqrt(frac * area)), positioned
    uniformly and clipped to the image bounds. frac = 0 is the identity.
    """
    if not (0.0 <= frac < 1.0):
        raise ValueError(f"cutout fraction must be in [0, 1), got {frac}")
    side = int(math.floor(math.sqrt(frac * img.width * img.height) + 0.5))
    if side == 0:
        return img
    cx = int(rng.integers(0, img.width))
    cy = int(rng.integers(0, img.height))
    x0 = max(cx - side // 2, 0)
    y0 = max(cy - side // 2, 0)
    x1 = min(x0 + side, img.width)
    y1 = min(y0 + side, img.height)
    px = np.array(img.pixels, copy=True)
    px[y0:y1, x0:x1] = 0.0
    return Image(px, spacing=img.spacing, id=img.id)


def jitter_targets(points: np.ndarray, amplitude: float, rng: np.random.Generator) -> np.ndarray:
    """Add iid U(-amplitude, amplitude) noise to target coordinates."""
    if amplitude < 0:
        raise ValueError("jitter amplitude must be >= 0")
    pts = np.asarray(points, dtype=np.float64)
    return pts + rng.uniform(-amplitude, amplitude, size=pts.shape)


def augment_sample(
    img: Image, lms: LandmarkSet, cfg: AugmentationConfig, rng: np.random.Generator
) -> tuple[Image, LandmarkSet]:
    """Full pipeline: geometric warp (redrawn while more than
    cfg.max_out_of_frame of the landmarks leave the frame, bounded tries),
    then photometric noise, cutout, and target jitter.
    """
    out_img, out_lms = img, lms
    if rng.random() < cfg.warp_prob:
        for _ in range(10):
            h = sample_homography(cfg, img.width, img.height, rng)
            w_img, w_lms = warp(img, lms, h)
            xs, ys = w_lms.points[:, 0], w_lms.points[:, 1]
            outside = (xs < 0) | (xs > img.width - 1) | (ys < 0) | (ys > img.height - 1)
            if outside.mean() <= cfg.max_out_of_frame:
                out_img, out_lms = w_img, w_lms
                break
    out_img = photometric(out_img, cfg, rng)
    if cfg.cutout_frac > 0.0:
        out_img = cutout(out_img, cfg.cutout_frac, rng)
    if cfg.jitter_px > 0.0:
        jittered = jitter_targets(out_lms.points, cfg.jitter_px, rng)
        out_lms = LandmarkSet(jittered, frame=Frame.PIXEL, image_id=out_lms.image_id)
    return out_img, out_lms
