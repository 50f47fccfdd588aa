"""Rasters with physical pixel spacing, landmark sets, and annotation I/O.

Coordinate conventions used throughout the package:

* pixels are stored row-major as a (height, width) float array in [0, 1];
* a point is (x, y) with x indexing columns (width) and y indexing rows;
* pixel centers sit at integer coordinates, so an image of width W spans
  x in [-0.5, W - 0.5] and resizing maps x_out -> (x_out + 0.5) * W/W' - 0.5;
* physical spacing is isotropic, in millimetres per pixel.
"""

import csv
import math
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image as _PILImage

KNEE_LANDMARK_COUNT = 16
TIBIA_IDS = tuple(range(0, 9))
FEMUR_IDS = tuple(range(9, 16))


class Frame(Enum):
    PIXEL = "pixel"
    NORMALIZED = "normalized"


class Side(Enum):
    LEFT = "L"
    RIGHT = "R"


class AnnotationError(ValueError):
    """Malformed annotation file (bad row, bad header, bad landmark count)."""


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class Image:
    """Single-channel image with isotropic physical spacing.

    pixels: (height, width) float array, intensities in [0, 1].
    spacing: millimetres per pixel.
    id: opaque identifier, carried through crops and resamples.
    """

    pixels: np.ndarray
    spacing: float
    id: str = ""

    def __post_init__(self):
        px = self.pixels
        if not isinstance(px, np.ndarray) or px.ndim != 2:
            raise ValueError("pixels must be a 2-d array (height, width)")
        if px.size == 0:
            raise ValueError("image has no pixels")
        if not np.issubdtype(px.dtype, np.floating):
            raise ValueError(f"pixels must be floating point, got {px.dtype}")
        if not np.isfinite(px).all():
            raise ValueError("pixels contain non-finite values")
        lo, hi = float(px.min()), float(px.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"intensities outside [0, 1]: min={lo}, max={hi}")
        if not (isinstance(self.spacing, (int, float)) and math.isfinite(self.spacing) and self.spacing > 0):
            raise ValueError(f"spacing must be positive and finite, got {self.spacing}")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True, eq=False)
class LandmarkSet:
    """Ordered set of 2-d points, either in an image's pixel frame or the
    normalized frame (coordinates divided by width/height, so in [0, 1]).

    For the 16-landmark knee scheme ids 0-8 run along the tibial surface and
    9-15 along the femoral surface, numbered left to right within the image.
    """

    points: np.ndarray
    frame: Frame = Frame.PIXEL
    image_id: str | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        object.__setattr__(self, "points", pts)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 1:
            raise ValueError(f"points must have shape (M, 2) with M >= 1, got {pts.shape}")
        if not np.isfinite(pts).all():
            raise ValueError("landmark coordinates contain non-finite values")
        if self.frame is Frame.NORMALIZED:
            if pts.min() < 0.0 or pts.max() > 1.0:
                raise ValueError("normalized coordinates outside [0, 1]")

    @property
    def count(self) -> int:
        return self.points.shape[0]

    def __eq__(self, other):
        if not isinstance(other, LandmarkSet):
            return NotImplemented
        return (
            self.frame is other.frame
            and self.image_id == other.image_id
            and self.points.shape == other.points.shape
            and bool(np.array_equal(self.points, other.points))
        )


@dataclass(frozen=True)
class RoiTransform:
    """Invertible record of crop -> resize -> horizontal flip applied to an
    image, sufficient to map points between the source and ROI frames.

    origin is the (integer-valued) pixel coordinate in the source frame of the
    crop's pixel (0, 0). resize_scale maps crop pixels to output pixels with
    pixel-center alignment; the output side is round(crop_side * resize_scale).
    center_inside is False when the requested crop center fell outside the
    source image (the crop is then mostly or fully zero padding).
    """

    source_id: str
    origin: tuple[float, float]
    crop_side: int
    resize_scale: float = 1.0
    flip: bool = False
    center_inside: bool = True

    @property
    def out_side(self) -> int:
        return _round_half_up(self.crop_side * self.resize_scale)

    def with_resize(self, out_side: int) -> "RoiTransform":
        if out_side < 1:
            raise ValueError("output side must be >= 1")
        return replace(self, resize_scale=out_side / self.crop_side)

    def with_flip(self) -> "RoiTransform":
        return replace(self, flip=not self.flip)

    def to_roi(self, points: np.ndarray) -> np.ndarray:
        """Map (N, 2) points from the source pixel frame to the ROI frame."""
        pts = np.asarray(points, dtype=np.float64)
        out = np.empty_like(pts)
        s = self.resize_scale
        out[:, 0] = (pts[:, 0] - self.origin[0] + 0.5) * s - 0.5
        out[:, 1] = (pts[:, 1] - self.origin[1] + 0.5) * s - 0.5
        if self.flip:
            out[:, 0] = (self.out_side - 1) - out[:, 0]
        return out

    def to_source(self, points: np.ndarray) -> np.ndarray:
        """Inverse of to_roi."""
        pts = np.asarray(points, dtype=np.float64)
        out = np.array(pts, copy=True)
        if self.flip:
            out[:, 0] = (self.out_side - 1) - out[:, 0]
        s = self.resize_scale
        out[:, 0] = (out[:, 0] + 0.5) / s - 0.5 + self.origin[0]
        out[:, 1] = (out[:, 1] + 0.5) / s - 0.5 + self.origin[1]
        return out


# ---------------------------------------------------------------------------
# Bilinear sampling

def sample_bilinear(pixels: np.ndarray, xs: np.ndarray, ys: np.ndarray, fill: float | None = None) -> np.ndarray:
    """Sample a (H, W) array at fractional coordinates.

    fill=None clamps to the border (resampling); a float fills out-of-bounds
    samples with that value (warping). Interpolation is written in lerp form
    so constant images are preserved exactly.
    """
    h, w = pixels.shape
    x0f = np.floor(xs)
    y0f = np.floor(ys)
    fx = xs - x0f
    fy = ys - y0f
    x0 = x0f.astype(np.int64)
    y0 = y0f.astype(np.int64)
    if fill is None:
        x0c = np.clip(x0, 0, w - 1)
        x1c = np.clip(x0 + 1, 0, w - 1)
        y0c = np.clip(y0, 0, h - 1)
        y1c = np.clip(y0 + 1, 0, h - 1)
        p00 = pixels[y0c, x0c]
        p10 = pixels[y0c, x1c]
        p01 = pixels[y1c, x0c]
        p11 = pixels[y1c, x1c]
    else:
        def gather(yy, xx):
            ok = (xx >= 0) & (xx < w) & (yy >= 0) & (yy < h)
            vals = pixels[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
            return np.where(ok, vals, fill)

        p00 = gather(y0, x0)
        p10 = gather(y0, x0 + 1)
        p01 = gather(y0 + 1, x0)
        p11 = gather(y0 + 1, x0 + 1)
    top = p00 + fx * (p10 - p00)
    bot = p01 + fx * (p11 - p01)
    return top + fy * (bot - top)


def resize_pixels(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a raw (H, W) array with pixel-center alignment."""
    h, w = pixels.shape
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    grid_x, grid_y = np.meshgrid(xs, ys)
    out = sample_bilinear(pixels, grid_x, grid_y, fill=None)
    # lerp can overshoot by one rounding; keep the [0, 1] contract
    return np.clip(out, 0.0, 1.0)


def scale_points(points: np.ndarray, src_w: int, src_h: int, dst_w: int, dst_h: int) -> np.ndarray:
    """Map pixel-frame points through a bilinear resize from (src_w, src_h)
    to (dst_w, dst_h), using the same pixel-center convention as
    resize_pixels: x' = (x + 0.5) * dst/src - 0.5."""
    pts = np.asarray(points, dtype=np.float64)
    out = np.empty_like(pts)
    out[:, 0] = (pts[:, 0] + 0.5) * (dst_w / src_w) - 0.5
    out[:, 1] = (pts[:, 1] + 0.5) * (dst_h / src_h) - 0.5
    return out


# ---------------------------------------------------------------------------
# Geometry operations

def resample(img: Image, target_spacing: float) -> Image:
    """Resample to a new isotropic spacing with bilinear interpolation.

    Output width = round(width * spacing / target_spacing), same for height.
    """
    if not (isinstance(target_spacing, (int, float)) and math.isfinite(target_spacing) and target_spacing > 0):
        raise ValueError(f"target spacing must be positive and finite, got {target_spacing}")
    out_w = _round_half_up(img.width * img.spacing / target_spacing)
    out_h = _round_half_up(img.height * img.spacing / target_spacing)
    if out_w < 1 or out_h < 1:
        raise ValueError(f"target spacing {target_spacing} collapses the image to {out_w}x{out_h}")
    if out_w == img.width and out_h == img.height and float(target_spacing) == img.spacing:
        return Image(img.pixels.copy(), spacing=float(target_spacing), id=img.id)
    pixels = resize_pixels(img.pixels, out_h, out_w)
    return Image(pixels, spacing=float(target_spacing), id=img.id)


def resize_to(img: Image, out_side: int) -> Image:
    """Resize to a square of out_side pixels; spacing rescales accordingly."""
    if out_side < 1:
        raise ValueError("output side must be >= 1")
    pixels = resize_pixels(img.pixels, out_side, out_side)
    # physical extent is preserved along the wider axis convention: the image
    # must already be square for the spacing to stay meaningful
    new_spacing = img.spacing * img.width / out_side
    return Image(pixels, spacing=new_spacing, id=img.id)


def crop_roi(img: Image, center_mm: tuple[float, float], size_mm: float) -> tuple[Image, RoiTransform]:
    """Extract a square region of physical side size_mm centered (to the
    nearest pixel) at center_mm, zero-padding out-of-bounds area.

    Returns the crop and the RoiTransform mapping source points to crop
    points. A center outside the image is valid and flagged on the transform.
    """
    if not (size_mm > 0 and math.isfinite(size_mm)):
        raise ValueError(f"crop size must be positive, got {size_mm}")
    side = _round_half_up(size_mm / img.spacing)
    if side < 1:
        raise ValueError(f"crop of {size_mm} mm at spacing {img.spacing} has no pixels")
    cx = center_mm[0] / img.spacing
    cy = center_mm[1] / img.spacing
    ox = _round_half_up(cx - (side - 1) / 2)
    oy = _round_half_up(cy - (side - 1) / 2)
    out = np.zeros((side, side), dtype=img.pixels.dtype)
    sx0 = max(ox, 0)
    sy0 = max(oy, 0)
    sx1 = min(ox + side, img.width)
    sy1 = min(oy + side, img.height)
    if sx0 < sx1 and sy0 < sy1:
        out[sy0 - oy:sy1 - oy, sx0 - ox:sx1 - ox] = img.pixels[sy0:sy1, sx0:sx1]
    center_inside = (0 <= cx <= img.width - 1) and (0 <= cy <= img.height - 1)
    tf = RoiTransform(
        source_id=img.id,
        origin=(float(ox), float(oy)),
        crop_side=side,
        center_inside=center_inside,
    )
    return Image(out, spacing=img.spacing, id=f"{img.id}:roi"), tf


def flip_index_permutation(count: int) -> np.ndarray:
    """Index remap applied when an image is mirrored horizontally.

    The 16-landmark knee scheme reverses ids within each bone group (tibia
    0-8, femur 9-15) so numbering stays left-to-right in the mirrored image;
    a single point keeps its index. Other counts have no anatomical scheme
    here and keep their order.
    """
    if count == KNEE_LANDMARK_COUNT:
        return np.array(list(reversed(TIBIA_IDS)) + list(reversed(FEMUR_IDS)), dtype=np.int64)
    return np.arange(count, dtype=np.int64)


def flip_horizontal(img: Image, lms: LandmarkSet) -> tuple[Image, LandmarkSet]:
    """Mirror the image and landmark set about the vertical center line.

    x -> (width - 1) - x; landmark ids are remapped per
    flip_index_permutation so the left-to-right numbering convention holds.
    """
    if lms.frame is not Frame.PIXEL:
        raise ValueError("flip_horizontal expects landmarks in the pixel frame")
    if lms.image_id is not None and img.id and lms.image_id != img.id:
        raise ValueError(f"landmark set belongs to {lms.image_id!r}, not {img.id!r}")
    flipped = Image(np.ascontiguousarray(img.pixels[:, ::-1]), spacing=img.spacing, id=img.id)
    mirrored = np.array(lms.points, copy=True)
    mirrored[:, 0] = (img.width - 1) - mirrored[:, 0]
    perm = flip_index_permutation(lms.count)
    return flipped, LandmarkSet(mirrored[perm], frame=Frame.PIXEL, image_id=lms.image_id)


# two-knee radiographs show the patient's right knee in the image's left
# half; callers of split_bilateral map positional halves to sides with this
BILATERAL_HALF_SIDES = {"left": Side.RIGHT, "right": Side.LEFT}


def split_bilateral(img: Image) -> tuple[Image, Image]:
    """Split a two-knee radiograph into left and right halves.

    The left half takes columns [0, width // 2); odd widths give the extra
    column to the right half. Spacing is preserved.
    """
    if img.width < 2:
        raise ValueError(f"cannot split an image of width {img.width}")
    half = img.width // 2
    left = Image(np.ascontiguousarray(img.pixels[:, :half]), spacing=img.spacing, id=f"{img.id}:left")
    right = Image(np.ascontiguousarray(img.pixels[:, half:]), spacing=img.spacing, id=f"{img.id}:right")
    return left, right


def to_normalized(lms: LandmarkSet, img: Image) -> LandmarkSet:
    """Pixel frame -> normalized frame: x/width, y/height."""
    if lms.frame is not Frame.PIXEL:
        raise ValueError("to_normalized expects a pixel-frame landmark set")
    out = np.empty_like(lms.points)
    out[:, 0] = lms.points[:, 0] / img.width
    out[:, 1] = lms.points[:, 1] / img.height
    if out.min() < 0.0 or out.max() > 1.0:
        raise ValueError("landmarks out of bounds: normalized coordinates leave [0, 1]")
    return LandmarkSet(out, frame=Frame.NORMALIZED, image_id=lms.image_id)


def to_pixels(lms: LandmarkSet, img: Image) -> LandmarkSet:
    """Normalized frame -> pixel frame: x*width, y*height."""
    if lms.frame is not Frame.NORMALIZED:
        raise ValueError("to_pixels expects a normalized-frame landmark set")
    pts = lms.points
    if pts.min() < 0.0 or pts.max() > 1.0:
        raise ValueError("normalized input outside [0, 1]")
    out = np.empty_like(pts)
    out[:, 0] = pts[:, 0] * img.width
    out[:, 1] = pts[:, 1] * img.height
    return LandmarkSet(out, frame=Frame.PIXEL, image_id=lms.image_id)


# ---------------------------------------------------------------------------
# PNG I/O

def read_png(path, spacing: float, id: str | None = None) -> Image:
    """Load an 8- or 16-bit single-channel PNG, scaling intensities to [0, 1]."""
    with _PILImage.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim != 2:
        raise ValueError(f"{path}: expected a single-channel image, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        maxval = 255.0
    elif arr.dtype == np.uint16:
        maxval = 65535.0
    elif np.issubdtype(arr.dtype, np.integer):
        # Pillow opens some 16-bit PNGs as mode "I" (int32)
        if arr.min() < 0 or arr.max() > 65535:
            raise ValueError(f"{path}: integer intensities outside 16-bit range")
        maxval = 65535.0
    else:
        raise ValueError(f"{path}: unsupported pixel type {arr.dtype}")
    pixels = arr.astype(np.float64) / maxval
    return Image(pixels, spacing=spacing, id=id if id is not None else Path(path).name)


def write_png(img: Image, path, bit_depth: int = 16) -> None:
    """Write the image as an 8- or 16-bit grayscale PNG."""
    if bit_depth == 8:
        arr = np.round(img.pixels * 255.0).astype(np.uint8)
        pil = _PILImage.fromarray(arr, mode="L")
    elif bit_depth == 16:
        arr = np.round(img.pixels * 65535.0).astype(np.uint16)
        pil = _PILImage.fromarray(arr)
    else:
        raise ValueError(f"bit_depth must be 8 or 16, got {bit_depth}")
    pil.save(path, format="PNG")


# ---------------------------------------------------------------------------
# Annotations

@dataclass(frozen=True, eq=False)
class AnnotationRecord:
    """One knee on one image.

    landmarks holds either the full 16-point set or, for low-cost rows, a
    single point (the joint center). center duplicates the cheap label when
    present. kl is the Kellgren-Lawrence grade 0-4.
    """

    image: str
    spacing: float
    patient_id: str
    side: Side
    kl: int
    landmarks: LandmarkSet
    center: tuple[float, float] | None = None
    exclude: bool = False

    def __post_init__(self):
        if not (self.spacing > 0 and math.isfinite(self.spacing)):
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        if not (isinstance(self.kl, int) and 0 <= self.kl <= 4):
            raise ValueError(f"kl grade must be an integer in 0..4, got {self.kl}")
        if self.landmarks.count not in (1, KNEE_LANDMARK_COUNT):
            raise ValueError(f"landmark count must be 1 or {KNEE_LANDMARK_COUNT}, got {self.landmarks.count}")
        if self.landmarks.frame is not Frame.PIXEL:
            raise ValueError("annotation landmarks must be in the pixel frame")

    def __eq__(self, other):
        if not isinstance(other, AnnotationRecord):
            return NotImplemented
        return (
            self.image == other.image
            and self.spacing == other.spacing
            and self.patient_id == other.patient_id
            and self.side is other.side
            and self.kl == other.kl
            and self.landmarks == other.landmarks
            and self.center == other.center
            and self.exclude == other.exclude
        )


_BASE_HEADER = ["image", "spacing_mm", "patient_id", "side", "kl", "cx", "cy"]
for _i in range(KNEE_LANDMARK_COUNT):
    _BASE_HEADER += [f"x{_i}", f"y{_i}"]
ANNOTATION_HEADER = _BASE_HEADER + ["exclude"]


def _fmt(x: float) -> str:
    return repr(float(x))


def write_annotations(records, path) -> None:
    """Write records as CSV; the inverse of read_annotations."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ANNOTATION_HEADER)
        for rec in records:
            row = [rec.image, _fmt(rec.spacing), rec.patient_id, rec.side.value, str(rec.kl)]
            if rec.center is not None:
                row += [_fmt(rec.center[0]), _fmt(rec.center[1])]
            else:
                row += ["", ""]
            if rec.landmarks.count == KNEE_LANDMARK_COUNT:
                for x, y in rec.landmarks.points:
                    row += [_fmt(x), _fmt(y)]
            else:
                row += [""] * (2 * KNEE_LANDMARK_COUNT)
            row.append("1" if rec.exclude else "0")
            writer.writerow(row)


def read_annotations(path) -> list[AnnotationRecord]:
    """Parse an annotation CSV.

    Low-cost rows leave x0..y15 empty and must carry cx, cy; their landmark
    set is the single center point. A partially filled landmark block is a
    schema error. Parse failures name the offending line.
    """
    with open(path, "r", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise AnnotationError(f"{path}: empty file, expected a header row")
        header = [h.strip() for h in header]
        if header == ANNOTATION_HEADER:
            has_exclude = True
        elif header == _BASE_HEADER:
            has_exclude = False
        else:
            raise AnnotationError(f"{path}: unrecognized header {header[:8]}...")
        records = []
        expected_len = len(ANNOTATION_HEADER) if has_exclude else len(_BASE_HEADER)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != expected_len:
                raise AnnotationError(f"{path}: line {lineno}: expected {expected_len} fields, got {len(row)}")
            try:
                records.append(_parse_row(row, has_exclude))
            except AnnotationError:
                raise
            except (ValueError, KeyError) as exc:
                raise AnnotationError(f"{path}: line {lineno}: {exc}") from exc
        return records


def _parse_row(row, has_exclude: bool) -> AnnotationRecord:
    image = row[0]
    spacing = float(row[1])
    patient_id = row[2]
    side = Side(row[3])
    kl = int(row[4])
    cx, cy = row[5].strip(), row[6].strip()
    center = (float(cx), float(cy)) if cx != "" and cy != "" else None
    coord_fields = row[7:7 + 2 * KNEE_LANDMARK_COUNT]
    filled = [f for f in coord_fields if f.strip() != ""]
    if len(filled) == 2 * KNEE_LANDMARK_COUNT:
        pts = np.array([float(v) for v in coord_fields], dtype=np.float64).reshape(KNEE_LANDMARK_COUNT, 2)
        landmarks = LandmarkSet(pts, frame=Frame.PIXEL, image_id=image)
    elif len(filled) == 0:
        if center is None:
            raise AnnotationError("row has neither landmarks nor a center label")
        landmarks = LandmarkSet(np.array([center], dtype=np.float64), frame=Frame.PIXEL, image_id=image)
    else:
        raise AnnotationError(
            f"landmark count must be 1 or {KNEE_LANDMARK_COUNT}, row fills {len(filled) // 2} points"
        )
    exclude = False
    if has_exclude:
        flag = row[-1].strip()
        if flag not in ("0", "1", ""):
            raise AnnotationError(f"exclude flag must be 0 or 1, got {flag!r}")
        exclude = flag == "1"
    return AnnotationRecord(
        image=image, spacing=spacing, patient_id=patient_id, side=side, kl=kl,
        landmarks=landmarks, center=center, exclude=exclude,
    )
