"""Scale, rotate, place and alpha-blend a foreground object onto a background.

Object rasters travel through the pipeline as float32 ``(H, W, 4)`` arrays with
premultiplied colour in ``[0, 1]``. Premultiplying before every resample keeps
transparent pixels from bleeding dark fringes into the object border.

Size fractions refer to the *opaque mask area* of the object, not its bounding
box: a size of 1.0 only fills the canvas for a rectangular mask, while a concave
object at 1.0 overflows the canvas.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np
from PIL import Image

from ._io import round_half_away
from .assets import DEFAULT_ALPHA_THRESHOLD, ForegroundAsset, load_rgb, load_rgba
from .errors import DataError, ObjectVanishesError

DEFAULT_CANVAS_PX = 224
MIN_CANVAS_PX = 32

# Area correction passes after the first resample; each pass rescales by the
# square root of the remaining area ratio.
_AREA_REFINE_STEPS = 4
_AREA_REFINE_TOL = 0.002


@dataclass(frozen=True)
class Placement:
    size_fraction: float
    location: tuple[float, float]
    rotation_deg: float = 0.0

    def __post_init__(self):
        if not 0 < self.size_fraction <= 1:
            raise DataError(f"size_fraction must be in (0, 1], got {self.size_fraction}")
        fx, fy = self.location
        if not (0 <= fx <= 1 and 0 <= fy <= 1):
            raise DataError(f"location must lie in [0, 1]^2, got {self.location}")


@dataclass
class CompositeResult:
    image: np.ndarray  # (canvas, canvas, 3) uint8
    alpha: np.ndarray  # (canvas, canvas) float32 blended object alpha
    in_image_fraction: float
    realized_area_fraction: float
    opaque_inside: int
    opaque_total: int
    offset: tuple[int, int]  # canvas position of the object raster's top-left pixel
    object_center: tuple[float, float]  # transformed bbox center, canvas pixels


def premultiply(rgba: np.ndarray) -> np.ndarray:
    """uint8 straight-alpha RGBA -> float32 premultiplied RGBA."""
    out = np.asarray(rgba, dtype=np.float32) / 255.0
    out[..., :3] *= out[..., 3:4]
    return out


def unpremultiply(planes: np.ndarray) -> np.ndarray:
    """float32 premultiplied RGBA -> uint8 straight-alpha RGBA."""
    a = planes[..., 3:4]
    rgb = np.divide(planes[..., :3], a, out=np.zeros_like(planes[..., :3]), where=a > 0)
    out = np.concatenate([np.clip(rgb, 0, 1), np.clip(a, 0, 1)], axis=-1)
    return np.floor(out * 255.0 + 0.5).astype(np.uint8)


def _as_planes(raster: np.ndarray) -> np.ndarray:
    if raster.dtype == np.uint8:
        return premultiply(raster)
    return np.asarray(raster, dtype=np.float32)


def opaque(planes: np.ndarray, threshold: int = DEFAULT_ALPHA_THRESHOLD) -> np.ndarray:
    """Opacity mask matching the uint8 rule ``alpha > threshold``."""
    return planes[..., 3] > (threshold + 0.5) / 255.0


def tight_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise ObjectVanishesError("object vanishes: no opaque pixels left")
    return int(cols[0]), int(rows[0]), int(cols[-1] - cols[0] + 1), int(rows[-1] - rows[0] + 1)


def _crop_support(planes: np.ndarray) -> np.ndarray:
    """Crop to the pixels with any alpha at all."""
    x, y, w, h = tight_bbox(planes[..., 3] > 0)
    return planes[y:y + h, x:x + w]


def _resize_planes(planes: np.ndarray, scale: float) -> np.ndarray:
    """Bilinear (antialiased when shrinking) resize by an exact factor in both axes."""
    h, w = planes.shape[:2]
    out_w = max(1, math.ceil(w * scale - 1e-9))
    out_h = max(1, math.ceil(h * scale - 1e-9))
    box_w, box_h = out_w / scale, out_h / scale
    # Snap round-off so an exact fit does not pick up a transparent pad column.
    box_w = w if abs(box_w - w) < 1e-6 else box_w
    box_h = h if abs(box_h - h) < 1e-6 else box_h
    pad_w = max(0, math.ceil(box_w) - w)
    pad_h = max(0, math.ceil(box_h) - h)
    if pad_w or pad_h:
        planes = np.pad(planes, ((0, pad_h), (0, pad_w), (0, 0)))
    box = (0.0, 0.0, box_w, box_h)
    out = np.empty((out_h, out_w, 4), dtype=np.float32)
    for c in range(4):
        im = Image.fromarray(np.ascontiguousarray(planes[..., c]), mode="F")
        out[..., c] = np.asarray(im.resize((out_w, out_h), Image.Resampling.BILINEAR, box=box))
    return np.clip(out, 0.0, 1.0)


def _load_object(obj, threshold: int) -> tuple[np.ndarray, int, tuple[int, int, int, int]]:
    if isinstance(obj, ForegroundAsset):
        planes = premultiply(load_rgba(obj.raster_path))
    else:
        planes = _as_planes(obj)
    mask = opaque(planes, threshold)
    area = int(mask.sum())
    if area == 0:
        raise DataError("no opaque pixels")
    return _crop_support(planes), area, tight_bbox(mask)


def scale_to_area(
    obj: ForegroundAsset | np.ndarray,
    size_fraction: float,
    canvas_px: int = DEFAULT_CANVAS_PX,
    threshold: int = DEFAULT_ALPHA_THRESHOLD,
) -> np.ndarray:
    """Resize ``obj`` so its opaque area is ``size_fraction`` of a ``canvas_px``² canvas.

    ``obj`` is a :class:`ForegroundAsset` or an RGBA raster (uint8 straight alpha
    or float premultiplied). Returns a premultiplied float raster.
    """
    if not 0 < size_fraction <= 1:
        raise DataError(f"size_fraction must be in (0, 1], got {size_fraction}")
    if canvas_px < MIN_CANVAS_PX:
        raise DataError(f"canvas_px must be >= {MIN_CANVAS_PX}, got {canvas_px}")
    planes, area, (_, _, bw, bh) = _load_object(obj, threshold)
    target = size_fraction * canvas_px * canvas_px
    scale = math.sqrt(target / area)
    if min(bw, bh) * scale < 1:
        raise ObjectVanishesError(
            f"object vanishes: {bw}x{bh} bbox scaled by {scale:.4g} is below 1 px")

    best, best_err = None, math.inf
    for _ in range(_AREA_REFINE_STEPS + 1):
        out = _resize_planes(planes, scale)
        got = int(opaque(out, threshold).sum())
        err = abs(got / target - 1)
        if err < best_err:
            best, best_err = out, err
        if got == 0 or err <= _AREA_REFINE_TOL:
            break
        scale *= math.sqrt(target / got)
    if best is None or not opaque(best, threshold).any():
        raise ObjectVanishesError("object vanishes after resampling")
    return best


def _bilinear_sample(planes: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample ``planes`` at float pixel coordinates; outside the raster is transparent."""
    h, w = planes.shape[:2]
    padded = np.pad(planes, ((1, 1), (1, 1), (0, 0)))
    x0 = np.floor(xs)
    y0 = np.floor(ys)
    tx = (xs - x0)[..., None].astype(np.float32)
    ty = (ys - y0)[..., None].astype(np.float32)
    # +1 shifts into padded coordinates; clipping parks far-away samples on the zero border.
    xi0 = np.clip(x0.astype(np.int64) + 1, 0, w + 1)
    yi0 = np.clip(y0.astype(np.int64) + 1, 0, h + 1)
    xi1 = np.clip(x0.astype(np.int64) + 2, 0, w + 1)
    yi1 = np.clip(y0.astype(np.int64) + 2, 0, h + 1)
    top = padded[yi0, xi0] * (1 - tx) + padded[yi0, xi1] * tx
    bottom = padded[yi1, xi0] * (1 - tx) + padded[yi1, xi1] * tx
    return top * (1 - ty) + bottom * ty


def rotate_object(
    raster: np.ndarray,
    rotation_deg: float,
    threshold: int = DEFAULT_ALPHA_THRESHOLD,
) -> np.ndarray:
    """Rotate counterclockwise about the opaque bbox center, expanding the canvas.

    At 0 degrees the result is the input with a transparent border.
    """
    planes = _as_planes(raster)
    if planes.size == 0:
        raise DataError("empty raster")
    h, w = planes.shape[:2]
    mask = opaque(planes, threshold)
    if mask.any():
        bx, by, bw, bh = tight_bbox(mask)
        cx, cy = bx + (bw - 1) / 2, by + (bh - 1) / 2
    else:
        cx, cy = (w - 1) / 2, (h - 1) / 2

    theta = math.radians(rotation_deg % 360.0)
    cos, sin = math.cos(theta), math.sin(theta)
    # Image y points down, so a visually counterclockwise turn maps
    # (dx, dy) -> (cos*dx + sin*dy, -sin*dx + cos*dy).
    corners = np.array([[-1, -1], [w, -1], [-1, h], [w, h]], dtype=np.float64) - (cx, cy)
    qx = cos * corners[:, 0] + sin * corners[:, 1]
    qy = -sin * corners[:, 0] + cos * corners[:, 1]
    # Integer margins keep the zero-angle case an exact pixel shift.
    mx = math.ceil(-qx.min() - cx - 1e-9) + 1
    my = math.ceil(-qy.min() - cy - 1e-9) + 1
    ocx, ocy = cx + mx, cy + my
    out_w = math.ceil(ocx + qx.max() - 1e-9) + 2
    out_h = math.ceil(ocy + qy.max() - 1e-9) + 2

    py, px = np.mgrid[0:out_h, 0:out_w].astype(np.float64)
    dx, dy = px - ocx, py - ocy
    src_x = cx + cos * dx - sin * dy
    src_y = cy + sin * dx + cos * dy
    if rotation_deg % 360.0 == 0:
        src_x, src_y = np.rint(src_x), np.rint(src_y)
    out = _bilinear_sample(planes, src_x, src_y)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


@lru_cache(maxsize=64)
def _prepared_background_cached(path: str, canvas_px: int) -> np.ndarray:
    rgb = load_rgb(path)
    out = prepare_background(rgb, canvas_px)
    out.flags.writeable = False
    return out


def prepare_background(rgb: np.ndarray, canvas_px: int = DEFAULT_CANVAS_PX) -> np.ndarray:
    """Center-crop to a square, then resize to ``canvas_px`` (bilinear)."""
    h, w = rgb.shape[:2]
    side = min(h, w)
    if side < 1:
        raise DataError("empty background")
    x0, y0 = (w - side) // 2, (h - side) // 2
    square = np.ascontiguousarray(rgb[y0:y0 + side, x0:x0 + side, :3])
    if side == canvas_px:
        return square.copy()
    im = Image.fromarray(square, mode="RGB").resize((canvas_px, canvas_px), Image.Resampling.BILINEAR)
    return np.asarray(im).copy()


def target_pixel(location: tuple[float, float], canvas_px: int) -> tuple[int, int]:
    fx, fy = location
    return round_half_away(fx * (canvas_px - 1)), round_half_away(fy * (canvas_px - 1))


def count_inside(mask: np.ndarray, offset: tuple[int, int], canvas_px: int) -> int:
    """Opaque pixels of ``mask`` that land on the canvas when its origin sits at ``offset``."""
    ox, oy = offset
    h, w = mask.shape
    x0, x1 = max(0, -ox), min(w, canvas_px - ox)
    y0, y1 = max(0, -oy), min(h, canvas_px - oy)
    if x0 >= x1 or y0 >= y1:
        return 0
    return int(mask[y0:y1, x0:x1].sum())


def place(
    planes: np.ndarray,
    location: tuple[float, float],
    canvas_px: int = DEFAULT_CANVAS_PX,
    threshold: int = DEFAULT_ALPHA_THRESHOLD,
) -> tuple[tuple[int, int], tuple[float, float]]:
    """Offset that puts the opaque bbox center of ``planes`` on the requested pixel.

    Returns ``(offset, center)``: the canvas coordinate of the raster's top-left
    pixel and the bbox center it lands on.
    """
    bx, by, bw, bh = tight_bbox(opaque(planes, threshold))
    cx, cy = bx + (bw - 1) / 2, by + (bh - 1) / 2
    tx, ty = target_pixel(location, canvas_px)
    offset = (round_half_away(tx - cx), round_half_away(ty - cy))
    return offset, (cx + offset[0], cy + offset[1])


def transform_object(
    obj: ForegroundAsset | np.ndarray,
    placement: Placement,
    canvas_px: int = DEFAULT_CANVAS_PX,
    threshold: int = DEFAULT_ALPHA_THRESHOLD,
) -> tuple[np.ndarray, tuple[int, int], tuple[float, float]]:
    """Scale, rotate, then position an object. Returns ``(planes, offset, center)``."""
    planes = scale_to_area(obj, placement.size_fraction, canvas_px, threshold)
    if placement.rotation_deg % 360.0 != 0:
        planes = rotate_object(planes, placement.rotation_deg, threshold)
    offset, center = place(planes, placement.location, canvas_px, threshold)
    return planes, offset, center


def blend(
    planes: np.ndarray,
    background: np.ndarray,
    location: tuple[float, float],
    threshold: int = DEFAULT_ALPHA_THRESHOLD,
) -> CompositeResult:
    """Alpha-over an already scaled/rotated object onto a prepared square background."""
    canvas_px = background.shape[0]
    (ox, oy), center = place(planes, location, canvas_px, threshold)
    mask = opaque(planes, threshold)
    total = int(mask.sum())
    inside = count_inside(mask, (ox, oy), canvas_px)

    image = background.copy()
    alpha = np.zeros((canvas_px, canvas_px), dtype=np.float32)
    h, w = mask.shape
    x0, x1 = max(0, -ox), min(w, canvas_px - ox)
    y0, y1 = max(0, -oy), min(h, canvas_px - oy)
    if x0 < x1 and y0 < y1:
        src = planes[y0:y1, x0:x1]
        cy0, cx0 = y0 + oy, x0 + ox
        rows, cols = slice(cy0, cy0 + (y1 - y0)), slice(cx0, cx0 + (x1 - x0))
        a = src[..., 3:4]
        blended = src[..., :3] * 255.0 + background[rows, cols].astype(np.float32) * (1.0 - a)
        blended = np.clip(np.floor(blended + 0.5), 0, 255).astype(np.uint8)
        touched = a[..., 0] > 0
        patch = image[rows, cols]
        patch[touched] = blended[touched]
        alpha[rows, cols] = a[..., 0]

    return CompositeResult(
        image=image,
        alpha=alpha,
        in_image_fraction=inside / total,
        realized_area_fraction=total / (canvas_px * canvas_px),
        opaque_inside=inside,
        opaque_total=total,
        offset=(ox, oy),
        object_center=center,
    )


def load_background(bg, canvas_px: int = DEFAULT_CANVAS_PX) -> np.ndarray:
    """Prepared (cropped, resized) background from an asset or an RGB array."""
    if isinstance(bg, np.ndarray):
        return prepare_background(bg, canvas_px)
    return _prepared_background_cached(str(bg.raster_path), canvas_px)


def compose(
    fg: ForegroundAsset | np.ndarray,
    bg,
    placement: Placement,
    canvas_px: int = DEFAULT_CANVAS_PX,
    threshold: int = DEFAULT_ALPHA_THRESHOLD,
) -> CompositeResult:
    """Render ``fg`` over ``bg`` at ``placement``.

    ``bg`` is a :class:`BackgroundAsset` or an RGB array of any size; it is
    center-cropped and resized to the canvas. Pixels the object does not touch
    (blended alpha exactly zero) are copied from the prepared background unchanged.
    """
    if canvas_px < MIN_CANVAS_PX:
        raise DataError(f"canvas_px must be >= {MIN_CANVAS_PX}, got {canvas_px}")
    background = load_background(bg, canvas_px)
    planes = scale_to_area(fg, placement.size_fraction, canvas_px, threshold)
    if placement.rotation_deg % 360.0 != 0:
        planes = rotate_object(planes, placement.rotation_deg, threshold)
    return blend(planes, background, placement.location, threshold)


def fixres_crop_geometry(image_w: int, image_h: int, r: int) -> tuple[int, int, int, int]:
    """Resize so the shorter side is floor(1.15 r), then center-crop r x r.

    Returns ``(resize_w, resize_h, crop_x, crop_y)``. The longer side keeps the
    aspect ratio, rounded half away from zero. For r = 224 this gives a shorter
    side of 257, one more than the customary 256.
    """
    if r < 1 or image_w < 1 or image_h < 1:
        raise DataError("image dimensions and r must be >= 1")
    short = (115 * r) // 100
    if image_w <= image_h:
        resize_w = short
        resize_h = int(Fraction(image_h * short, image_w) + Fraction(1, 2))
    else:
        resize_h = short
        resize_w = int(Fraction(image_w * short, image_h) + Fraction(1, 2))
    return resize_w, resize_h, (resize_w - r) // 2, (resize_h - r) // 2


def fixres_preprocess(image: np.ndarray, r: int) -> np.ndarray:
    """Apply :func:`fixres_crop_geometry` to an RGB array."""
    h, w = image.shape[:2]
    rw, rh, cx, cy = fixres_crop_geometry(w, h, r)
    im = Image.fromarray(np.ascontiguousarray(image)).resize((rw, rh), Image.Resampling.BILINEAR)
    return np.asarray(im)[cy:cy + r, cx:cx + r].copy()
