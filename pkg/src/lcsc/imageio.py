"""Image loading and geometric preprocessing.

Images are held as planar float64 arrays of shape ``(3, height, width)`` with
intensities in [0, 1].  Every operation returns a new image; inputs are never
modified.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import (
    CorruptData,
    EmptyIntersection,
    InvalidArgument,
    MissingFile,
    UnsupportedFormat,
)

SUPPORTED_FORMATS = {"PNG", "PPM", "BMP", "JPEG"}


@dataclass(frozen=True, eq=False)
class RgbImage:
    planes: np.ndarray

    def __post_init__(self):
        p = np.array(self.planes, dtype=np.float64)
        if p.ndim != 3 or p.shape[0] != 3:
            raise InvalidArgument(f"expected planes of shape (3, h, w), got {p.shape}")
        if p.shape[1] < 1 or p.shape[2] < 1:
            raise InvalidArgument("image must be at least 1x1")
        if not np.all(np.isfinite(p)):
            raise InvalidArgument("non-finite intensities")
        np.clip(p, 0.0, 1.0, out=p)
        p.setflags(write=False)
        object.__setattr__(self, "planes", p)

    @property
    def width(self) -> int:
        return self.planes.shape[2]

    @property
    def height(self) -> int:
        return self.planes.shape[1]

    @classmethod
    def from_hwc(cls, arr) -> "RgbImage":
        """Build from an ``(h, w, 3)`` or ``(h, w)`` array already in [0, 1]."""
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 2:
            arr = np.repeat(arr[:, :, None], 3, axis=2)
        return cls(np.transpose(arr, (2, 0, 1)))

    def to_hwc(self) -> np.ndarray:
        return np.transpose(self.planes, (1, 2, 0)).copy()

    def same_values(self, other: "RgbImage") -> bool:
        return self.planes.shape == other.planes.shape and bool(
            np.array_equal(self.planes, other.planes)
        )


@dataclass(frozen=True)
class BoundingBox:
    x: float
    y: float
    width: float
    height: float

    @classmethod
    def from_seq(cls, seq) -> "BoundingBox":
        x, y, w, h = (float(v) for v in seq)
        return cls(x, y, w, h)

    def as_list(self) -> list[float]:
        return [self.x, self.y, self.width, self.height]


def load_image(path) -> RgbImage:
    """Read a PNG, PPM or BMP file into an :class:`RgbImage`.

    Grayscale sources are replicated across the three planes and
    intensities are scaled by the source bit depth.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"image not found: {path}")
    try:
        with Image.open(path) as im:
            fmt = im.format
            if fmt not in SUPPORTED_FORMATS:
                raise UnsupportedFormat(f"{path}: format {fmt} not supported")
            im.load()
            arr = _pil_to_unit(im)
    except UnidentifiedImageError as exc:
        raise UnsupportedFormat(f"{path}: unrecognized image data") from exc
    except (OSError, SyntaxError, ValueError) as exc:
        raise CorruptData(f"{path}: {exc}") from exc
    return RgbImage.from_hwc(arr)


def _pil_to_unit(im: Image.Image) -> np.ndarray:
    mode = im.mode
    if mode in ("I;16", "I;16B", "I;16L"):
        return np.asarray(im, dtype=np.float64) / 65535.0
    if mode == "I":
        a = np.asarray(im, dtype=np.float64)
        return a / (65535.0 if a.max(initial=0) > 255 else 255.0)
    if mode == "F":
        return np.clip(np.asarray(im, dtype=np.float64), 0.0, 1.0)
    if mode in ("1", "L", "LA"):
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def save_ppm(img: RgbImage, path) -> None:
    """Write a binary P6 dump (8-bit, rounded)."""
    data = np.round(img.to_hwc() * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{img.width} {img.height}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def _bilinear_axis(n_in: int, n_out: int):
    # half-pixel centres so that n_in == n_out maps every sample onto itself
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    return lo, hi, frac


def resize_exact(img: RgbImage, w: int, h: int) -> RgbImage:
    if w < 1 or h < 1:
        raise InvalidArgument(f"target size must be positive, got {w}x{h}")
    if w == img.width and h == img.height:
        return RgbImage(img.planes)
    p = img.planes
    lo, hi, f = _bilinear_axis(img.height, h)
    p = p[:, lo, :] * (1.0 - f)[None, :, None] + p[:, hi, :] * f[None, :, None]
    lo, hi, f = _bilinear_axis(img.width, w)
    p = p[:, :, lo] * (1.0 - f)[None, None, :] + p[:, :, hi] * f[None, None, :]
    return RgbImage(p)


def resize_shorter_side(img: RgbImage, target: int) -> RgbImage:
    if target < 1:
        raise InvalidArgument(f"target must be >= 1, got {target}")
    w, h = img.width, img.height
    if w <= h:
        new_w, new_h = target, max(1, int(round(h * target / w)))
    else:
        new_w, new_h = max(1, int(round(w * target / h))), target
    return resize_exact(img, new_w, new_h)


def clip_box(box: BoundingBox, width: int, height: int) -> tuple[int, int, int, int]:
    """Integer ``(x0, y0, x1, y1)`` of ``box`` intersected with the image."""
    if box.width < 1 or box.height < 1:
        raise InvalidArgument(f"box must be at least 1x1: {box}")
    x0 = max(0, math.floor(box.x))
    y0 = max(0, math.floor(box.y))
    x1 = min(width, math.ceil(box.x + box.width))
    y1 = min(height, math.ceil(box.y + box.height))
    if x1 <= x0 or y1 <= y0:
        raise EmptyIntersection(f"{box} does not overlap a {width}x{height} image")
    return x0, y0, x1, y1


def crop(img: RgbImage, box: BoundingBox) -> RgbImage:
    x0, y0, x1, y1 = clip_box(box, img.width, img.height)
    return RgbImage(img.planes[:, y0:y1, x0:x1])


def flip_horizontal(img: RgbImage) -> RgbImage:
    return RgbImage(img.planes[:, :, ::-1])
