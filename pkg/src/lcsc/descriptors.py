"""Dense local orientation histograms over R, G and B planes.

Each patch is split into ``cell_grid x cell_grid`` cells.  Every pixel votes
its gradient magnitude into the orientation bin containing its angle (hard
assignment, no spatial weighting), per channel.  Cell histograms are laid out
as ``channel -> cell row -> cell column -> bin`` and the whole vector is
L2-normalised, or left all-zero for flat patches.

Cell sums are accumulated by repeated shifted additions instead of integral
images so that a value depends only on the pixels under its cell; this keeps
grids of translated content bit-identical on their overlap.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ImageTooSmall, InvalidArgument, OutOfBounds
from .imageio import RgbImage

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class DescriptorParams:
    patch_size: int = 16
    cell_grid: int = 4
    orientation_bins: int = 8
    stride: int = 1
    norm_epsilon: float = 1e-10

    def __post_init__(self):
        if self.patch_size < 1 or self.cell_grid < 1:
            raise InvalidArgument("patch_size and cell_grid must be positive")
        if self.patch_size % self.cell_grid:
            raise InvalidArgument(
                f"patch_size {self.patch_size} not divisible by cell_grid {self.cell_grid}"
            )
        if self.orientation_bins < 2:
            raise InvalidArgument("orientation_bins must be >= 2")
        if self.stride < 1:
            raise InvalidArgument("stride must be >= 1")
        if not self.norm_epsilon > 0:
            raise InvalidArgument("norm_epsilon must be positive")

    @property
    def cell_size(self) -> int:
        return self.patch_size // self.cell_grid

    @property
    def dim(self) -> int:
        return self.cell_grid * self.cell_grid * self.orientation_bins * 3

    def grid_shape(self, height: int, width: int) -> tuple[int, int]:
        if height < self.patch_size or width < self.patch_size:
            raise ImageTooSmall(
                f"{width}x{height} image is smaller than patch size {self.patch_size}"
            )
        return (
            (height - self.patch_size) // self.stride + 1,
            (width - self.patch_size) // self.stride + 1,
        )


@dataclass(frozen=True, eq=False)
class DescriptorGrid:
    """Row-major grid of descriptors, ``data`` has shape ``(rows, cols, dim)``.

    ``params`` and ``image_size`` are ``None`` for grids that were not produced
    from pixels (layer-2 inputs).
    """

    data: np.ndarray
    params: DescriptorParams | None = None
    image_size: tuple[int, int] | None = None

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]

    def flat(self) -> np.ndarray:
        """Descriptors as an ``(rows * cols, dim)`` matrix."""
        return self.data.reshape(-1, self.dim)


class GradientMaps(NamedTuple):
    magnitude: np.ndarray  # (3, h, w), >= 0
    orientation: np.ndarray  # (3, h, w), in [0, 2*pi)


def gradient_maps(img: RgbImage) -> GradientMaps:
    """Per-channel gradients: central differences inside, one-sided at borders."""
    if img.width < 3 or img.height < 3:
        raise ImageTooSmall(f"gradient needs at least 3x3, got {img.width}x{img.height}")
    gy, gx = np.gradient(img.planes, axis=(1, 2))
    mag = np.hypot(gx, gy)
    ori = np.mod(np.arctan2(gy, gx), TWO_PI)
    ori[ori >= TWO_PI] = 0.0
    return GradientMaps(mag, ori)


def _box_sum(a: np.ndarray, size: int) -> np.ndarray:
    """Sum over every ``size x size`` window of the last two axes."""
    h, w = a.shape[-2:]
    rows = a[..., 0 : h - size + 1, :].copy()
    for d in range(1, size):
        rows += a[..., d : h - size + 1 + d, :]
    out = rows[..., 0 : w - size + 1].copy()
    for d in range(1, size):
        out += rows[..., d : w - size + 1 + d]
    return out


class DescriptorField:
    """Descriptors of one image, computable at any valid patch position.

    Holds per-cell orientation histograms for every pixel offset so that the
    full grid, a band of grid rows, or a random subset of positions can be
    produced from the same numbers.
    """

    def __init__(self, img: RgbImage, params: DescriptorParams = DescriptorParams()):
        self.params = params
        self.image_size = (img.width, img.height)
        self.shape = params.grid_shape(img.height, img.width)
        maps = gradient_maps(img)
        self.cell_sums = _cell_histograms(maps, params)

    def at(self, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
        """Descriptors with patch top-left pixels ``(xs, ys)``, shape ``(n, dim)``."""
        ys = np.asarray(ys, dtype=np.intp).ravel()
        xs = np.asarray(xs, dtype=np.intp).ravel()
        w, h = self.image_size
        p = self.params.patch_size
        if ys.size and (
            ys.min() < 0 or xs.min() < 0 or ys.max() > h - p or xs.max() > w - p
        ):
            raise OutOfBounds("patch position outside the image")
        return _gather(self.cell_sums, ys, xs, self.params)

    def rows(self, r0: int, r1: int) -> np.ndarray:
        """Grid rows ``r0:r1`` as an array ``(r1 - r0, cols, dim)``."""
        st = self.params.stride
        n_cols = self.shape[1]
        rr, cc = np.meshgrid(np.arange(r0, r1), np.arange(n_cols), indexing="ij")
        d = self.at(rr * st, cc * st)
        return d.reshape(r1 - r0, n_cols, self.params.dim)

    def grid(self) -> DescriptorGrid:
        return DescriptorGrid(self.rows(0, self.shape[0]), self.params, self.image_size)


def _cell_histograms(maps: GradientMaps, params: DescriptorParams) -> np.ndarray:
    nb = params.orientation_bins
    bins = np.floor(maps.orientation * (nb / TWO_PI)).astype(np.intp)
    np.clip(bins, 0, nb - 1, out=bins)
    votes = np.zeros((3, nb) + maps.magnitude.shape[1:], dtype=np.float64)
    for b in range(nb):
        votes[:, b] = np.where(bins == b, maps.magnitude, 0.0)
    return _box_sum(votes, params.cell_size)


def _gather(cell_sums, ys, xs, params: DescriptorParams) -> np.ndarray:
    g, s, nb = params.cell_grid, params.cell_size, params.orientation_bins
    n = ys.size
    out = np.empty((n, 3, g, g, nb), dtype=np.float64)
    for i in range(g):
        for j in range(g):
            # (3, nb, n) -> (n, 3, nb)
            v = cell_sums[:, :, ys + i * s, xs + j * s]
            out[:, :, i, j, :] = np.moveaxis(v, -1, 0)
    out = out.reshape(n, params.dim)
    return _normalize_rows(out, params.norm_epsilon)


def _normalize_rows(v: np.ndarray, eps: float) -> np.ndarray:
    norms = np.sqrt(np.sum(v * v, axis=1))
    flat = norms < eps
    norms[flat] = 1.0
    v = v / norms[:, None]
    v[flat] = 0.0
    return v


def patch_descriptor(maps: GradientMaps, top_left, params: DescriptorParams = DescriptorParams()):
    """Descriptor of the patch whose top-left pixel is ``top_left = (x, y)``."""
    x, y = int(top_left[0]), int(top_left[1])
    h, w = maps.magnitude.shape[1:]
    p = params.patch_size
    if x < 0 or y < 0 or x + p > w or y + p > h:
        raise OutOfBounds(f"patch at ({x}, {y}) exceeds {w}x{h} field")
    sub = GradientMaps(
        maps.magnitude[:, y : y + p, x : x + p], maps.orientation[:, y : y + p, x : x + p]
    )
    sums = _cell_histograms(sub, params)
    zero = np.zeros(1, dtype=np.intp)
    return _gather(sums, zero, zero, params)[0]


def dense_grid(img: RgbImage, params: DescriptorParams = DescriptorParams()) -> DescriptorGrid:
    return DescriptorField(img, params).grid()
