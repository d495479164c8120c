"""Head direction voting and statistical part-region proposal.

Heads are classified as facing left, middle or right by a k-nearest-neighbour
vote over HOG descriptors.  Left-facing heads are mirrored so every non-middle
head faces right; part locations are then modelled by per-axis Gaussians in a
normalised square head frame and proposed as ``mu +/- 3 sigma`` intervals.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    EmptyTrainingSet,
    InsufficientSamples,
    InvalidArgument,
    InvalidBox,
    NoEyeVisible,
    UnfittedModel,
)
from .imageio import BoundingBox, RgbImage, crop, flip_horizontal, resize_exact

PART_NAMES = ("eye", "beak", "forehead", "crown")
FRAME = 150
SIGMA_FLOOR = 1.0

HOG_SIZE = 64
HOG_CELL = 8
HOG_BINS = 9
HOG_BLOCK = 2
HOG_DIM = ((HOG_SIZE // HOG_CELL) - HOG_BLOCK + 1) ** 2 * HOG_BLOCK * HOG_BLOCK * HOG_BINS


class Direction(str, enum.Enum):
    LEFT = "left"
    MIDDLE = "middle"
    RIGHT = "right"


def groundtruth_direction(left_eye_visible: bool, right_eye_visible: bool) -> Direction:
    if left_eye_visible and right_eye_visible:
        return Direction.MIDDLE
    if right_eye_visible:
        return Direction.RIGHT
    if left_eye_visible:
        return Direction.LEFT
    raise NoEyeVisible("neither eye is visible")


def compute_voting_descriptor(head: RgbImage) -> np.ndarray:
    """HOG of the head: 64x64 luma, 8x8 cells, 9 unsigned bins, 2x2 blocks.

    Blocks overlap with a one-cell stride and are L2-normalised; an all-zero
    block stays zero.  Output length is 1764.
    """
    img = resize_exact(head, HOG_SIZE, HOG_SIZE)
    gray = 0.299 * img.planes[0] + 0.587 * img.planes[1] + 0.114 * img.planes[2]
    gy, gx = np.gradient(gray)
    mag = np.hypot(gx, gy)
    ang = np.mod(np.arctan2(gy, gx), np.pi)
    bins = np.minimum((ang * (HOG_BINS / np.pi)).astype(np.intp), HOG_BINS - 1)
    nc = HOG_SIZE // HOG_CELL
    cells = np.zeros((nc, nc, HOG_BINS))
    ci = np.arange(HOG_SIZE) // HOG_CELL
    np.add.at(cells, (ci[:, None], ci[None, :], bins), mag)
    nb = nc - HOG_BLOCK + 1
    out = np.empty((nb, nb, HOG_BLOCK * HOG_BLOCK * HOG_BINS))
    for i in range(nb):
        for j in range(nb):
            v = cells[i:i + HOG_BLOCK, j:j + HOG_BLOCK].ravel()
            n = np.sqrt(np.sum(v * v))
            out[i, j] = v / n if n > 1e-12 else 0.0
    return out.ravel()


def vote_direction(test_desc, train_descs, train_dirs, k: int = 3) -> Direction:
    """Majority direction among the ``k`` nearest training descriptors.

    Without a strict majority the single nearest neighbour decides.  Distance
    ties go to the lower training index.
    """
    if k < 1:
        raise InvalidArgument("k must be >= 1")
    train = np.asarray(train_descs, dtype=np.float64)
    if train.ndim != 2 or train.shape[0] == 0:
        raise EmptyTrainingSet("no training descriptors")
    diff = train - np.asarray(test_desc, dtype=np.float64)[None, :]
    dist = np.sum(diff * diff, axis=1)
    nearest = np.argsort(dist, kind="stable")[:k]
    votes = [Direction(train_dirs[i]) for i in nearest]
    for d in Direction:
        if 2 * votes.count(d) > len(votes):
            return d
    return votes[0]


def normalize_part_coords(part_xy, bbox: BoundingBox) -> tuple[float, float]:
    """Part location as a fraction of the head box: box corners map to (0,0) and (1,1)."""
    if bbox.width < 1 or bbox.height < 1:
        raise InvalidBox(f"head box must be at least 1x1: {bbox}")
    x, y = part_xy
    return (x - bbox.x) / bbox.width, (y - bbox.y) / bbox.height


@dataclass(frozen=True)
class AxisStats:
    mu: float
    sigma: float
    n: int


@dataclass(frozen=True)
class PartRegion:
    part: str
    x_range: tuple[float, float]
    y_range: tuple[float, float]


@dataclass(frozen=True)
class PartModel:
    parts: dict  # part name -> (AxisStats for x, AxisStats for y)
    frame: int = FRAME

    def to_json_obj(self) -> dict:
        return {
            "frame": self.frame,
            "parts": {
                name: {"x": vars(sx), "y": vars(sy)} for name, (sx, sy) in self.parts.items()
            },
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "PartModel":
        parts = {
            name: (AxisStats(**axes["x"]), AxisStats(**axes["y"]))
            for name, axes in obj["parts"].items()
        }
        return cls(parts, int(obj.get("frame", FRAME)))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json_obj(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "PartModel":
        return cls.from_json_obj(json.loads(Path(path).read_text()))


def _axis(values: np.ndarray) -> AxisStats:
    sigma = float(np.std(values))
    return AxisStats(float(np.mean(values)), max(sigma, SIGMA_FLOOR), int(values.size))


def fit_part_gaussians(samples: dict, frame: int = FRAME) -> PartModel:
    """Fit ``mu`` and population ``sigma`` per part and axis in frame pixels.

    ``samples`` maps part names to sequences of ``(ratio_x, ratio_y)``.
    Sigmas below one pixel are raised to one pixel.
    """
    if not samples:
        raise InsufficientSamples("no part samples")
    parts = {}
    for name, pts in samples.items():
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2) * frame
        if pts.shape[0] < 2:
            raise InsufficientSamples(f"part {name!r} has {pts.shape[0]} samples, need 2")
        parts[name] = (_axis(pts[:, 0]), _axis(pts[:, 1]))
    return PartModel(parts, frame)


def propose_region(model: PartModel, part: str) -> PartRegion:
    if model is None or part not in model.parts:
        raise UnfittedModel(f"no statistics for part {part!r}")
    sx, sy = model.parts[part]
    hi = model.frame - 1
    clip = lambda v: float(min(max(v, 0.0), hi))  # noqa: E731
    return PartRegion(
        part,
        (clip(sx.mu - 3 * sx.sigma), clip(sx.mu + 3 * sx.sigma)),
        (clip(sy.mu - 3 * sy.sigma), clip(sy.mu + 3 * sy.sigma)),
    )


@dataclass(frozen=True, eq=False)
class AlignedHead:
    image: RgbImage
    direction: Direction
    regions: tuple[PartRegion, ...]


def align_head(head: RgbImage, direction, model: PartModel | None) -> AlignedHead:
    """Mirror left-facing heads; emit part regions unless the head faces the viewer."""
    direction = Direction(direction)
    if direction is Direction.MIDDLE:
        return AlignedHead(head, direction, ())
    if direction is Direction.LEFT:
        head = flip_horizontal(head)
    if model is None:
        raise UnfittedModel("part model required for non-middle heads")
    parts = [p for p in PART_NAMES if p in model.parts]
    return AlignedHead(head, direction, tuple(propose_region(model, p) for p in parts))


def part_crops(aligned: AlignedHead, model: PartModel, out_size: int = FRAME) -> dict:
    """Square crops with a side of a quarter of the frame, centred on each part mean.

    The head is first resized to the model frame; crops are resized to
    ``out_size``.  Middle heads yield the whole head under every part name.
    """
    frame = model.frame if model is not None else FRAME
    head = resize_exact(aligned.image, frame, frame)
    if aligned.direction is Direction.MIDDLE:
        whole = resize_exact(head, out_size, out_size)
        return {p: whole for p in PART_NAMES}
    side = frame / 4.0
    out = {}
    for region in aligned.regions:
        sx, sy = model.parts[region.part]
        box = BoundingBox(sx.mu - side / 2, sy.mu - side / 2, side, side)
        out[region.part] = resize_exact(crop(head, box), out_size, out_size)
    return out
