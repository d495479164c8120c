"""JSON Lines dataset manifests.

One object per line::

    {"image_path": "img/0001.png", "label": 3, "split": "train",
     "bbox": [x, y, w, h], "head_bbox": [x, y, w, h],
     "part_points": {"eye": [x, y], ...},
     "eye_visibility": {"left": false, "right": true}, "direction": "right"}

Only ``image_path``, ``label`` and ``split`` are required; unknown keys are
ignored.  Relative image paths resolve against the manifest's directory.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from .errors import MissingFile, MissingField, ParseError
from .imageio import BoundingBox

SPLITS = ("train", "val", "test")
REQUIRED = ("image_path", "label", "split")


@dataclass(frozen=True)
class ManifestEntry:
    image_path: Path
    label: int
    split: str
    line: int = 0
    bbox: BoundingBox | None = None
    head_bbox: BoundingBox | None = None
    part_points: dict = field(default_factory=dict)
    eye_visibility: tuple[bool, bool] | None = None  # (left, right)
    direction: str | None = None


def _box(obj, key, line):
    v = obj.get(key)
    if v is None:
        return None
    try:
        box = BoundingBox.from_seq(v)
    except (TypeError, ValueError) as exc:
        raise ParseError(line, f"{key} must be [x, y, w, h]") from exc
    return box


def _entry(obj, line: int, root: Path) -> ManifestEntry:
    if not isinstance(obj, dict):
        raise ParseError(line, "expected a JSON object")
    for key in REQUIRED:
        if key not in obj or obj[key] is None:
            raise MissingField(line, key)
    split = obj["split"]
    if split not in SPLITS:
        raise ParseError(line, f"split must be one of {SPLITS}, got {split!r}")
    try:
        label = int(obj["label"])
    except (TypeError, ValueError) as exc:
        raise ParseError(line, "label must be an integer") from exc
    points = {}
    for name, xy in (obj.get("part_points") or {}).items():
        try:
            x, y = xy
            points[name] = (float(x), float(y))
        except (TypeError, ValueError) as exc:
            raise ParseError(line, f"part point {name!r} must be [x, y]") from exc
    eyes = obj.get("eye_visibility")
    if isinstance(eyes, dict):
        eyes = (bool(eyes.get("left", False)), bool(eyes.get("right", False)))
    elif eyes is not None:
        eyes = (bool(eyes[0]), bool(eyes[1]))
    direction = obj.get("direction")
    if direction is not None and direction not in ("left", "middle", "right"):
        raise ParseError(line, f"bad direction {direction!r}")
    path = Path(obj["image_path"])
    if not path.is_absolute():
        path = root / path
    return ManifestEntry(path, label, split, line, _box(obj, "bbox", line),
                         _box(obj, "head_bbox", line), points, eyes, direction)


def parse_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"manifest not found: {path}")
    root = path.parent
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, text in enumerate(fh, 1):
            if not text.strip():
                continue
            try:
                obj = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ParseError(lineno, f"invalid JSON: {exc.msg}") from exc
            entries.append(_entry(obj, lineno, root))
    return entries


def split_counts(entries) -> tuple[int, int, int]:
    """``(train, val, test)`` entry counts."""
    c = Counter(e.split for e in entries)
    return c["train"], c["val"], c["test"]
