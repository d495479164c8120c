"""Binary feature cache with a JSON sidecar.

Layout of ``<name>``::

    magic "LCFC" | version u32 | N u32 | D u32 | layout sha256 (32 bytes)
    N x D float32, little-endian, row-major

``<name>.json`` holds the feature layout plus per-row labels, splits and
source paths, and the list of entries that failed extraction.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptData, LayoutMismatch
from .pipeline import FeatureLayout

MAGIC = b"LCFC"
VERSION = 1
HEADER = struct.Struct("<4sIII32s")


@dataclass(eq=False)
class FeatureCache:
    features: np.ndarray  # (N, D) float32
    layout: FeatureLayout
    labels: list = field(default_factory=list)
    splits: list = field(default_factory=list)
    paths: list = field(default_factory=list)
    failures: list = field(default_factory=list)

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype="<f4")
        if self.features.ndim != 2 or self.features.shape[1] != self.layout.dim:
            raise LayoutMismatch(
                f"features {self.features.shape} do not match layout dim {self.layout.dim}"
            )

    def rows(self, split: str) -> np.ndarray:
        return np.array([i for i, s in enumerate(self.splits) if s == split], dtype=np.intp)


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def write_cache(cache: FeatureCache, path) -> None:
    path = Path(path)
    n, d = cache.features.shape
    digest = bytes.fromhex(cache.layout.digest())
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, n, d, digest))
        fh.write(cache.features.tobytes(order="C"))
    meta = {
        "layout": cache.layout.to_json_obj(),
        "layout_hash": cache.layout.digest(),
        "labels": [int(v) for v in cache.labels],
        "splits": list(cache.splits),
        "paths": [str(p) for p in cache.paths],
        "failures": list(cache.failures),
    }
    sidecar_path(path).write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def read_cache(path) -> FeatureCache:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < HEADER.size:
        raise CorruptData(f"{path}: truncated header")
    magic, version, n, d, digest = HEADER.unpack_from(data)
    if magic != MAGIC or version != VERSION:
        raise CorruptData(f"{path}: not a feature cache")
    if len(data) != HEADER.size + 4 * n * d:
        raise CorruptData(f"{path}: payload length does not match {n}x{d}")
    feats = np.frombuffer(data, dtype="<f4", offset=HEADER.size).reshape(n, d)
    meta = json.loads(sidecar_path(path).read_text())
    layout = FeatureLayout.from_json_obj(meta["layout"])
    if layout.digest() != digest.hex():
        raise LayoutMismatch(f"{path}: sidecar layout does not match the cache header")
    return FeatureCache(feats.copy(), layout, meta["labels"], meta["splits"], meta["paths"],
                        meta.get("failures", []))
