"""Layered feature extraction: encode, max-pool, re-encode, pyramid-pool.

A pipeline turns one image into a :class:`PyramidFeature`.  Layer 1 encodes
dense descriptors and max-pools the codes over ``pool_size`` blocks; an
optional layer 2 treats each L2-normalised pooled vector as a descriptor and
repeats the procedure.  Every layer's final grid goes through spatial pyramid
pooling and the layer segments are concatenated, layer 1 first.

Pooling always acts on coefficient magnitudes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .descriptors import DescriptorField, DescriptorGrid, DescriptorParams
from .errors import DimensionMismatch, InconsistentLayout, InvalidArgument
from .llc import EncoderParams, SparseCodeGrid, encode_batch


@dataclass(frozen=True)
class LayerConfig:
    dict_size: int
    sparsity: int
    pool_size: int

    def __post_init__(self):
        if min(self.dict_size, self.sparsity, self.pool_size) < 1:
            raise InvalidArgument(f"layer values must be positive: {self}")


@dataclass(frozen=True)
class PipelineConfig:
    name: str = "A1"
    scale_patch: int = 16
    layers: int = 1
    layer1: LayerConfig = LayerConfig(2500, 2, 8)
    layer2: LayerConfig | None = None
    pyramid_levels: tuple[int, ...] = (1, 2, 4)
    beta: float = 1e-4

    def __post_init__(self):
        if self.layers not in (1, 2):
            raise InvalidArgument("layers must be 1 or 2")
        if self.layers == 2 and self.layer2 is None:
            raise InvalidArgument("two-layer pipeline needs layer2")
        if self.layers == 1 and self.layer2 is not None:
            raise InvalidArgument("single-layer pipeline must not set layer2")
        if not self.pyramid_levels or min(self.pyramid_levels) < 1:
            raise InvalidArgument("pyramid levels must be positive")
        object.__setattr__(self, "pyramid_levels", tuple(int(v) for v in self.pyramid_levels))

    @property
    def layer_configs(self) -> list[LayerConfig]:
        return [self.layer1] if self.layers == 1 else [self.layer1, self.layer2]

    @property
    def descriptor_params(self) -> DescriptorParams:
        return DescriptorParams(patch_size=self.scale_patch)

    def encoder(self, layer: int) -> EncoderParams:
        return EncoderParams(sparsity_k=self.layer_configs[layer].sparsity, beta=self.beta)

    @property
    def feature_dim(self) -> int:
        cells = sum(level * level for level in self.pyramid_levels)
        return cells * sum(lc.dict_size for lc in self.layer_configs)

    @classmethod
    def preset(cls, name: str) -> "PipelineConfig":
        """The four pipelines A1, B1 (one layer) and A2, B2 (two layers)."""
        patch = {"A": 16, "B": 32}.get(name[:1])
        if patch is None:
            raise InvalidArgument(f"unknown preset {name!r}")
        if name[1:] == "1":
            return cls(name, patch, 1, LayerConfig(2500, 2, 8))
        if name[1:] == "2":
            return cls(name, patch, 2, LayerConfig(800, 2, 8), LayerConfig(4000, 8, 1))
        raise InvalidArgument(f"unknown preset {name!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        """Build from config JSON; a preset ``name`` supplies the defaults."""
        name = d.get("name", "A1")
        base = cls.preset(name) if name in ("A1", "B1", "A2", "B2") else cls()
        layers = int(d.get("layers", base.layers))
        # layer blocks override field by field on top of the preset
        layer1 = LayerConfig(**{**asdict(base.layer1), **d.get("layer1", {})})
        if layers == 2:
            layer2 = LayerConfig(**{**asdict(base.layer2 or LayerConfig(4000, 8, 1)), **d.get("layer2", {})})
        else:
            layer2 = None
        return cls(
            name=name,
            scale_patch=int(d.get("scale_patch", base.scale_patch)),
            layers=layers,
            layer1=layer1,
            layer2=layer2,
            pyramid_levels=tuple(d.get("pyramid_levels", base.pyramid_levels)),
            beta=float(d.get("beta", base.beta)),
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pyramid_levels"] = list(self.pyramid_levels)
        return d


@dataclass(frozen=True, eq=False)
class PooledGrid:
    data: np.ndarray  # (rows, cols, dim), non-negative

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class Segment:
    pipeline: str
    layer: int
    scale: int
    level: int
    cell_row: int
    cell_col: int
    offset: int
    dim: int


@dataclass(frozen=True)
class FeatureLayout:
    segments: tuple[Segment, ...] = field(default_factory=tuple)

    @property
    def dim(self) -> int:
        return sum(s.dim for s in self.segments)

    @property
    def pipelines(self) -> list[str]:
        seen: list[str] = []
        for s in self.segments:
            if s.pipeline not in seen:
                seen.append(s.pipeline)
        return seen

    def pipeline_dims(self) -> dict[str, int]:
        dims: dict[str, int] = {}
        for s in self.segments:
            dims[s.pipeline] = dims.get(s.pipeline, 0) + s.dim
        return dims

    def pipeline_slice(self, name: str) -> slice:
        segs = [s for s in self.segments if s.pipeline == name]
        if not segs:
            raise KeyError(name)
        return slice(segs[0].offset, segs[-1].offset + segs[-1].dim)

    def to_json_obj(self) -> dict:
        return {
            "pipelines": self.pipelines,
            "dims": self.pipeline_dims(),
            "segments": [asdict(s) for s in self.segments],
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "FeatureLayout":
        return cls(tuple(Segment(**s) for s in obj["segments"]))

    def digest(self) -> str:
        blob = json.dumps([asdict(s) for s in self.segments], sort_keys=True,
                          separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def renamed(self, name: str, offset: int = 0) -> "FeatureLayout":
        return FeatureLayout(tuple(
            replace(s, pipeline=name, offset=s.offset + offset) for s in self.segments
        ))


@dataclass(frozen=True, eq=False)
class PyramidFeature:
    values: np.ndarray
    layout: FeatureLayout

    def __post_init__(self):
        if self.values.shape != (self.layout.dim,):
            raise InconsistentLayout(
                f"values of length {self.values.shape} vs layout dim {self.layout.dim}"
            )


def _densify_max(indices, weights, block_r, block_c, out_shape, m):
    out = np.zeros(out_shape + (m,))
    r = block_r[:, :, None]
    c = block_c[:, :, None]
    np.maximum.at(out, (np.broadcast_to(r, indices.shape), np.broadcast_to(c, indices.shape), indices),
                  np.abs(weights))
    return out


def max_pool(grid: SparseCodeGrid, pool_size: int) -> PooledGrid:
    """Blockwise max of ``|coefficient|``; trailing blocks may be smaller."""
    if pool_size < 1:
        raise InvalidArgument("pool_size must be >= 1")
    rows, cols = grid.rows, grid.cols
    out_r = -(-rows // pool_size)
    out_c = -(-cols // pool_size)
    br, bc = np.meshgrid(np.arange(rows) // pool_size, np.arange(cols) // pool_size, indexing="ij")
    data = _densify_max(grid.indices, np.asarray(grid.weights), br, bc, (out_r, out_c), grid.codebook_size)
    return PooledGrid(data)


def layer2_inputs(pooled: PooledGrid) -> DescriptorGrid:
    """L2-normalise every pooled vector; all-zero vectors stay zero."""
    data = pooled.data
    norms = np.sqrt(np.sum(data * data, axis=2, keepdims=True))
    out = np.divide(data, norms, out=np.zeros_like(data), where=norms > 0)
    return DescriptorGrid(out)


def _even_bounds(n: int, parts: int) -> list[tuple[int, int]]:
    base, extra = divmod(n, parts)
    bounds, start = [], 0
    for i in range(parts):
        size = base + (1 if i < extra else 0)
        bounds.append((start, start + size))
        start += size
    return bounds


def spatial_pyramid_pool(grid, levels=(1, 2, 4), *, pipeline: str = "", layer: int = 1,
                         scale: int = 0, offset: int = 0) -> PyramidFeature:
    """Max-pool ``grid`` over ``L x L`` partitions for each level ``L``.

    Cells are emitted level-major then row-major and each cell vector is
    L2-normalised.  Remainder rows/columns go to the leading cells; a cell
    that receives no grid positions is a zero vector.
    """
    if isinstance(grid, SparseCodeGrid):
        grid = max_pool(grid, 1)
    data = grid.data
    dim = data.shape[2]
    parts, segs = [], []
    pos = offset
    for level in levels:
        rb = _even_bounds(data.shape[0], level)
        cb = _even_bounds(data.shape[1], level)
        for i, (r0, r1) in enumerate(rb):
            for j, (c0, c1) in enumerate(cb):
                block = data[r0:r1, c0:c1].reshape(-1, dim)
                v = np.abs(block).max(axis=0) if block.shape[0] else np.zeros(dim)
                n = np.sqrt(np.sum(v * v))
                parts.append(v / n if n > 0 else v)
                segs.append(Segment(pipeline, layer, scale, level, i, j, pos, dim))
                pos += dim
    values = np.concatenate(parts) if parts else np.zeros(0)
    return PyramidFeature(values, FeatureLayout(tuple(segs)))


def check_codebooks(config: PipelineConfig, codebooks) -> None:
    layers = config.layer_configs
    if len(codebooks) != len(layers):
        raise DimensionMismatch(f"{config.name}: need {len(layers)} codebooks, got {len(codebooks)}")
    expected_h = config.descriptor_params.dim
    for i, (lc, cb) in enumerate(zip(layers, codebooks), 1):
        if cb.dim_h != expected_h:
            raise DimensionMismatch(
                f"{config.name} layer {i}: codebook dim {cb.dim_h}, expected {expected_h}"
            )
        if cb.size_m != lc.dict_size:
            raise DimensionMismatch(
                f"{config.name} layer {i}: codebook has {cb.size_m} atoms, config says {lc.dict_size}"
            )
        expected_h = cb.size_m


def layer1_pooled(img, config: PipelineConfig, codebook, threads: int = 1) -> PooledGrid:
    """Layer-1 codes of ``img`` max-pooled over ``pool_size`` blocks.

    Processed one band of ``pool_size`` grid rows at a time to bound memory.
    """
    field_ = DescriptorField(img, config.descriptor_params)
    rows, cols = field_.shape
    lc = config.layer1
    enc = config.encoder(0)
    out_c = -(-cols // lc.pool_size)
    bc = np.arange(cols) // lc.pool_size
    bands = []
    for r0 in range(0, rows, lc.pool_size):
        r1 = min(rows, r0 + lc.pool_size)
        desc = field_.rows(r0, r1).reshape(-1, field_.params.dim)
        idx, w = encode_batch(desc, codebook, enc, threads=threads)
        idx = idx.reshape(r1 - r0, cols, -1)
        w = w.reshape(r1 - r0, cols, -1)
        br = np.zeros((r1 - r0, cols), dtype=np.intp)
        bcc = np.broadcast_to(bc, (r1 - r0, cols))
        bands.append(_densify_max(idx, w, br, bcc, (1, out_c), codebook.size_m)[0])
    return PooledGrid(np.stack(bands))


def layer2_pooled(pooled1: PooledGrid, config: PipelineConfig, codebook, threads: int = 1) -> PooledGrid:
    grid = layer2_inputs(pooled1)
    idx, w = encode_batch(grid.flat(), codebook, config.encoder(1), threads=threads)
    shape = (grid.rows, grid.cols, -1)
    codes = SparseCodeGrid(idx.reshape(shape), w.reshape(shape), codebook.size_m)
    return max_pool(codes, config.layer2.pool_size)


def extract_pipeline_features(img, config: PipelineConfig, codebooks, threads: int = 1) -> PyramidFeature:
    check_codebooks(config, codebooks)
    grids = [layer1_pooled(img, config, codebooks[0], threads)]
    if config.layers == 2:
        grids.append(layer2_pooled(grids[0], config, codebooks[1], threads))
    parts, segs = [], []
    offset = 0
    for layer, g in enumerate(grids, 1):
        f = spatial_pyramid_pool(g, config.pyramid_levels, pipeline=config.name, layer=layer,
                                 scale=config.scale_patch, offset=offset)
        parts.append(f.values)
        segs.extend(f.layout.segments)
        offset += f.values.size
    return PyramidFeature(np.concatenate(parts), FeatureLayout(tuple(segs)))


def combine_scales(features) -> PyramidFeature:
    """Concatenate per-pipeline features, each scaled to unit L2 norm first."""
    features = list(features)
    if not features:
        raise InconsistentLayout("no features to combine")
    names: list[str] = []
    parts, segs = [], []
    offset = 0
    for f in features:
        for name in f.layout.pipelines:
            if name in names:
                raise InconsistentLayout(f"pipeline {name!r} appears twice")
            names.append(name)
        n = np.sqrt(np.sum(f.values * f.values))
        parts.append(f.values / n if n > 0 else f.values.copy())
        base = f.layout.segments[0].offset if f.layout.segments else 0
        segs.extend(replace(s, offset=s.offset - base + offset) for s in f.layout.segments)
        offset += f.values.size
    return PyramidFeature(np.concatenate(parts), FeatureLayout(tuple(segs)))
