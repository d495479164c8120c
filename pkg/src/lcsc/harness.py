"""End-to-end commands: codebook training, extraction, evaluation, part fitting.

Every command is a plain function returning the paths it wrote so the CLI
and the tests drive the same code.  Output files contain no timestamps and
JSON is written with sorted keys, so reruns are byte-identical.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .cache import FeatureCache, read_cache, write_cache
from .classifier import TrainParams, predict, train_ovr
from .codebook import Codebook, LearnerParams, learn_codebook
from .descriptors import DescriptorField, DescriptorParams
from .errors import (
    InsufficientSamples,
    InvalidArgument,
    LayoutMismatch,
    LcscError,
    NoEyeVisible,
    NoValidDescriptors,
)
from .imageio import RgbImage, crop, load_image, resize_exact, resize_shorter_side
from .manifest import ManifestEntry
from .parts import (
    PART_NAMES,
    Direction,
    PartModel,
    align_head,
    compute_voting_descriptor,
    fit_part_gaussians,
    groundtruth_direction,
    normalize_part_coords,
    part_crops,
    vote_direction,
)
from .pipeline import (
    FeatureLayout,
    PipelineConfig,
    PyramidFeature,
    combine_scales,
    check_codebooks,
    extract_pipeline_features,
    layer1_pooled,
    layer2_inputs,
)

log = logging.getLogger(__name__)

# number of random positions scored per batch while looking for non-flat patches
_SAMPLE_BATCH = 4


@dataclass(frozen=True)
class ImagePrep:
    use_bbox: bool = True
    shorter_side: int | None = None
    exact: tuple[int, int] | None = None


@dataclass(frozen=True)
class AlignmentConfig:
    enabled: bool = False
    part_model: str | None = None
    k: int = 3


@dataclass(frozen=True)
class HarnessConfig:
    pipeline: PipelineConfig = PipelineConfig()
    learner: LearnerParams = LearnerParams()
    per_image: int = 200
    codebook_split: str = "train"
    image_prep: ImagePrep = ImagePrep()
    classifier: TrainParams = TrainParams()
    alignment: AlignmentConfig = AlignmentConfig()
    raw: dict = field(default_factory=dict, compare=False)

    @classmethod
    def from_dict(cls, d: dict) -> "HarnessConfig":
        pipe = dict(d.get("pipeline", {}))
        if "encoder" in d and "beta" in d["encoder"]:
            pipe.setdefault("beta", d["encoder"]["beta"])
        prep = dict(d.get("image_prep", {}))
        if prep.get("exact") is not None:
            prep["exact"] = tuple(prep["exact"])
        return cls(
            pipeline=PipelineConfig.from_dict(pipe),
            learner=LearnerParams.from_dict(d.get("learner", {})),
            per_image=int(d.get("per_image", 200)),
            codebook_split=d.get("codebook_split", "train"),
            image_prep=ImagePrep(**prep),
            classifier=TrainParams(**d.get("classifier", {})),
            alignment=AlignmentConfig(**d.get("alignment", {})),
            raw=d,
        )

    @classmethod
    def load(cls, path) -> "HarnessConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def digest(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def prepare_image(entry: ManifestEntry, prep: ImagePrep) -> RgbImage:
    img = load_image(entry.image_path)
    if prep.use_bbox and entry.bbox is not None:
        img = crop(img, entry.bbox)
    if prep.exact is not None:
        img = resize_exact(img, *prep.exact)
    elif prep.shorter_side is not None:
        img = resize_shorter_side(img, prep.shorter_side)
    return img


def entry_direction(entry: ManifestEntry) -> Direction | None:
    """Ground-truth direction from the manifest, if it carries one."""
    if entry.direction is not None:
        return Direction(entry.direction)
    if entry.eye_visibility is not None:
        try:
            return groundtruth_direction(*entry.eye_visibility)
        except NoEyeVisible:
            return None
    return None


class Aligner:
    """Direction voting against the training heads plus the fitted part model."""

    def __init__(self, train_descs: np.ndarray, train_dirs: list, model: PartModel, k: int = 3):
        self.train_descs = train_descs
        self.train_dirs = train_dirs
        self.model = model
        self.k = k

    @classmethod
    def from_entries(cls, entries, model: PartModel | None, k: int = 3, threads: int = 1) -> "Aligner":
        train = [e for e in entries if e.split == "train" and e.head_bbox is not None
                 and entry_direction(e) is not None]
        if model is None:
            model = fit_parts_model(entries)
        descs = _map(lambda e: compute_voting_descriptor(crop(load_image(e.image_path), e.head_bbox)),
                     train, threads)
        return cls(np.asarray(descs), [entry_direction(e).value for e in train], model, k)

    def direction(self, entry: ManifestEntry, head: RgbImage, use_truth: bool) -> tuple[Direction, bool]:
        truth = entry_direction(entry) if use_truth else None
        if truth is not None:
            return truth, False
        d = vote_direction(compute_voting_descriptor(head), self.train_descs, self.train_dirs, self.k)
        return d, True

    def part_images(self, entry: ManifestEntry) -> dict:
        head = crop(load_image(entry.image_path), entry.head_bbox)
        direction, _ = self.direction(entry, head, entry.split == "train")
        return part_crops(align_head(head, direction, self.model), self.model)


def _map(fn, items, threads: int):
    items = list(items)
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def source_images(entry: ManifestEntry, cfg: HarnessConfig, aligner: Aligner | None) -> dict:
    """Images a manifest entry contributes, keyed by pipeline suffix.

    The plain path yields the prepared image under ``""``; the aligned path
    yields one image per head part.
    """
    if aligner is not None and entry.head_bbox is not None:
        return aligner.part_images(entry)
    return {"": prepare_image(entry, cfg.image_prep)}


def _draw_nonzero(field_: DescriptorField, count: int, rng: np.random.Generator) -> np.ndarray:
    rows, cols = field_.shape
    st = field_.params.stride
    perm = rng.permutation(rows * cols)
    found = []
    have = 0
    step = max(_SAMPLE_BATCH * count, 64)
    for s in range(0, perm.size, step):
        pos = perm[s:s + step]
        d = field_.at((pos // cols) * st, (pos % cols) * st)
        d = d[np.any(d != 0, axis=1)]
        found.append(d[:count - have])
        have += found[-1].shape[0]
        if have >= count:
            break
    return np.vstack(found) if found else np.zeros((0, field_.params.dim))


def sample_descriptors(images, params: DescriptorParams, per_image: int, seed: int,
                       threads: int = 1) -> np.ndarray:
    """Up to ``per_image`` distinct non-flat descriptors from each image, stacked as rows.

    Positions are drawn uniformly without replacement from a generator seeded
    by ``(seed, image index)``, so the result does not depend on threading.
    """
    if per_image < 1:
        raise InvalidArgument("per_image must be >= 1")
    images = list(images)

    def one(item):
        i, img = item
        rng = np.random.default_rng([seed, i])
        return _draw_nonzero(DescriptorField(img, params), per_image, rng)

    parts = _map(one, enumerate(images), threads)
    out = np.vstack(parts) if parts else np.zeros((0, params.dim))
    if out.shape[0] == 0:
        raise NoValidDescriptors("every sampled patch was flat")
    return out


def sample_pooled(grids, per_image: int, seed: int) -> np.ndarray:
    """Random non-zero layer-2 inputs from each pooled layer-1 grid."""
    parts = []
    for i, g in enumerate(grids):
        flat = layer2_inputs(g).flat()
        nz = np.nonzero(np.any(flat != 0, axis=1))[0]
        rng = np.random.default_rng([seed, i, 2])
        take = nz if nz.size <= per_image else np.sort(rng.choice(nz, per_image, replace=False))
        parts.append(flat[take])
    out = np.vstack(parts) if parts else np.zeros((0, 0))
    if out.shape[0] == 0:
        raise NoValidDescriptors("no non-zero pooled vectors")
    return out


def codebook_paths(out_dir, name: str, layers: int) -> list[Path]:
    out_dir = Path(out_dir)
    return [out_dir / f"{name}_layer{i}.sdct" for i in range(1, layers + 1)]


def _build_aligner(cfg: HarnessConfig, entries, threads: int) -> Aligner | None:
    if not cfg.alignment.enabled:
        return None
    model = PartModel.load(cfg.alignment.part_model) if cfg.alignment.part_model else None
    return Aligner.from_entries(entries, model, cfg.alignment.k, threads)


def cmd_train_codebook(cfg: HarnessConfig, entries, out_dir, seed: int = 0, threads: int = 1) -> list[Path]:
    """Learn one codebook per layer; layer 2 trains on inputs from the learned layer 1."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pipe = cfg.pipeline
    chosen = [e for e in entries if e.split == cfg.codebook_split]
    if not chosen:
        raise InsufficientSamples(f"no {cfg.codebook_split!r} entries for codebook training")
    aligner = _build_aligner(cfg, entries, threads)
    images = []
    for e in chosen:
        images.extend(v for _, v in sorted(source_images(e, cfg, aligner).items()))
    written = []
    paths = codebook_paths(out_dir, pipe.name, pipe.layers)
    samples = sample_descriptors(images, pipe.descriptor_params, cfg.per_image, seed, threads)
    codebooks = []
    for layer, lc in enumerate(pipe.layer_configs):
        if layer == 1:
            grids = _map(lambda im: layer1_pooled(im, pipe, codebooks[0]), images, threads)
            samples = sample_pooled(grids, cfg.per_image, seed)
        params = LearnerParams(
            iterations=cfg.learner.iterations, sparsity_k=lc.sparsity, beta=pipe.beta,
            muthresh=cfg.learner.muthresh, rng_seed=seed, lambda_note=cfg.learner.lambda_note,
        )
        log.info("%s layer %d: learning %d atoms from %d samples", pipe.name, layer + 1,
                 lc.dict_size, samples.shape[0])
        cb, trace = learn_codebook(samples, params, size_m=lc.dict_size, threads=threads)
        codebooks.append(cb)
        cb.save(paths[layer])
        trace_path = paths[layer].with_name(paths[layer].stem + "_trace.csv")
        trace_path.write_text(trace.to_csv())
        written += [paths[layer], trace_path]
    return written


def load_codebooks(codebook_dir, pipe: PipelineConfig) -> list[Codebook]:
    return [Codebook.load(p) for p in codebook_paths(codebook_dir, pipe.name, pipe.layers)]


def entry_feature(entry, cfg: HarnessConfig, codebooks, aligner: Aligner | None) -> PyramidFeature:
    imgs = source_images(entry, cfg, aligner)
    pipe = cfg.pipeline
    if list(imgs) == [""]:
        return extract_pipeline_features(imgs[""], pipe, codebooks)
    feats = []
    for part in PART_NAMES:
        f = extract_pipeline_features(imgs[part], pipe, codebooks)
        feats.append(PyramidFeature(f.values, f.layout.renamed(f"{pipe.name}/{part}")))
    return combine_scales(feats)


def cmd_extract(cfg: HarnessConfig, entries, codebook_dir, out_path, threads: int = 1,
                splits=None) -> tuple[Path, list]:
    """Write pyramid features of every entry in manifest order.

    Entries that fail are logged, recorded in the sidecar and skipped.
    Returns ``(cache path, failures)``.
    """
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    codebooks = load_codebooks(codebook_dir, cfg.pipeline)
    check_codebooks(cfg.pipeline, codebooks)
    aligner = _build_aligner(cfg, entries, threads)
    chosen = [e for e in entries if splits is None or e.split in splits]

    def one(e):
        try:
            return entry_feature(e, cfg, codebooks, aligner), None
        except (LcscError, OSError) as exc:
            log.error("line %d (%s): %s", e.line, e.image_path, exc)
            return None, {"line": e.line, "path": str(e.image_path), "error": f"{type(exc).__name__}: {exc}"}

    results = _map(one, chosen, threads)
    ok = [(e, f) for e, (f, _) in zip(chosen, results) if f is not None]
    failures = [err for _, err in results if err is not None]
    if ok:
        layout = ok[0][1].layout
        for e, f in ok:
            if f.layout != layout:
                raise LayoutMismatch(f"line {e.line}: feature layout differs from the first entry")
        feats = np.stack([f.values for _, f in ok]).astype(np.float32)
    else:
        layout = FeatureLayout()
        feats = np.zeros((0, 0), dtype=np.float32)
    cache = FeatureCache(feats, layout, [e.label for e, _ in ok], [e.split for e, _ in ok],
                         [str(e.image_path) for e, _ in ok], failures)
    write_cache(cache, out_path)
    return out_path, failures


def _combine_rows(caches: list[FeatureCache]) -> tuple[np.ndarray, FeatureLayout]:
    """Row-wise :func:`combine_scales` over caches sharing labels and order."""
    blocks, segs = [], []
    offset = 0
    names = set()
    for c in caches:
        for n in c.layout.pipelines:
            if n in names:
                raise LayoutMismatch(f"pipeline {n!r} given twice")
            names.add(n)
        x = c.features.astype(np.float64)
        norms = np.sqrt(np.sum(x * x, axis=1, keepdims=True))
        blocks.append(np.divide(x, norms, out=np.zeros_like(x), where=norms > 0))
        base = c.layout.segments[0].offset if c.layout.segments else 0
        segs.extend(replace(s, offset=s.offset - base + offset) for s in c.layout.segments)
        offset += x.shape[1]
    return np.hstack(blocks), FeatureLayout(tuple(segs))


def _check_aligned(caches: list[FeatureCache]) -> None:
    ref = caches[0]
    for c in caches[1:]:
        if c.labels != ref.labels or c.paths != ref.paths:
            raise LayoutMismatch("pipeline caches list different images")


@dataclass
class EvalResult:
    overall_accuracy: float
    per_pipeline_accuracy: dict
    per_pipeline_dims: dict
    per_class: list  # (class_id, support, correct, accuracy)


def _evaluate(xtr, ytr, xte, yte, params: TrainParams, layout_hash: str, threads: int):
    model = train_ovr(xtr, ytr, params, layout_hash=layout_hash, threads=threads)
    pred = np.asarray(predict(model, xte)).reshape(-1)
    return model, pred


def cmd_train_eval(train_caches, test_caches, out_dir, params: TrainParams = TrainParams(),
                   seed: int = 0, config_digest: str = "", train_split: str = "train",
                   test_split: str = "test", threads: int = 1) -> EvalResult:
    """Train on ``train_caches`` and report top-1 accuracy on ``test_caches``.

    With ``test_caches`` empty, rows are selected from ``train_caches`` by
    split name instead.  Several caches are combined pipeline-wise; each
    pipeline is also scored alone.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train = [read_cache(p) for p in train_caches]
    if not train:
        raise InvalidArgument("at least one training cache is required")
    _check_aligned(train)
    if test_caches:
        test = [read_cache(p) for p in test_caches]
        if len(test) != len(train):
            raise LayoutMismatch("train and test cache lists differ in length")
        _check_aligned(test)
        for a, b in zip(train, test):
            if a.layout.digest() != b.layout.digest():
                raise LayoutMismatch("train and test caches have different layouts")
        tr_rows = np.arange(len(train[0].labels))
        te_rows = np.arange(len(test[0].labels))
    else:
        test = train
        tr_rows = train[0].rows(train_split)
        te_rows = train[0].rows(test_split)
    params = TrainParams(params.c_cost, params.tolerance, params.max_epochs, seed)
    ytr = np.asarray(train[0].labels)[tr_rows]
    yte = np.asarray(test[0].labels)[te_rows]

    per_pipe_acc, per_pipe_dims = {}, {}
    for a, b in zip(train, test):
        for name, dim in a.layout.pipeline_dims().items():
            per_pipe_dims[name] = dim
        if len(train) > 1:
            xa, la = _combine_rows([a])
            xb, _ = _combine_rows([b])
            _, pred = _evaluate(xa[tr_rows], ytr, xb[te_rows], yte, params, la.digest(), threads)
            per_pipe_acc["+".join(a.layout.pipelines)] = float(np.mean(pred == yte))
    xtr, layout = _combine_rows(train)
    xte, _ = _combine_rows(test)
    model, pred = _evaluate(xtr[tr_rows], ytr, xte[te_rows], yte, params, layout.digest(), threads)
    overall = float(np.mean(pred == yte)) if yte.size else 0.0
    per_pipe_acc["all" if len(train) > 1 else "+".join(layout.pipelines)] = overall

    per_class = []
    for c in np.unique(np.concatenate([ytr, yte])):
        mask = yte == c
        support = int(mask.sum())
        correct = int(np.sum(pred[mask] == c))
        per_class.append((int(c), support, correct, correct / support if support else 0.0))

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class_id", "support", "correct", "accuracy"])
    for row in per_class:
        w.writerow([row[0], row[1], row[2], repr(row[3])])
    (out_dir / "report.csv").write_text(buf.getvalue())

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["pipeline", "dim", "accuracy"])
    for name, acc in per_pipe_acc.items():
        dim = layout.dim if name == "all" else sum(per_pipe_dims[p] for p in name.split("+"))
        w.writerow([name, dim, repr(acc)])
    (out_dir / "pipelines.csv").write_text(buf.getvalue())

    summary = {
        "overall_accuracy": overall,
        "per_pipeline_dims": per_pipe_dims,
        "per_pipeline_accuracy": per_pipe_acc,
        "seed": seed,
        "config_digest": config_digest,
        "train_count": int(ytr.size),
        "test_count": int(yte.size),
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    model.save(out_dir / "model.svml")
    return EvalResult(overall, per_pipe_acc, per_pipe_dims, per_class)


def part_ratio_samples(entries) -> dict:
    """Right-facing part ratios from training entries; left heads are mirrored."""
    samples = {p: [] for p in PART_NAMES}
    for e in entries:
        if e.split != "train" or e.head_bbox is None or not e.part_points:
            continue
        d = entry_direction(e)
        if d is None or d is Direction.MIDDLE:
            continue
        for part, xy in e.part_points.items():
            if part not in samples:
                continue
            rx, ry = normalize_part_coords(xy, e.head_bbox)
            if d is Direction.LEFT:
                rx = 1.0 - rx
            samples[part].append((rx, ry))
    return {p: v for p, v in samples.items() if v}


def fit_parts_model(entries) -> PartModel:
    samples = part_ratio_samples(entries)
    if not samples:
        raise InsufficientSamples("no left/right training entries with part points")
    return fit_part_gaussians(samples)


def region_table(model: PartModel) -> str:
    """Per-part ``mu +/- 3 sigma`` intervals in frame pixels."""
    lines = []
    for part, (sx, sy) in model.parts.items():
        lines.append(f"{part}:")
        lines.append(f"  x: μ ± 3σ = {sx.mu:.0f} ± {3 * sx.sigma:.0f} pixels")
        lines.append(f"  y: μ ± 3σ = {sy.mu:.0f} ± {3 * sy.sigma:.0f} pixels")
    return "\n".join(lines) + "\n"


def cmd_fit_parts(entries, out_path) -> tuple[Path, str]:
    model = fit_parts_model(entries)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    model.save(out_path)
    return out_path, region_table(model)


def cmd_align(cfg: HarnessConfig, entries, out_path, threads: int = 1) -> Path:
    """Decide each head's direction and emit its part regions as JSON Lines."""
    model = PartModel.load(cfg.alignment.part_model) if cfg.alignment.part_model else None
    aligner = Aligner.from_entries(entries, model, cfg.alignment.k, threads)
    heads = [e for e in entries if e.head_bbox is not None]

    def one(e):
        head = crop(load_image(e.image_path), e.head_bbox)
        direction, voted = aligner.direction(e, head, e.split == "train")
        aligned = align_head(head, direction, aligner.model)
        regions = {r.part: {"x": list(r.x_range), "y": list(r.y_range)} for r in aligned.regions}
        return {"line": e.line, "image_path": str(e.image_path), "direction": direction.value,
                "voted": voted, "flipped": direction is Direction.LEFT, "regions": regions}

    rows = _map(one, heads, threads)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
    return out_path

