"""One-vs-rest linear SVM trained by dual coordinate descent.

Each binary problem minimises ``0.5 ||w||^2 + C sum_i max(0, 1 - y_i w.x_i)``
with the bias folded in as a constant feature of value 1.  The visiting order
of each epoch comes from a seeded generator, so training is reproducible.
"""

from __future__ import annotations

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import CorruptData, InvalidArgument, LayoutMismatch, NonFiniteInput, SingleClass

MAGIC = b"SVML"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class TrainParams:
    c_cost: float = 1.0
    tolerance: float = 1e-3
    max_epochs: int = 1000
    seed: int = 0

    def __post_init__(self):
        if not self.c_cost > 0:
            raise InvalidArgument("c_cost must be positive")
        if self.max_epochs < 1:
            raise InvalidArgument("max_epochs must be >= 1")


@dataclass(frozen=True, eq=False)
class LinearModel:
    classes: np.ndarray  # (C,) ascending class ids
    weights: np.ndarray  # (C, D)
    biases: np.ndarray  # (C,)
    feature_layout_hash: str = ""
    train_params: TrainParams = TrainParams()

    @property
    def class_count(self) -> int:
        return self.classes.size

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def to_bytes(self) -> bytes:
        c, d = self.weights.shape
        trailer = json.dumps({
            "classes": [int(v) for v in self.classes],
            "layout_hash": self.feature_layout_hash,
            "params": asdict(self.train_params),
        }, sort_keys=True).encode("utf-8")
        return (MAGIC + struct.pack("<III", FORMAT_VERSION, c, d)
                + self.weights.astype("<f8").tobytes() + self.biases.astype("<f8").tobytes()
                + trailer)

    @classmethod
    def from_bytes(cls, data: bytes) -> "LinearModel":
        if len(data) < 16 or data[:4] != MAGIC:
            raise CorruptData("not a model file")
        version, c, d = struct.unpack("<III", data[4:16])
        if version != FORMAT_VERSION:
            raise CorruptData(f"unsupported model version {version}")
        w_end = 16 + 8 * c * d
        b_end = w_end + 8 * c
        if len(data) < b_end:
            raise CorruptData("truncated model payload")
        weights = np.frombuffer(data[16:w_end], dtype="<f8").reshape(c, d).astype(np.float64)
        biases = np.frombuffer(data[w_end:b_end], dtype="<f8").astype(np.float64)
        meta = json.loads(data[b_end:].decode("utf-8"))
        return cls(np.asarray(meta["classes"], dtype=np.int64), weights, biases,
                   meta["layout_hash"], TrainParams(**meta["params"]))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "LinearModel":
        return cls.from_bytes(Path(path).read_bytes())


def _dual_cd(X: np.ndarray, y: np.ndarray, params: TrainParams, rng: np.random.Generator):
    n, d = X.shape
    w = np.zeros(d)
    b = 0.0
    alpha = np.zeros(n)
    # squared norms of the bias-augmented rows
    qd = np.einsum("ij,ij->i", X, X, dtype=np.float64) + 1.0
    c = params.c_cost
    for _ in range(params.max_epochs):
        pg_max, pg_min = -np.inf, np.inf
        for i in rng.permutation(n):
            xi = X[i]
            g = y[i] * (float(xi @ w) + b) - 1.0
            a = alpha[i]
            if a == 0.0:
                pg = min(g, 0.0)
            elif a == c:
                pg = max(g, 0.0)
            else:
                pg = g
            pg_max = max(pg_max, pg)
            pg_min = min(pg_min, pg)
            if pg != 0.0:
                new = min(max(a - g / qd[i], 0.0), c)
                step = (new - a) * y[i]
                alpha[i] = new
                w += step * xi
                b += step
        if pg_max - pg_min <= params.tolerance:
            break
    return w, b


def train_ovr(features, labels, params: TrainParams = TrainParams(), layout_hash: str = "",
              threads: int = 1) -> LinearModel:
    X = np.asarray(features)
    labels = np.asarray(labels)
    if X.ndim != 2 or X.shape[0] != labels.shape[0]:
        raise InvalidArgument("features must be (N, D) with one label per row")
    if X.shape[0] < 2:
        raise InvalidArgument("need at least two samples")
    if not np.all(np.isfinite(X)):
        raise NonFiniteInput("features contain NaN or Inf")
    classes = np.unique(labels)
    if classes.size < 2:
        raise SingleClass(f"only class {classes.tolist()} present")
    if X.dtype not in (np.float32, np.float64):
        X = X.astype(np.float64)

    def fit(ci):
        y = np.where(labels == classes[ci], 1.0, -1.0)
        rng = np.random.default_rng([params.seed, int(ci)])
        return _dual_cd(X, y, params, rng)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(fit, range(classes.size)))
    else:
        results = [fit(ci) for ci in range(classes.size)]
    weights = np.stack([r[0] for r in results])
    biases = np.array([r[1] for r in results])
    return LinearModel(classes.astype(np.int64), weights, biases, layout_hash, params)


def _as_vector(model: LinearModel, feature) -> np.ndarray:
    if hasattr(feature, "layout"):
        if model.feature_layout_hash and feature.layout.digest() != model.feature_layout_hash:
            raise LayoutMismatch("feature layout differs from the training layout")
        feature = feature.values
    x = np.asarray(feature, dtype=np.float64)
    if x.shape[-1] != model.dim:
        raise LayoutMismatch(f"feature dim {x.shape[-1]} vs model dim {model.dim}")
    return x


def decision_values(model: LinearModel, feature) -> np.ndarray:
    """``w_c . x + b_c`` for every class; accepts a single vector or an ``(N, D)`` batch."""
    x = _as_vector(model, feature)
    return x @ model.weights.T + model.biases


def predict(model: LinearModel, feature):
    """Class id with the largest decision value; ties go to the smaller id."""
    v = decision_values(model, feature)
    pick = np.argmax(v, axis=-1)
    out = model.classes[pick]
    return int(out) if np.ndim(out) == 0 else out
