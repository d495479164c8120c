"""Codebook learning: LLC encoding alternated with sequential rank-1 atom updates.

Sample matrices are ``(N, H)`` with one descriptor per row; atoms are the
columns of an ``(H, M)`` matrix.  Each learning iteration

1. encodes every sample with :func:`lcsc.llc.encode_batch`,
2. sweeps the atoms in index order, replacing atom ``m`` and the matching
   coefficients by the leading singular pair of the residual restricted to
   the samples that use it,
3. replaces unused atoms and atoms whose coherence with another atom exceeds
   ``muthresh`` by random normalised training descriptors.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptData, DimensionMismatch, ExhaustedSamples, InvalidArgument
from .llc import EncoderParams, encode_batch, reconstruct

log = logging.getLogger(__name__)

MAGIC = b"SDCT"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class LearnerParams:
    iterations: int = 10
    sparsity_k: int = 2
    beta: float = 1e-4
    muthresh: float = 0.95
    rng_seed: int = 0
    lambda_note: float | None = None  # incoherence weight; enforced only through muthresh

    def __post_init__(self):
        if self.iterations < 1:
            raise InvalidArgument("iterations must be >= 1")
        if not 0 < self.muthresh < 1:
            raise InvalidArgument("muthresh must lie in (0, 1)")
        if self.sparsity_k < 1:
            raise InvalidArgument("sparsity_k must be >= 1")

    @property
    def encoder(self) -> EncoderParams:
        return EncoderParams(sparsity_k=self.sparsity_k, beta=self.beta)

    @classmethod
    def from_dict(cls, d: dict) -> "LearnerParams":
        known = {f: d[f] for f in cls.__dataclass_fields__ if f in d}
        return cls(**known)


@dataclass(frozen=True, eq=False)
class Codebook:
    atoms: np.ndarray  # (H, M), unit-norm columns
    trained_with: LearnerParams | None = None

    def __post_init__(self):
        a = np.array(self.atoms, dtype=np.float64)
        if a.ndim != 2:
            raise InvalidArgument("atoms must be a 2-D (H, M) matrix")
        a.setflags(write=False)
        object.__setattr__(self, "atoms", a)

    @property
    def dim_h(self) -> int:
        return self.atoms.shape[0]

    @property
    def size_m(self) -> int:
        return self.atoms.shape[1]

    def to_bytes(self) -> bytes:
        trailer = json.dumps(
            asdict(self.trained_with) if self.trained_with else None, sort_keys=True
        ).encode("utf-8")
        head = MAGIC + struct.pack("<III", FORMAT_VERSION, self.dim_h, self.size_m)
        body = np.asfortranarray(self.atoms).astype("<f8").tobytes(order="F")
        return head + body + trailer

    @classmethod
    def from_bytes(cls, data: bytes) -> "Codebook":
        if len(data) < 16 or data[:4] != MAGIC:
            raise CorruptData("not a codebook file")
        version, h, m = struct.unpack("<III", data[4:16])
        if version != FORMAT_VERSION:
            raise CorruptData(f"unsupported codebook version {version}")
        end = 16 + 8 * h * m
        if len(data) < end:
            raise CorruptData("truncated codebook payload")
        atoms = np.frombuffer(data[16:end], dtype="<f8").reshape((h, m), order="F")
        try:
            meta = json.loads(data[end:].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CorruptData(f"bad codebook trailer: {exc}") from exc
        return cls(atoms.astype(np.float64), LearnerParams.from_dict(meta) if meta else None)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Codebook":
        return cls.from_bytes(Path(path).read_bytes())


@dataclass
class LearningTrace:
    rmse_per_iteration: list[float] = field(default_factory=list)
    replacements_per_iteration: list[int] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "rmse", "replacements"])
        for i, (r, n) in enumerate(zip(self.rmse_per_iteration, self.replacements_per_iteration), 1):
            w.writerow([i, repr(float(r)), n])
        return buf.getvalue()


@dataclass
class CodeSet:
    """Mutable sparse code matrix ``X`` stored per sample as ``(N, K)`` arrays."""

    indices: np.ndarray
    weights: np.ndarray
    size_m: int

    def dense(self) -> np.ndarray:
        """``X`` as a dense ``(M, N)`` matrix."""
        n = self.indices.shape[0]
        x = np.zeros((self.size_m, n))
        np.add.at(x, (self.indices, np.arange(n)[:, None]), self.weights)
        return x


@dataclass
class AtomUpdate:
    atom: np.ndarray
    rows: np.ndarray  # sample indices whose coefficient changed
    slots: np.ndarray  # code slot holding atom m for each of those samples
    values: np.ndarray
    flagged: bool  # unused atom, left for replacement


def init_dct_codebook(dim_h: int, size_m: int, *, allow_undercomplete: bool = False) -> Codebook:
    """Oversampled DCT-II dictionary.

    Atom ``m`` samples ``cos(pi * (h + 1/2) * m / M)`` for ``h = 0..H-1``; every
    column but the first is made mean-free, then all columns are normalised.
    With ``M == H`` this is the orthonormal DCT-II basis.
    """
    if dim_h < 1 or size_m < 1:
        raise InvalidArgument("dimensions must be positive")
    if size_m < dim_h and not allow_undercomplete:
        raise InvalidArgument(f"size_m={size_m} < dim_h={dim_h}: not overcomplete")
    h = np.arange(dim_h)[:, None] + 0.5
    m = np.arange(size_m)[None, :]
    atoms = np.cos(np.pi * h * m / size_m)
    atoms[:, 1:] -= atoms[:, 1:].mean(axis=0, keepdims=True)
    atoms /= np.linalg.norm(atoms, axis=0, keepdims=True)
    return Codebook(atoms)


def _check_dims(samples: np.ndarray, atoms: np.ndarray) -> None:
    if samples.ndim != 2 or samples.shape[1] != atoms.shape[0]:
        raise DimensionMismatch(
            f"samples of shape {samples.shape} vs atom dimension {atoms.shape[0]}"
        )


def atom_usage(codes: CodeSet, m: int):
    rows, slots = np.nonzero((codes.indices == m) & (codes.weights != 0))
    return rows, slots


def ksvd_atom_update(m: int, atoms: np.ndarray, samples: np.ndarray, codes: CodeSet, usage=None) -> AtomUpdate:
    """Rank-1 refit of atom ``m`` and its coefficient row.

    ``usage`` may pass a precomputed ``(rows, slots)`` pair from
    :func:`atom_usage`.
    """
    rows, slots = usage if usage is not None else atom_usage(codes, m)
    if rows.size == 0:
        return AtomUpdate(atoms[:, m].copy(), rows, slots, np.empty(0), True)
    d_m = atoms[:, m]
    x_m = codes.weights[rows, slots]
    resid = samples[rows] - reconstruct(codes.indices[rows], codes.weights[rows], atoms)
    resid += x_m[:, None] * d_m[None, :]
    u, s, vt = np.linalg.svd(resid, full_matrices=False)
    atom, coef = vt[0], s[0] * u[:, 0]
    if atom[np.argmax(np.abs(atom))] < 0:
        atom, coef = -atom, -coef
    atom = atom / np.linalg.norm(atom)
    return AtomUpdate(atom, rows, slots, coef, False)


def max_coherence(atoms: np.ndarray) -> float:
    g = np.abs(atoms.T @ atoms)
    np.fill_diagonal(g, 0.0)
    return float(g.max()) if g.size > 1 else 0.0


def incoherence_replace(atoms: np.ndarray, samples: np.ndarray, muthresh: float, rng: np.random.Generator, flagged=()):
    """Swap coherent or flagged atoms for random normalised training descriptors.

    Atoms are visited in ascending index order.  A candidate is accepted only
    if its coherence with every other current atom is at most ``muthresh``,
    so the result satisfies the bound pairwise.

    Returns ``(new_atoms, replacement_count)``.
    """
    atoms = np.array(atoms, dtype=np.float64)
    samples = np.asarray(samples, dtype=np.float64)
    _check_dims(samples, atoms)
    if samples.shape[0] == 0:
        raise ExhaustedSamples("no samples to draw replacements from")
    m_total = atoms.shape[1]
    flagged = set(int(i) for i in flagged)
    gram = np.abs(atoms.T @ atoms)
    np.fill_diagonal(gram, 0.0)
    order = None
    cursor = 0
    count = 0
    for m in range(m_total):
        if m not in flagged and gram[m].max(initial=0.0) <= muthresh:
            continue
        if order is None:
            order = rng.permutation(samples.shape[0])
        while True:
            if cursor >= order.size:
                raise ExhaustedSamples(
                    f"ran out of candidate descriptors after {count} replacements"
                )
            y = samples[order[cursor]]
            cursor += 1
            norm = np.linalg.norm(y)
            if norm == 0:
                continue
            cand = y / norm
            row = np.abs(cand @ atoms)
            row[m] = 0.0
            if row.max(initial=0.0) <= muthresh:
                break
        atoms[:, m] = cand
        gram[m, :] = row
        gram[:, m] = row
        count += 1
    return atoms, count


def reconstruction_rmse(samples, codebook, params: EncoderParams = EncoderParams(), threads: int = 1) -> float:
    """``||Y - D X||_F / sqrt(H N)`` with ``X`` the LLC codes of ``Y``."""
    samples = np.asarray(samples, dtype=np.float64)
    atoms = codebook.atoms if hasattr(codebook, "atoms") else np.asarray(codebook)
    _check_dims(samples, atoms)
    idx, w = encode_batch(samples, atoms, params, threads=threads)
    return _rmse(samples, CodeSet(idx, w, atoms.shape[1]), atoms)


def _rmse(samples, codes: CodeSet, atoms) -> float:
    diff = samples - reconstruct(codes.indices, codes.weights, atoms)
    return float(np.sqrt(np.sum(diff * diff) / samples.size))


def learn_codebook(samples, params: LearnerParams = LearnerParams(), init: Codebook | None = None,
                   size_m: int | None = None, threads: int = 1, on_iteration=None):
    """Learn a codebook from ``samples`` (``(N, H)``).

    Starts from ``init`` or from the DCT dictionary of ``size_m`` atoms.
    ``on_iteration(i, atoms, rmse)`` is called after every iteration with a
    read-only view of the atoms.  Returns ``(Codebook, LearningTrace)``.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if init is None:
        if size_m is None:
            raise InvalidArgument("either init or size_m is required")
        if size_m < samples.shape[1]:
            log.warning("codebook of %d atoms is undercomplete for dimension %d",
                        size_m, samples.shape[1])
        init = init_dct_codebook(samples.shape[1], size_m, allow_undercomplete=True)
    atoms = np.array(init.atoms)
    _check_dims(samples, atoms)
    m_total = atoms.shape[1]
    enc = params.encoder
    rng = np.random.default_rng(params.rng_seed)
    trace = LearningTrace()

    codes = CodeSet(*encode_batch(samples, atoms, enc, threads=threads), m_total)
    for it in range(params.iterations):
        # group sample slots by atom once; indices stay fixed during the sweep
        live = codes.weights != 0
        flat_atoms = codes.indices[live]
        rws, sls = np.nonzero(live)
        order = np.argsort(flat_atoms, kind="stable")
        bounds = np.searchsorted(flat_atoms[order], np.arange(m_total + 1))
        flagged = []
        for m in range(m_total):
            sel = order[bounds[m]:bounds[m + 1]]
            upd = ksvd_atom_update(m, atoms, samples, codes, usage=(rws[sel], sls[sel]))
            if upd.flagged:
                flagged.append(m)
                continue
            atoms[:, m] = upd.atom
            codes.weights[upd.rows, upd.slots] = upd.values
        atoms, n_rep = incoherence_replace(atoms, samples, params.muthresh, rng, flagged)
        codes = CodeSet(*encode_batch(samples, atoms, enc, threads=threads), m_total)
        rmse = _rmse(samples, codes, atoms)
        trace.rmse_per_iteration.append(rmse)
        trace.replacements_per_iteration.append(n_rep)
        log.info("iteration %d: rmse %.6g, %d replacements", it + 1, rmse, n_rep)
        if on_iteration is not None:
            view = atoms.view()
            view.setflags(write=False)
            on_iteration(it, view, rmse)
    return Codebook(atoms, params), trace
