"""Locality-constrained linear coding with the approximated solver.

For a descriptor ``y`` the support is its ``K`` nearest atoms; with
``z = D_S - y`` the code solves::

    (z^T z + max(beta * trace(z^T z), floor) * I) w = 1,    w <- w / sum(w)

``floor = 1e-12 * (1 + trace(z^T z))`` only takes over when the beta term
vanishes (``y`` coincides with every selected atom, or ``beta = 0``), so a
nonzero beta is solved as stated.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateSystem, DimensionMismatch, InvalidArgument

# encoding always runs on these fixed row blocks so results do not depend on
# thread count or scheduling
CHUNK_ROWS = 1024
FLOOR_SCALE = 1e-12


@dataclass(frozen=True)
class EncoderParams:
    sparsity_k: int = 2
    beta: float = 1e-4
    sigma: float = 1.0  # only read by the exact-form reference solver

    def __post_init__(self):
        if self.sparsity_k < 1:
            raise InvalidArgument("sparsity_k must be >= 1")
        if self.beta < 0:
            raise InvalidArgument("beta must be >= 0")
        if not self.sigma > 0:
            raise InvalidArgument("sigma must be positive")


@dataclass(frozen=True, eq=False)
class SparseCode:
    indices: np.ndarray
    weights: np.ndarray

    def dense(self, size_m: int) -> np.ndarray:
        out = np.zeros(size_m)
        out[self.indices] = self.weights
        return out


@dataclass(frozen=True, eq=False)
class SparseCodeGrid:
    """Codes laid out on the descriptor grid.

    ``indices`` and ``weights`` have shape ``(rows, cols, K)``; indices are
    strictly increasing along the last axis.
    """

    indices: np.ndarray
    weights: np.ndarray
    codebook_size: int

    @property
    def rows(self) -> int:
        return self.indices.shape[0]

    @property
    def cols(self) -> int:
        return self.indices.shape[1]

    def code(self, r: int, c: int) -> SparseCode:
        return SparseCode(self.indices[r, c].copy(), self.weights[r, c].copy())


def atoms_of(codebook) -> np.ndarray:
    return codebook.atoms if hasattr(codebook, "atoms") else np.asarray(codebook, dtype=np.float64)


def _nearest(Y: np.ndarray, atoms: np.ndarray, k: int) -> np.ndarray:
    """Nearest-first atom indices for each row of ``Y``; ties go to the lower index."""
    m = atoms.shape[1]
    if not 1 <= k <= m:
        raise InvalidArgument(f"k={k} outside [1, {m}]")
    # ||y - d||^2 minus the per-row constant ||y||^2
    scores = np.sum(atoms * atoms, axis=0)[None, :] - 2.0 * (Y @ atoms)
    if k == m:
        return np.argsort(scores, axis=1, kind="stable")
    part = np.argpartition(scores, k - 1, axis=1)[:, :k]
    sel = np.take_along_axis(scores, part, axis=1)
    order = np.lexsort((part, sel), axis=1)
    idx = np.take_along_axis(part, order, axis=1)
    # argpartition may split a tie at the k-th score arbitrarily
    kth = np.take_along_axis(scores, idx[:, -1:], axis=1)
    ambiguous = np.nonzero(np.sum(scores <= kth, axis=1) > k)[0]
    for n in ambiguous:
        idx[n] = np.argsort(scores[n], kind="stable")[:k]
    return idx


def nearest_atoms(y, codebook, k: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    atoms = atoms_of(codebook)
    if y.shape != (atoms.shape[0],):
        raise DimensionMismatch(f"descriptor of shape {y.shape} vs atom dim {atoms.shape[0]}")
    return _nearest(y[None, :], atoms, k)[0]


def _solve_block(Y: np.ndarray, atoms: np.ndarray, params: EncoderParams):
    k = params.sparsity_k
    idx = _nearest(Y, atoms, k)
    z = atoms.T[idx] - Y[:, None, :]  # (n, K, H)
    c = z @ np.swapaxes(z, 1, 2)
    tr = np.trace(c, axis1=1, axis2=2)
    diag = np.maximum(params.beta * tr, FLOOR_SCALE * (1.0 + tr))
    c[:, np.arange(k), np.arange(k)] += diag[:, None]
    try:
        w = np.linalg.solve(c, np.ones((Y.shape[0], k, 1)))[..., 0]
    except np.linalg.LinAlgError as exc:
        raise DegenerateSystem(str(exc)) from exc
    total = np.sum(w, axis=1)
    if not (np.all(np.isfinite(w)) and np.all(total != 0)):
        raise DegenerateSystem("non-finite or zero-sum LLC weights")
    w = w / total[:, None]
    order = np.argsort(idx, axis=1)
    return np.take_along_axis(idx, order, axis=1), np.take_along_axis(w, order, axis=1)


def encode_batch(Y, codebook, params: EncoderParams, threads: int = 1):
    """Encode the rows of ``Y`` (``(n, H)``).

    Returns ``(indices, weights)``, both ``(n, K)``, indices ascending.
    """
    atoms = atoms_of(codebook)
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim != 2 or Y.shape[1] != atoms.shape[0]:
        raise DimensionMismatch(
            f"descriptors of shape {Y.shape} vs codebook dim {atoms.shape[0]}"
        )
    if params.sparsity_k > atoms.shape[1]:
        raise InvalidArgument(
            f"sparsity {params.sparsity_k} exceeds codebook size {atoms.shape[1]}"
        )
    n = Y.shape[0]
    k = params.sparsity_k
    indices = np.empty((n, k), dtype=np.intp)
    weights = np.empty((n, k), dtype=np.float64)
    starts = range(0, n, CHUNK_ROWS)

    def run(s):
        e = min(s + CHUNK_ROWS, n)
        indices[s:e], weights[s:e] = _solve_block(Y[s:e], atoms, params)

    if threads > 1 and n > CHUNK_ROWS:
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(run, starts))
    else:
        for s in starts:
            run(s)
    return indices, weights


def llc_encode(y, codebook, params: EncoderParams = EncoderParams()) -> SparseCode:
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 1:
        raise DimensionMismatch("llc_encode takes a single descriptor")
    idx, w = encode_batch(y[None, :], codebook, params)
    return SparseCode(idx[0], w[0])


def encode_grid(grid, codebook, params: EncoderParams = EncoderParams(), threads: int = 1) -> SparseCodeGrid:
    atoms = atoms_of(codebook)
    if grid.dim != atoms.shape[0]:
        raise DimensionMismatch(f"grid dim {grid.dim} vs codebook dim {atoms.shape[0]}")
    idx, w = encode_batch(grid.flat(), atoms, params, threads=threads)
    shape = (grid.rows, grid.cols, params.sparsity_k)
    return SparseCodeGrid(idx.reshape(shape), w.reshape(shape), atoms.shape[1])


def reconstruct(indices: np.ndarray, weights: np.ndarray, codebook) -> np.ndarray:
    """Rows of ``D X`` for codes given as ``(n, K)`` index/weight arrays."""
    atoms = atoms_of(codebook)
    return np.einsum("nkh,nk->nh", atoms.T[indices], weights)
