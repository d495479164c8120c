import math

import numpy as np
import pytest

from lcsc.codebook import (
    Codebook,
    CodeSet,
    LearnerParams,
    LearningTrace,
    incoherence_replace,
    init_dct_codebook,
    ksvd_atom_update,
    learn_codebook,
    max_coherence,
    reconstruction_rmse,
)
from lcsc.errors import CorruptData, DimensionMismatch, ExhaustedSamples, InvalidArgument
from lcsc.llc import EncoderParams, encode_batch


def dct2_matrix(n):
    """Orthonormal DCT-II matrix written out from its textbook definition."""
    out = np.zeros((n, n))
    for k in range(n):
        scale = math.sqrt(1.0 / n) if k == 0 else math.sqrt(2.0 / n)
        for i in range(n):
            out[i, k] = scale * math.cos(math.pi * (i + 0.5) * k / n)
    return out


def dense_frobenius(samples, atoms, codes):
    return np.linalg.norm(samples.T - atoms @ codes.dense())


def random_problem(rng, h=6, m=4, n=30, k=2):
    atoms = rng.normal(size=(h, m))
    atoms /= np.linalg.norm(atoms, axis=0)
    samples = rng.normal(size=(n, h))
    codes = CodeSet(*encode_batch(samples, atoms, EncoderParams(sparsity_k=k)), m)
    return atoms, samples, codes


class TestDct:
    def test_dc_atom(self):
        np.testing.assert_allclose(init_dct_codebook(4, 8).atoms[:, 0], 0.5, atol=1e-15)

    def test_unit_norm(self):
        for h, m in [(4, 8), (16, 37), (384, 512), (1, 1)]:
            a = init_dct_codebook(h, m).atoms
            np.testing.assert_allclose(np.linalg.norm(a, axis=0), 1.0, atol=1e-12)

    def test_square_is_dct2(self):
        a = init_dct_codebook(4, 4).atoms
        np.testing.assert_allclose(a, dct2_matrix(4), atol=1e-12)
        np.testing.assert_allclose(a.T @ a, np.eye(4), atol=1e-12)

    def test_square_dct2_larger(self):
        np.testing.assert_allclose(init_dct_codebook(12, 12).atoms, dct2_matrix(12), atol=1e-12)

    def test_mean_free(self):
        a = init_dct_codebook(8, 20).atoms
        np.testing.assert_allclose(a[:, 1:].mean(axis=0), 0.0, atol=1e-12)

    def test_undercomplete_rejected(self):
        with pytest.raises(InvalidArgument):
            init_dct_codebook(8, 4)
        assert init_dct_codebook(8, 4, allow_undercomplete=True).size_m == 4


class TestAtomUpdate:
    def test_rank_one_data(self):
        y = np.array([0.6, -0.8])
        samples = np.tile(y, (5, 1))
        codes = CodeSet(np.zeros((5, 1), dtype=np.intp), np.full((5, 1), 0.3), 1)
        upd = ksvd_atom_update(0, np.array([[1.0], [0.0]]), samples, codes)
        # largest-magnitude entry made positive: -y
        np.testing.assert_allclose(upd.atom, -y, atol=1e-12)
        np.testing.assert_allclose(upd.values, -1.0, atol=1e-12)
        assert not upd.flagged

    def test_unused_flagged(self, rng):
        atoms, samples, codes = random_problem(rng)
        codes.indices[codes.indices == 3] = 0
        upd = ksvd_atom_update(3, atoms, samples, codes)
        assert upd.flagged
        np.testing.assert_array_equal(upd.atom, atoms[:, 3])

    def test_monotone(self, rng):
        for _ in range(20):
            atoms, samples, codes = random_problem(rng)
            for m in range(atoms.shape[1]):
                before = dense_frobenius(samples, atoms, codes)
                upd = ksvd_atom_update(m, atoms, samples, codes)
                if upd.flagged:
                    continue
                atoms[:, m] = upd.atom
                codes.weights[upd.rows, upd.slots] = upd.values
                after = dense_frobenius(samples, atoms, codes)
                assert after <= before + 1e-10

    def test_sign_convention(self, rng):
        atoms, samples, codes = random_problem(rng)
        upd = ksvd_atom_update(1, atoms, samples, codes)
        assert upd.atom[np.argmax(np.abs(upd.atom))] > 0
        assert abs(np.linalg.norm(upd.atom) - 1) < 1e-12


class TestReplace:
    def test_duplicates(self, rng):
        a = np.eye(4)[:, [0, 1, 2, 2]]
        samples = rng.normal(size=(50, 4))
        out, n = incoherence_replace(a, samples, 0.95, np.random.default_rng(0))
        assert n == 1
        np.testing.assert_array_equal(out[:, 3], a[:, 3])  # lower index offends first
        assert max_coherence(out) <= 0.95

    def test_orthonormal_untouched(self, rng):
        a = np.eye(5)
        out, n = incoherence_replace(a, rng.normal(size=(10, 5)), 0.95, np.random.default_rng(0))
        assert n == 0
        np.testing.assert_array_equal(out, a)

    def test_flagged_replaced(self, rng):
        a = np.eye(5)
        samples = rng.normal(size=(10, 5))
        out, n = incoherence_replace(a, samples, 0.95, np.random.default_rng(0), flagged=[2])
        assert n == 1
        assert abs(np.linalg.norm(out[:, 2]) - 1) < 1e-12
        # the new atom is a normalised training descriptor
        normed = samples / np.linalg.norm(samples, axis=1, keepdims=True)
        assert np.min(np.linalg.norm(normed - out[:, 2], axis=1)) < 1e-12

    def test_deterministic(self, rng):
        a = np.repeat(np.eye(3), 2, axis=1)
        samples = rng.normal(size=(40, 3))
        r1 = incoherence_replace(a, samples, 0.9, np.random.default_rng(7))
        r2 = incoherence_replace(a, samples, 0.9, np.random.default_rng(7))
        assert r1[1] == r2[1]
        assert np.array_equal(r1[0], r2[0])

    def test_exhausted(self):
        a = np.eye(2)[:, [0, 0, 0]]
        samples = np.array([[1.0, 0.0]])
        with pytest.raises(ExhaustedSamples):
            incoherence_replace(a, samples, 0.5, np.random.default_rng(0))
        with pytest.raises(ExhaustedSamples):
            incoherence_replace(a, np.zeros((0, 2)), 0.5, np.random.default_rng(0))

    def test_never_reintroduces_duplicate(self):
        a = np.eye(3)[:, [0, 1, 1]]
        # one candidate copies atom 0, the other is acceptable
        samples = np.array([[2.0, 0.0, 0.0], [0.0, 0.0, 5.0]])
        out, n = incoherence_replace(a, samples, 0.95, np.random.default_rng(3))
        assert n == 1
        # atom 1 is the first offender; e0 is rejected as a copy of atom 0
        np.testing.assert_allclose(out, np.eye(3)[:, [0, 2, 1]])


class TestLearn:
    def test_orthonormal_data_exact(self):
        samples = np.eye(6)
        init = Codebook(np.eye(6)[:, ::-1].copy())
        cb, trace = learn_codebook(samples, LearnerParams(iterations=3, sparsity_k=1), init=init)
        assert trace.rmse_per_iteration[-1] < 1e-6

    def test_invariants_and_trace(self, rng):
        samples = np.abs(rng.normal(size=(400, 12)))
        samples /= np.linalg.norm(samples, axis=1, keepdims=True)
        params = LearnerParams(iterations=4, rng_seed=3)
        cb, trace = learn_codebook(samples, params, size_m=24)
        assert len(trace.rmse_per_iteration) == 4
        assert len(trace.replacements_per_iteration) == 4
        assert all(np.isfinite(trace.rmse_per_iteration))
        np.testing.assert_allclose(np.linalg.norm(cb.atoms, axis=0), 1.0, atol=1e-9)
        assert max_coherence(cb.atoms) <= params.muthresh
        init_rmse = reconstruction_rmse(samples, init_dct_codebook(12, 24), params.encoder)
        assert trace.rmse_per_iteration[-1] <= init_rmse
        assert cb.trained_with == params

    def test_deterministic(self, rng):
        samples = rng.normal(size=(200, 8))
        params = LearnerParams(iterations=3, rng_seed=11)
        a, ta = learn_codebook(samples, params, size_m=16)
        b, tb = learn_codebook(samples, params, size_m=16, threads=3)
        assert a.to_bytes() == b.to_bytes()
        assert ta.to_csv() == tb.to_csv()

    def test_iteration_hook(self, rng):
        samples = rng.normal(size=(150, 6))
        seen = []

        def hook(it, atoms, rmse):
            assert not atoms.flags.writeable
            seen.append((it, atoms.copy(), rmse))

        cb, trace = learn_codebook(samples, LearnerParams(iterations=3), size_m=10, on_iteration=hook)
        assert [s[0] for s in seen] == [0, 1, 2]
        assert [s[2] for s in seen] == trace.rmse_per_iteration
        assert np.array_equal(seen[-1][1], cb.atoms)

    def test_needs_size(self, rng):
        with pytest.raises(InvalidArgument):
            learn_codebook(rng.normal(size=(5, 3)))

    def test_params(self):
        with pytest.raises(InvalidArgument):
            LearnerParams(iterations=0)
        with pytest.raises(InvalidArgument):
            LearnerParams(muthresh=1.0)


class TestRmse:
    def test_atoms_as_samples(self, rng):
        a = init_dct_codebook(6, 10).atoms
        assert reconstruction_rmse(a.T, a, EncoderParams(sparsity_k=1)) < 1e-9

    def test_zero_samples(self):
        a = init_dct_codebook(4, 8).atoms
        v = reconstruction_rmse(np.zeros((3, 4)), a, EncoderParams())
        assert np.isfinite(v) and v > 0

    def test_dense_oracle(self, rng):
        a = rng.normal(size=(5, 9))
        a /= np.linalg.norm(a, axis=0)
        y = rng.normal(size=(11, 5))
        params = EncoderParams(sparsity_k=3)
        idx, w = encode_batch(y, a, params)
        x = np.zeros((9, 11))
        for n in range(11):
            x[idx[n], n] = w[n]
        ref = np.linalg.norm(y.T - a @ x) / math.sqrt(5 * 11)
        assert abs(reconstruction_rmse(y, a, params) - ref) < 1e-12

    def test_mismatch(self, rng):
        with pytest.raises(DimensionMismatch):
            reconstruction_rmse(np.zeros((2, 3)), np.eye(4))


class TestFile:
    def test_round_trip(self, tmp_path, rng):
        cb, _ = learn_codebook(rng.normal(size=(60, 4)), LearnerParams(iterations=1), size_m=8)
        cb.save(tmp_path / "a.sdct")
        back = Codebook.load(tmp_path / "a.sdct")
        assert np.array_equal(back.atoms, cb.atoms)
        assert back.trained_with == cb.trained_with
        back.save(tmp_path / "b.sdct")
        assert (tmp_path / "a.sdct").read_bytes() == (tmp_path / "b.sdct").read_bytes()

    def test_layout(self):
        cb = Codebook(np.arange(6, dtype=float).reshape(2, 3))
        data = cb.to_bytes()
        assert data[:4] == b"SDCT"
        assert data[4:16] == (1).to_bytes(4, "little") + (2).to_bytes(4, "little") + (3).to_bytes(4, "little")
        col_major = np.frombuffer(data[16:64], dtype="<f8")
        np.testing.assert_array_equal(col_major, [0, 3, 1, 4, 2, 5])
        assert data[64:] == b"null"

    def test_corrupt(self):
        with pytest.raises(CorruptData):
            Codebook.from_bytes(b"XXXX" + bytes(20))
        good = Codebook(np.eye(2)).to_bytes()
        with pytest.raises(CorruptData):
            Codebook.from_bytes(good[:30])

    def test_trace_csv(self):
        t = LearningTrace([0.5, 0.25], [3, 0])
        assert t.to_csv() == "iteration,rmse,replacements\n1,0.5,3\n2,0.25,0\n"
