"""Least-squares embedding map: fitting, application, evaluation, persistence."""

import hashlib

import numpy as np
import pytest

from laden import diet
from laden.encoder import Embedding
from laden.errors import (
    AlignmentError,
    CorruptFileError,
    EncoderConflictError,
    InvalidArgumentError,
)
from laden.serialization import ROLE_CLEAN, ROLE_NOISY, write_embedding_cache


def write_caches(tmp_path, clean, noisy, encoder_id="enc-t"):
    """Column-stacked (d, K) arrays -> two cache files."""
    d, k = clean.shape
    ids = [f"u{i:03d}" for i in range(k)]
    cpath, npath = tmp_path / "clean.bin", tmp_path / "noisy.bin"
    write_embedding_cache(cpath, encoder_id, d, [(ids[i], ROLE_CLEAN, clean[:, i]) for i in range(k)])
    write_embedding_cache(npath, encoder_id, d, [(ids[i], ROLE_NOISY, noisy[:, i]) for i in range(k)])
    return cpath, npath


class TestFit:
    def test_identity_when_clean_equals_noisy(self, tmp_path):
        """Full-rank data with clean == noisy fits the identity to 1e-8."""
        rng = np.random.default_rng(0)
        emb = rng.standard_normal((8, 40))
        cpath, npath = write_caches(tmp_path, emb, emb)
        fitted = diet.fit(cpath, npath)
        assert not fitted.rank_deficient
        assert np.linalg.norm(fitted.matrix - np.eye(8)) < 1e-8

    def test_exact_linear_recovery(self):
        """x = M y exactly with K = 4d random y recovers M to 1e-8 relative."""
        rng = np.random.default_rng(1)
        d = 32
        target = rng.standard_normal((d, d))
        noisy = rng.standard_normal((d, 4 * d))
        clean = target @ noisy
        fitted = diet.fit_arrays(clean, noisy)
        rel = np.linalg.norm(fitted.matrix - target) / np.linalg.norm(target)
        assert rel < 1e-8
        assert fitted.fit_residual < 1e-16

    def test_ridge_regularized_solution(self):
        """Tikhonov solve differs from plain least squares and stays finite."""
        rng = np.random.default_rng(2)
        noisy = rng.standard_normal((6, 30))
        clean = rng.standard_normal((6, 30))
        plain = diet.fit_arrays(clean, noisy, ridge=0.0)
        ridged = diet.fit_arrays(clean, noisy, ridge=10.0)
        assert np.all(np.isfinite(ridged.matrix))
        assert np.linalg.norm(ridged.matrix) < np.linalg.norm(plain.matrix)

    def test_rank_deficient_flagged(self):
        rng = np.random.default_rng(3)
        noisy = np.zeros((6, 20))
        noisy[:3] = rng.standard_normal((3, 20))
        clean = rng.standard_normal((6, 20))
        fitted = diet.fit_arrays(clean, noisy)
        assert fitted.rank_deficient

    def test_misaligned_caches_raise(self, tmp_path):
        rng = np.random.default_rng(4)
        emb = rng.standard_normal((4, 6))
        cpath, _ = write_caches(tmp_path, emb, emb)
        other = tmp_path / "other.bin"
        write_embedding_cache(
            other, "enc-t", 4, [(f"x{i}", ROLE_NOISY, emb[:, i]) for i in range(6)]
        )
        with pytest.raises(AlignmentError):
            diet.fit(cpath, other)

    def test_encoder_mismatch_between_caches(self, tmp_path):
        rng = np.random.default_rng(5)
        emb = rng.standard_normal((4, 6))
        cpath, _ = write_caches(tmp_path, emb, emb, encoder_id="enc-a")
        other = tmp_path / "o.bin"
        write_embedding_cache(other, "enc-b", 4, [(f"u{i:03d}", ROLE_NOISY, emb[:, i]) for i in range(6)])
        with pytest.raises(AlignmentError):
            diet.fit(cpath, other)

    def test_affine_variant_recovers_offset(self):
        """With the affine flag, x = M y + b is recovered exactly; the default
        stays strictly linear (no offset)."""
        rng = np.random.default_rng(14)
        d = 8
        target = rng.standard_normal((d, d))
        bias = rng.standard_normal(d)
        noisy = rng.standard_normal((d, 6 * d))
        clean = target @ noisy + bias[:, None]
        plain = diet.fit_arrays(clean, noisy)
        assert plain.offset is None
        fitted = diet.fit_arrays(clean, noisy, affine=True)
        assert np.linalg.norm(fitted.matrix - target) / np.linalg.norm(target) < 1e-8
        assert np.linalg.norm(fitted.offset - bias) / np.linalg.norm(bias) < 1e-8

    def test_affine_roundtrip(self, tmp_path):
        rng = np.random.default_rng(15)
        d = 6
        noisy = rng.standard_normal((d, 5 * d))
        clean = rng.standard_normal((d, 5 * d))
        fitted = diet.fit_arrays(clean, noisy, affine=True, encoder_id="enc-t")
        path = tmp_path / "aff.bin"
        diet.save(fitted, path)
        back = diet.load(path)
        assert np.array_equal(back.matrix, fitted.matrix)
        assert np.array_equal(back.offset, fitted.offset)
        emb = Embedding(rng.standard_normal(d), "enc-t")
        np.testing.assert_allclose(
            diet.apply(back, emb).vector, fitted.matrix @ emb.vector + fitted.offset, atol=1e-12
        )

    def test_least_squares_optimality(self):
        """No random perturbation of the solution decreases the residual."""
        rng = np.random.default_rng(6)
        d, k = 8, 64
        noisy = rng.standard_normal((d, k))
        clean = rng.standard_normal((d, k))
        fitted = diet.fit_arrays(clean, noisy)
        base = np.linalg.norm(clean - fitted.matrix @ noisy)
        for _ in range(100):
            direction = rng.standard_normal((d, d))
            direction *= 1e-3 / np.linalg.norm(direction)
            perturbed = np.linalg.norm(clean - (fitted.matrix + direction) @ noisy)
            assert perturbed >= base - 1e-12


class TestApply:
    def make_map(self, matrix, encoder_id="enc-t"):
        d = matrix.shape[0]
        return diet.DietMap(
            matrix=matrix, encoder_id=encoder_id, source_manifest_id="m",
            k_samples=4 * d, fit_residual=0.0,
        )

    def test_identity_map(self):
        m = self.make_map(np.eye(3))
        emb = Embedding(np.array([1.0, 2.0, 3.0]), "enc-t", "u")
        assert np.array_equal(diet.apply(m, emb).vector, emb.vector)

    def test_zero_vector(self):
        m = self.make_map(np.eye(2))
        emb = Embedding(np.zeros(2), "enc-t")
        assert np.array_equal(diet.apply(m, emb).vector, np.zeros(2))

    def test_hand_computed_2x2(self):
        m = self.make_map(np.array([[1.0, 2.0], [3.0, 4.0]]))
        emb = Embedding(np.array([1.0, 1.0]), "enc-t")
        np.testing.assert_allclose(diet.apply(m, emb).vector, [3.0, 7.0])

    def test_linearity(self):
        rng = np.random.default_rng(7)
        m = self.make_map(rng.standard_normal((5, 5)))
        u = rng.standard_normal(5)
        v = rng.standard_normal(5)
        lhs = diet.apply(m, Embedding(2.0 * u + 3.0 * v, "enc-t")).vector
        rhs = 2.0 * diet.apply(m, Embedding(u, "enc-t")).vector + 3.0 * diet.apply(
            m, Embedding(v, "enc-t")
        ).vector
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_encoder_conflict(self):
        m = self.make_map(np.eye(2), encoder_id="enc-a")
        with pytest.raises(EncoderConflictError):
            diet.apply(m, Embedding(np.ones(2), "enc-b"))

    def test_dimension_mismatch(self):
        m = self.make_map(np.eye(2))
        with pytest.raises(InvalidArgumentError):
            diet.apply(m, Embedding(np.ones(3), "enc-t"))


class TestEvaluate:
    def test_exact_fit_near_one(self, tmp_path):
        rng = np.random.default_rng(8)
        d = 16
        target = rng.standard_normal((d, d))
        noisy = rng.standard_normal((d, 8 * d))
        clean = target @ noisy
        cpath, npath = write_caches(tmp_path, clean, noisy)
        fitted = diet.fit(cpath, npath)
        report = fitted and diet.evaluate(fitted, cpath, npath)
        assert report.mean_sim_transformed >= 0.9999

    def test_identity_map_equal_means(self, tmp_path):
        rng = np.random.default_rng(9)
        clean = rng.standard_normal((6, 30))
        noisy = rng.standard_normal((6, 30))
        cpath, npath = write_caches(tmp_path, clean, noisy)
        m = diet.DietMap(np.eye(6), "enc-t", "m", 30, 0.0)
        report = diet.evaluate(m, cpath, npath)
        assert report.mean_sim_noisy == pytest.approx(report.mean_sim_transformed, abs=1e-12)

    def test_shifted_domain_ordering(self, tmp_path):
        """Shared linear map + bounded noise: transformed similarity beats raw
        on a held-out, distribution-shifted domain."""
        rng = np.random.default_rng(10)
        d = 16
        target = rng.standard_normal((d, d))
        src_noisy = rng.standard_normal((d, 8 * d))
        src_clean = target @ src_noisy + 0.05 * rng.standard_normal((d, 8 * d))
        cpath, npath = write_caches(tmp_path, src_clean, src_noisy)
        fitted = diet.fit(cpath, npath)
        shift_dir = tmp_path / "shift"
        shift_dir.mkdir()
        tgt_noisy = 2.0 * rng.standard_normal((d, 4 * d)) + 1.0
        tgt_clean = target @ tgt_noisy + 0.05 * rng.standard_normal((d, 4 * d))
        tc, tn = write_caches(shift_dir, tgt_clean, tgt_noisy)
        report = diet.evaluate(fitted, tc, tn)
        assert report.mean_sim_transformed > report.mean_sim_noisy

    def test_zero_norm_excluded_and_counted(self, tmp_path):
        rng = np.random.default_rng(11)
        clean = rng.standard_normal((4, 10))
        noisy = rng.standard_normal((4, 10))
        noisy[:, 3] = 0.0
        cpath, npath = write_caches(tmp_path, clean, noisy)
        m = diet.DietMap(np.eye(4), "enc-t", "m", 10, 0.0)
        report = diet.evaluate(m, cpath, npath)
        assert report.n_excluded == 1
        assert report.n_utterances == 9

    def test_similarities_bounded(self, tmp_path):
        rng = np.random.default_rng(12)
        clean = rng.standard_normal((5, 40))
        noisy = rng.standard_normal((5, 40))
        cpath, npath = write_caches(tmp_path, clean, noisy)
        fitted = diet.fit(cpath, npath)
        report = diet.evaluate(fitted, cpath, npath)
        for value in (report.mean_sim_noisy, report.mean_sim_transformed):
            assert -1.0 <= value <= 1.0


class TestPersistence:
    def test_roundtrip_bitwise(self, tmp_path):
        rng = np.random.default_rng(13)
        m = diet.DietMap(rng.standard_normal((6, 6)), "enc-t", "mani", 24, 0.123, ridge=1e-3)
        path = tmp_path / "m.bin"
        diet.save(m, path)
        back = diet.load(path)
        assert np.array_equal(back.matrix, m.matrix)
        assert back.encoder_id == m.encoder_id
        assert back.k_samples == m.k_samples
        assert back.fit_residual == m.fit_residual
        assert back.ridge == m.ridge
        diet.save(back, tmp_path / "m2.bin")
        h1 = hashlib.sha256(path.read_bytes()).hexdigest()
        h2 = hashlib.sha256((tmp_path / "m2.bin").read_bytes()).hexdigest()
        assert h1 == h2

    def test_truncated_file(self, tmp_path):
        m = diet.DietMap(np.eye(4), "enc-t", "m", 16, 0.0)
        path = tmp_path / "m.bin"
        diet.save(m, path)
        path.write_bytes(path.read_bytes()[:-16])
        with pytest.raises(CorruptFileError):
            diet.load(path)

    def test_corrupted_matrix(self, tmp_path):
        m = diet.DietMap(np.eye(4), "enc-t", "m", 16, 0.0)
        path = tmp_path / "m.bin"
        diet.save(m, path)
        raw = bytearray(path.read_bytes())
        raw[-1] ^= 0x01
        path.write_bytes(bytes(raw))
        with pytest.raises(CorruptFileError):
            diet.load(path)

    def test_small_k_requires_ridge_or_flag(self):
        with pytest.raises(InvalidArgumentError):
            diet.DietMap(np.eye(8), "enc-t", "m", k_samples=4, fit_residual=0.0)
        diet.DietMap(np.eye(8), "enc-t", "m", k_samples=4, fit_residual=0.0, ridge=0.1)
        diet.DietMap(np.eye(8), "enc-t", "m", k_samples=4, fit_residual=0.0, rank_deficient=True)
