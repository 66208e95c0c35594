import numpy as np
import pytest

from neulay.errors import (
    ConsistencyError,
    FormatError,
    ParameterError,
    ValidationError,
)
from neulay.features import DenseFeatureMap
from neulay.pca import (
    DEFAULT_SAMPLE_COUNT,
    CoefficientMap,
    PcaProjector,
    fit_pca,
    load_projector,
    project,
    reconstruct,
    sample_feature_vectors,
    save_projector,
)


def make_map(seed, h=4, w=4, c=6, source="src"):
    rng = np.random.default_rng(seed)
    vals = rng.standard_normal((h, w, c)).astype(np.float32)
    return DenseFeatureMap(h, w, c, 4, vals, source)


def brute_force_pca(samples, n):
    """Independent oracle: covariance eigendecomposition from first principles."""
    samples = np.asarray(samples, dtype=np.float64)
    mean = samples.mean(axis=0)
    x = samples - mean
    cov = x.T @ x / (samples.shape[0] - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:n]
    return mean, vecs[:, order].T, vals[order]


def principal_angles(a, b):
    """Angles between the row spaces of a and b."""
    qa, _ = np.linalg.qr(a.T)
    qb, _ = np.linalg.qr(b.T)
    sv = np.linalg.svd(qa.T @ qb, compute_uv=False)
    return np.arccos(np.clip(sv, -1.0, 1.0))


class TestSampleFeatureVectors:
    def test_default_count(self):
        import inspect

        sig = inspect.signature(sample_feature_vectors)
        assert sig.parameters["count"].default == 40_000
        assert DEFAULT_SAMPLE_COUNT == 40_000

    def test_exhaustive_shuffled(self):
        maps = [make_map(i, h=5, w=5, c=3) for i in range(4)]  # 100 vectors
        out = sample_feature_vectors(maps, 100, seed=1)
        assert out.shape == (100, 3)
        stacked = np.concatenate([m.flatten() for m in maps])
        assert not np.array_equal(out, stacked)  # order shuffled
        assert np.array_equal(
            np.sort(out.ravel()), np.sort(stacked.ravel())
        )  # same multiset

    def test_deterministic(self):
        maps = [make_map(i) for i in range(3)]
        a = sample_feature_vectors(maps, 20, seed=9)
        b = sample_feature_vectors(maps, 20, seed=9)
        assert np.array_equal(a, b)

    def test_undersized_warns(self):
        maps = [make_map(0, h=2, w=2, c=3)]
        with pytest.warns(UserWarning):
            out = sample_feature_vectors(maps, 50, seed=0)
        assert out.shape == (4, 3)

    def test_channel_mismatch(self):
        with pytest.raises(ConsistencyError):
            sample_feature_vectors([make_map(0, c=3), make_map(1, c=4)], 10, 0)


class TestFitPca:
    def test_line_direction(self):
        rng = np.random.default_rng(0)
        t = rng.standard_normal(500)
        noise = 1e-3 * rng.standard_normal((500, 2))
        samples = np.stack([t, t], axis=1) + noise
        proj = fit_pca(samples, 1)
        expected = np.array([1.0, 1.0]) / np.sqrt(2)
        # oracle check on the same samples
        _, oracle_comps, _ = brute_force_pca(samples, 1)
        assert np.abs(np.abs(oracle_comps[0] @ expected) - 1) < 1e-5
        assert np.max(np.abs(proj.components[0] - expected)) < 1e-3
        assert principal_angles(proj.components, oracle_comps).max() < 1e-6

    def test_constant_samples(self):
        samples = np.ones((10, 4)) * 3.0
        proj = fit_pca(samples, 2)
        assert np.allclose(proj.explained_variance, 0.0)
        coeffs = (samples - proj.mean) @ proj.components.T
        assert np.allclose(coeffs, 0.0)

    def test_full_rank_reconstruction(self):
        rng = np.random.default_rng(1)
        samples = rng.standard_normal((40, 6))
        proj = fit_pca(samples, 6)
        coeffs = (samples - proj.mean) @ proj.components.T
        recon = coeffs @ proj.components + proj.mean
        rel = np.linalg.norm(recon - samples, axis=1) / np.linalg.norm(
            samples, axis=1
        )
        assert rel.max() < 1e-5

    def test_too_many_components(self):
        with pytest.raises(ParameterError):
            fit_pca(np.zeros((5, 3)), 4)
        with pytest.raises(ParameterError):
            fit_pca(np.zeros((3, 10)), 4)
        with pytest.raises(ParameterError):
            fit_pca(np.zeros((1, 3)), 1)

    def test_rank_deficient_completion(self):
        rng = np.random.default_rng(2)
        base = rng.standard_normal((30, 2))
        samples = base @ rng.standard_normal((2, 5))  # rank 2 in 5-d
        proj = fit_pca(samples, 4, seed=3)
        gram = proj.components @ proj.components.T
        assert np.abs(gram - np.eye(4)).max() < 1e-6
        assert np.all(proj.explained_variance[2:] == 0.0)

    def test_sign_convention(self):
        rng = np.random.default_rng(3)
        samples = rng.standard_normal((50, 4))
        proj = fit_pca(samples, 4)
        for row in proj.components:
            assert row[np.argmax(np.abs(row))] > 0

    def test_deterministic_including_signs(self):
        rng = np.random.default_rng(4)
        samples = rng.standard_normal((60, 8))
        a = fit_pca(samples, 5, seed=7)
        b = fit_pca(samples, 5, seed=7)
        assert np.array_equal(a.components, b.components)
        assert np.array_equal(a.mean, b.mean)

    def test_oracle_equivalence_sweep(self):
        rng = np.random.default_rng(5)
        for trial in range(20):
            m = int(rng.integers(5, 50))
            c = int(rng.integers(2, min(m, 20)))
            n = int(rng.integers(1, c + 1))
            samples = rng.standard_normal((m, c))
            proj = fit_pca(samples, n)
            _, oracle_comps, _ = brute_force_pca(samples, n)
            assert principal_angles(proj.components, oracle_comps).max() < 1e-5

    def test_projection_energy_bound(self):
        rng = np.random.default_rng(6)
        samples = rng.standard_normal((40, 10))
        proj = fit_pca(samples, 4)
        for x in samples:
            a = proj.components @ (x - proj.mean)
            assert np.sum(a**2) <= np.sum((x - proj.mean) ** 2) + 1e-6


class TestProjectReconstruct:
    def _fitted(self, c=6, n=4, seed=0):
        rng = np.random.default_rng(seed)
        samples = rng.standard_normal((100, c))
        return fit_pca(samples, n)

    def test_mean_cell_zero(self):
        proj = self._fitted()
        vals = np.tile(proj.mean.astype(np.float32), (2, 2, 1))
        fmap = DenseFeatureMap(2, 2, 6, 1, vals, "")
        out = project(fmap, proj)
        assert np.abs(out.values).max() < 1e-6

    def test_component_direction(self):
        proj = self._fitted()
        cell = proj.mean + 2.0 * proj.components[0]
        vals = np.tile(cell.astype(np.float32), (1, 1, 1))
        out = project(DenseFeatureMap(1, 1, 6, 1, vals, ""), proj)
        expected = np.zeros(4)
        expected[0] = 2.0
        assert np.max(np.abs(out.values[0, 0] - expected)) < 1e-6

    def test_matches_per_cell_oracle(self):
        proj = self._fitted()
        fmap = make_map(10, c=6)
        out = project(fmap, proj)
        for i in range(fmap.height_patches):
            for j in range(fmap.width_patches):
                expected = np.array(
                    [
                        np.dot(comp, fmap.values[i, j].astype(np.float64) - proj.mean)
                        for comp in proj.components
                    ]
                )
                assert np.max(np.abs(out.values[i, j] - expected)) < 1e-6

    def test_channel_mismatch(self):
        proj = self._fitted(c=6)
        with pytest.raises(Exception):
            project(make_map(0, c=5), proj)

    def test_full_rank_roundtrip(self):
        proj = self._fitted(c=6, n=6)
        fmap = make_map(11, c=6)
        recon = reconstruct(project(fmap, proj), proj)
        rel = np.abs(recon.values - fmap.values) / (np.abs(fmap.values) + 1e-6)
        assert rel.max() < 1e-5

    def test_zero_coeffs_give_mean(self):
        proj = self._fitted()
        coeffs = CoefficientMap(2, 2, 4, np.zeros((2, 2, 4)))
        recon = reconstruct(coeffs, proj)
        assert np.allclose(recon.values, proj.mean, atol=1e-6)

    def test_monotone_reconstruction_error(self):
        rng = np.random.default_rng(12)
        samples = rng.standard_normal((200, 8)) @ np.diag(
            [4, 3, 2.5, 2, 1.5, 1, 0.5, 0.2]
        )
        fmap = DenseFeatureMap(
            10, 20, 8, 1, samples.reshape(10, 20, 8).astype(np.float32), ""
        )
        errors = []
        for n in range(1, 9):
            proj = fit_pca(samples, n)
            recon = reconstruct(project(fmap, proj), proj)
            errors.append(np.mean((recon.values - fmap.values) ** 2))
        assert all(b <= a + 1e-9 for a, b in zip(errors, errors[1:]))


class TestProjectorSerialization:
    def _fitted(self):
        rng = np.random.default_rng(0)
        return fit_pca(rng.standard_normal((50, 6)), 3, source_id="toy:dino")

    def test_roundtrip_bit_identical(self, tmp_path):
        proj = self._fitted()
        path = tmp_path / "p.nlpc"
        save_projector(proj, path)
        loaded = load_projector(path)
        assert np.array_equal(loaded.mean, proj.mean)
        assert np.array_equal(loaded.components, proj.components)
        assert np.array_equal(loaded.explained_variance, proj.explained_variance)
        assert loaded.sample_count == proj.sample_count
        assert loaded.source_id == proj.source_id

    def test_non_orthonormal_rejected(self, tmp_path):
        proj = self._fitted()
        proj.components[0] *= 1.5  # break orthonormality beyond 1e-4
        path = tmp_path / "bad.nlpc"
        save_projector(proj, path)
        with pytest.raises(ValidationError):
            load_projector(path)

    def test_increasing_variance_rejected(self, tmp_path):
        proj = self._fitted()
        proj.explained_variance[:] = [1.0, 2.0, 3.0]
        path = tmp_path / "bad.nlpc"
        save_projector(proj, path)
        with pytest.raises(ValidationError):
            load_projector(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.nlpc"
        path.write_bytes(b"ZZZZ" + b"\x00" * 32)
        with pytest.raises(FormatError):
            load_projector(path)
