import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from egoexo.features import (FeatureFormatError, FeatureMatrix, FeatureStore, PcaModel, hoof,
                             hoof_from_vectors, pca_apply, pca_fit, pca_reconstruct,
                             read_feature_matrix, write_feature_matrix)
from egoexo.flow import FlowClip, FlowField, flip_clip, rotate_clip

BIN = 2 * np.pi / 32


def _clip(u, v):
    return FlowClip("c", (FlowField(np.atleast_2d(u), np.atleast_2d(v)),))


def _bin_center_clip(rng, n=20, fields=3):
    """Vectors only at bin-centre angles, random magnitudes."""
    out = []
    for _ in range(fields):
        k = rng.integers(0, 32, size=(1, n))
        r = rng.uniform(0.1, 3.0, size=(1, n))
        ang = (k + 0.5) * BIN
        out.append(FlowField(r * np.cos(ang), r * np.sin(ang)))
    return FlowClip("c", tuple(out))


flow_arrays = arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 5), st.integers(1, 5)),
                     elements=st.floats(-50, 50, allow_nan=False))


class TestHoof:
    def test_two_vector_hand_case(self):
        h = hoof(_clip([1.0, 0.0], [0.0, 3.0]))
        assert h[0] == pytest.approx(0.25, abs=1e-12)
        assert h[8] == pytest.approx(0.75, abs=1e-12)
        assert np.count_nonzero(h) == 2

    def test_zero_flow_is_uniform(self):
        h = hoof(_clip(np.zeros((4, 4)), np.zeros((4, 4))))
        np.testing.assert_array_equal(h, np.full(32, 1 / 32))

    def test_negative_angles_wrap(self):
        # angle -pi/2 lands in the 3/4-turn bin
        h = hoof(_clip([0.0], [-1.0]))
        assert h[24] == 1.0

    def test_rotation_shifts_by_one_bin(self, rng):
        clip = _bin_center_clip(rng)
        np.testing.assert_allclose(hoof(rotate_clip(clip, BIN)), np.roll(hoof(clip), 1), atol=1e-12)

    def test_flip_permutes_bins(self, rng):
        clip = _bin_center_clip(rng)
        perm = [(15 - b) % 32 for b in range(32)]
        expected = np.zeros(32)
        expected[perm] = hoof(clip)
        np.testing.assert_allclose(hoof(flip_clip(clip)), expected, atol=1e-12)

    def test_bin_count(self):
        assert hoof(_clip([1.0], [1.0]), bin_count=8).shape == (8,)
        with pytest.raises(ValueError):
            hoof_from_vectors(np.ones(2), np.ones(2), bin_count=1)

    @given(flow_arrays, st.data())
    def test_descriptor_invariants(self, u, data):
        v = data.draw(arrays(np.float64, u.shape, elements=st.floats(-50, 50, allow_nan=False)))
        h = hoof(FlowClip.from_arrays("c", u, v))
        assert h.shape == (32,) and (h >= 0).all()
        assert abs(h.sum() - 1.0) <= 1e-9

    @given(flow_arrays, st.floats(1e-3, 1e3))
    def test_scale_invariance(self, u, c):
        v = np.roll(u, 1)
        a = hoof(FlowClip.from_arrays("c", u, v))
        b = hoof(FlowClip.from_arrays("c", c * u, c * v))
        np.testing.assert_allclose(a, b, atol=1e-12)


def _rank3(rng, n=1000, d=50):
    basis = np.linalg.qr(rng.normal(size=(d, 3)))[0]
    return rng.normal(size=(n, 3)) * [5.0, 2.0, 1.0] @ basis.T + rng.normal(size=d)


class TestPca:
    def test_subspace_recovery(self, rng):
        x = _rank3(rng)
        m = pca_fit(x, 3)
        rec = pca_reconstruct(m, pca_apply(m, x))
        assert np.linalg.norm(rec - x) / np.linalg.norm(x) < 1e-8
        np.testing.assert_allclose(rec, x, atol=1e-8)

    def test_rank_one(self, rng):
        d = rng.normal(size=10)
        x = rng.normal(size=10) + rng.normal(size=(200, 1)) * d
        m = pca_fit(x, 4)
        assert m.eigenvalues[0] > 0
        np.testing.assert_allclose(m.eigenvalues[1:], 0.0, atol=1e-10)

    def test_full_size_shapes(self, rng):
        x = rng.normal(size=(200, 4096))
        m = pca_fit(FeatureMatrix("c3d4096", [f"c{i}" for i in range(200)], x), 128)
        assert m.components.shape == (128, 4096)
        np.testing.assert_allclose(m.components @ m.components.T, np.eye(128), atol=1e-8)
        out = pca_apply(m, FeatureMatrix("c3d4096", [f"c{i}" for i in range(200)], x))
        assert out.kind == "c3d128" and out.dim == 128

    def test_mean_projects_to_zero(self, rng):
        x = _rank3(rng, 300, 20)
        m = pca_fit(x, 3)
        np.testing.assert_allclose(pca_apply(m, m.mean[None]), 0.0, atol=1e-10)
        np.testing.assert_allclose(pca_apply(m, (m.mean + m.components[0])[None]), [[1, 0, 0]], atol=1e-10)

    def test_sign_rule_and_order(self, rng):
        m = pca_fit(_rank3(rng, 300, 20), 3)
        for c in m.components:
            assert c[np.argmax(np.abs(c))] > 0
        assert np.all(np.diff(m.eigenvalues) <= 0)

    def test_deterministic(self, rng):
        x = rng.normal(size=(60, 12))
        a, b = pca_fit(x, 5), pca_fit(x.copy(), 5)
        assert a.components.tobytes() == b.components.tobytes()

    def test_errors(self, rng):
        with pytest.raises(ValueError):
            pca_fit(rng.normal(size=(5, 10)), 5)
        bad = rng.normal(size=(30, 4))
        bad[3, 1] = np.inf
        with pytest.raises(ValueError):
            pca_fit(bad, 2)
        with pytest.raises(ValueError):
            pca_fit(FeatureMatrix("hoof32", [f"c{i}" for i in range(40)], rng.normal(size=(40, 32))), 3)
        m = pca_fit(rng.normal(size=(30, 6)), 2)
        with pytest.raises(ValueError):
            pca_apply(m, rng.normal(size=(3, 7)))

    def test_save_load(self, tmp_path, rng):
        m = pca_fit(rng.normal(size=(40, 6)), 3)
        m.save(tmp_path / "p.npz")
        m2 = PcaModel.load(tmp_path / "p.npz")
        np.testing.assert_array_equal(m.components, m2.components)

    @given(st.integers(0, 2**31 - 1), st.integers(8, 40))
    def test_projected_means_vanish(self, seed, n):
        x = np.random.default_rng(seed).normal(size=(n, 6)) * 3 + 1
        z = pca_apply(pca_fit(x, 4), x)
        np.testing.assert_allclose(z.mean(axis=0), 0.0, atol=1e-9)


class TestFeatureMatrix:
    def test_invariants(self, rng):
        with pytest.raises(ValueError):
            FeatureMatrix("hoof32", ["a"], rng.normal(size=(1, 31)))
        with pytest.raises(ValueError):
            FeatureMatrix("hoof32", ["a", "a"], rng.normal(size=(2, 32)))
        fm = FeatureMatrix("hoof32", ["a", "b"], rng.normal(size=(2, 32)))
        assert "a" in fm and fm["b"].shape == (32,)
        assert list(fm.subset(["b"]).ids) == ["b"]

    def test_store_round_trip(self, tmp_path, rng):
        fm = FeatureMatrix("hoof32", ["x", "y", "z"], rng.normal(size=(3, 32)))
        p = FeatureStore(tmp_path).save("train", fm)
        assert p.name == "train_hoof32.xvft"
        back = FeatureStore(tmp_path).load("train", "hoof32")
        np.testing.assert_array_equal(back.data, fm.data.astype(np.float32).astype(np.float64))
        assert list(back.ids) == ["x", "y", "z"]
        assert p.read_bytes()[:4] == b"XVFT"

    def test_missing_table(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            FeatureStore(tmp_path).load("test", "hoof32")

    def test_bad_header(self, tmp_path, rng):
        fm = FeatureMatrix("hoof32", ["x"], rng.normal(size=(1, 32)))
        p = tmp_path / "t.xvft"
        write_feature_matrix(p, fm)
        p.write_bytes(b"ABCD" + p.read_bytes()[4:])
        with pytest.raises(FeatureFormatError):
            read_feature_matrix(p)
