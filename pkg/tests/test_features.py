import math
import struct

import numpy as np
import pytest

from mcae.errors import (
    DataError,
    DuplicateFeatureIdError,
    FeatureDimError,
    MaskBoundsError,
    NonFiniteFeatureError,
    NotNormalizedError,
)
from mcae.features import (
    ConsistencyLossConfig,
    FeatureTable,
    crop_consistency_score,
    export_features,
    handcrafted_descriptor,
    import_features,
    normalize,
)
from mcae.raster import rle_encode


def rect_mask(x0, y0, w, h):
    return rle_encode(np.ones((h, w), bool), (x0, y0, w, h))


def flat_image(h, w, color):
    img = np.empty((h, w, 3), np.uint8)
    img[:] = color
    return img


class TestDescriptor:
    def test_uniform_color_zero_std(self):
        img = flat_image(20, 20, (40, 80, 200))
        vec = handcrafted_descriptor(img, rect_mask(2, 2, 5, 5))
        assert vec.shape == (17,)
        assert math.isclose(float(np.linalg.norm(vec)), 1.0, abs_tol=1e-6)
        # std components (indices 3..5) are zero for a flat patch
        assert np.allclose(vec[3:6], 0.0)

    def test_deterministic(self):
        rng = np.random.default_rng(2)
        img = rng.integers(0, 256, (30, 30, 3)).astype(np.uint8)
        mask = rect_mask(4, 7, 9, 6)
        v1 = handcrafted_descriptor(img, mask)
        v2 = handcrafted_descriptor(img, mask)
        assert (v1 == v2).all()

    def test_translation_invariant(self):
        rng = np.random.default_rng(3)
        patch = rng.integers(0, 256, (6, 9, 3)).astype(np.uint8)
        img1 = flat_image(40, 40, (0, 0, 0))
        img2 = flat_image(40, 40, (0, 0, 0))
        img1[5 : 5 + 6, 7 : 7 + 9] = patch
        img2[20 : 20 + 6, 11 : 11 + 9] = patch
        v1 = handcrafted_descriptor(img1, rect_mask(7, 5, 9, 6))
        v2 = handcrafted_descriptor(img2, rect_mask(11, 20, 9, 6))
        assert np.allclose(v1, v2)

    def test_same_texture_more_similar(self):
        checker = np.zeros((16, 16, 3), np.uint8)
        checker[::2, ::2] = (250, 40, 40)
        checker[1::2, 1::2] = (250, 40, 40)
        flat = flat_image(16, 16, (40, 250, 40))
        mask = rect_mask(2, 2, 10, 10)
        c1 = handcrafted_descriptor(checker, mask)
        c2 = handcrafted_descriptor(np.roll(checker, 2, axis=1), mask)
        f1 = handcrafted_descriptor(flat, mask)
        same = float(c1 @ c2)
        cross = float(c1 @ f1)
        assert same > cross

    def test_out_of_bounds_rejected(self):
        img = flat_image(10, 10, (0, 0, 0))
        with pytest.raises(MaskBoundsError):
            handcrafted_descriptor(img, rect_mask(8, 8, 5, 5))


class TestMcft:
    def make_table(self, n=5, dim=8, seed=0):
        rng = np.random.default_rng(seed)
        entries = {i * 3: normalize(rng.normal(size=dim)) for i in range(n)}
        return FeatureTable(dim=dim, entries=entries)

    def test_round_trip(self, tmp_path):
        table = self.make_table()
        export_features(table, tmp_path / "t.mcft")
        back = import_features(tmp_path / "t.mcft")
        assert back.dim == table.dim
        assert set(back.entries) == set(table.entries)
        for key in table.entries:
            assert (back.entries[key] == table.entries[key]).all()
        # byte-level: re-export equals the first file
        export_features(back, tmp_path / "t2.mcft")
        assert (tmp_path / "t.mcft").read_bytes() == (tmp_path / "t2.mcft").read_bytes()

    def test_empty_table(self, tmp_path):
        export_features(FeatureTable(dim=12, entries={}), tmp_path / "e.mcft")
        back = import_features(tmp_path / "e.mcft")
        assert back.dim == 12
        assert len(back) == 0

    def test_nan_rejected(self, tmp_path):
        path = tmp_path / "bad.mcft"
        vec = np.full(4, np.nan, "<f4")
        path.write_bytes(b"MCFT" + struct.pack("<III", 1, 1, 4) + struct.pack("<Q", 7) + vec.tobytes())
        with pytest.raises(NonFiniteFeatureError):
            import_features(path)

    def test_duplicate_id_rejected(self, tmp_path):
        path = tmp_path / "dup.mcft"
        vec = normalize(np.ones(4)).astype("<f4").tobytes()
        payload = struct.pack("<Q", 7) + vec
        path.write_bytes(b"MCFT" + struct.pack("<III", 1, 2, 4) + payload + payload)
        with pytest.raises(DuplicateFeatureIdError):
            import_features(path)

    def test_size_mismatch_rejected(self, tmp_path):
        path = tmp_path / "short.mcft"
        path.write_bytes(b"MCFT" + struct.pack("<III", 1, 2, 4) + b"\x00" * 10)
        with pytest.raises(FeatureDimError):
            import_features(path)

    def test_mild_norm_drift_renormalized(self, tmp_path):
        path = tmp_path / "drift.mcft"
        vec = (normalize(np.ones(4)) * 1.0005).astype("<f4")
        path.write_bytes(b"MCFT" + struct.pack("<III", 1, 1, 4) + struct.pack("<Q", 1) + vec.tobytes())
        table = import_features(path)
        assert math.isclose(float(np.linalg.norm(table.vector(1))), 1.0, abs_tol=1e-6)

    def test_far_norm_rejected(self, tmp_path):
        path = tmp_path / "far.mcft"
        vec = (normalize(np.ones(4)) * 1.5).astype("<f4")
        path.write_bytes(b"MCFT" + struct.pack("<III", 1, 1, 4) + struct.pack("<Q", 1) + vec.tobytes())
        with pytest.raises(NotNormalizedError):
            import_features(path)


class TestConsistencyScore:
    def feature_map(self, h, w, d, fill):
        fmap = np.zeros((h, w, d))
        fmap[:] = fill
        return fmap

    def masks_grid(self, count):
        return [rect_mask(4 * i, 0, 3, 3) for i in range(count)]

    def test_single_mask_zero(self):
        fmap = self.feature_map(3, 12, 4, [1, 0, 0, 0])
        assert crop_consistency_score(fmap, fmap, self.masks_grid(1)) == 0.0

    def test_identical_embeddings_ln_m(self):
        # analytic: softmax over equal logits -> loss = ln M, any temperature
        for m in (2, 5, 9):
            fmap = self.feature_map(3, 4 * m, 4, [0.3, 0.1, 0.9, 0.2])
            loss = crop_consistency_score(fmap, fmap, self.masks_grid(m))
            assert math.isclose(loss, math.log(m), abs_tol=1e-9)

    def test_orthogonal_closed_form(self):
        # closed form at tau=1: -ln(e / (e + M - 1))
        for m in (2, 4, 8):
            fmap = np.zeros((3, 4 * m, m))
            for i in range(m):
                fmap[:, 4 * i : 4 * i + 3, i] = 1.0
            loss = crop_consistency_score(
                fmap, fmap, self.masks_grid(m), ConsistencyLossConfig(temperature=1.0)
            )
            expected = -math.log(math.e / (math.e + m - 1))
            assert math.isclose(loss, expected, abs_tol=1e-9)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(5)
        fmap_a = rng.normal(size=(3, 20, 6))
        fmap_b = rng.normal(size=(3, 20, 6))
        masks = self.masks_grid(5)
        base = crop_consistency_score(fmap_a, fmap_b, masks)
        shuffled = crop_consistency_score(fmap_a, fmap_b, masks[::-1])
        assert math.isclose(base, shuffled, rel_tol=1e-12)

    def test_non_negative_when_positives_dominate(self):
        # matched crops: every positive similarity is 1, no negative exceeds it
        rng = np.random.default_rng(7)
        for _ in range(20):
            m = int(rng.integers(2, 7))
            fmap = np.zeros((3, 4 * m, 5))
            for i in range(m):
                fmap[:, 4 * i : 4 * i + 3] = rng.normal(size=5)
            loss = crop_consistency_score(fmap, fmap, self.masks_grid(m))
            assert loss >= 0.0

    def test_empty_masks_rejected(self):
        fmap = self.feature_map(2, 2, 2, [1, 0])
        with pytest.raises(DataError):
            crop_consistency_score(fmap, fmap, [])
