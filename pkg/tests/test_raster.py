import numpy as np
import pytest

from mcae.errors import DataError, EmptyMaskError, RleFormatError, TileRangeError
from mcae.raster import (
    LabelRaster,
    MaskRecord,
    Relation,
    RunLengthMask,
    Scale,
    TileGrid,
    global_frame,
    mask_relation,
    oem8_schema,
    read_label_raster,
    read_mask_set,
    rle_encode,
    rle_from_array,
    write_label_raster,
    write_mask_set,
)


def pixel_set(mask: RunLengthMask) -> set:
    """Oracle: materialize the mask as a set of global (x, y) pixels."""
    x0, y0, w, h = mask.bbox
    bits = mask.decode()
    return {(x0 + x, y0 + y) for y in range(h) for x in range(w) if bits[y, x]}


def relation_oracle(a: RunLengthMask, b: RunLengthMask):
    sa, sb = pixel_set(a), pixel_set(b)
    inter = len(sa & sb)
    if inter == 0:
        rel = Relation.DISJOINT
    elif sa == sb:
        rel = Relation.EQUAL
    elif sa < sb:
        rel = Relation.A_INSIDE_B
    elif sb < sa:
        rel = Relation.B_INSIDE_A
    else:
        rel = Relation.PARTIAL
    return rel, inter


class TestRle:
    def test_full_block(self):
        mask = rle_encode(np.ones((4, 4), bool), (0, 0, 4, 4))
        assert mask.runs == (0, 16)
        assert mask.area == 16

    def test_single_pixel(self):
        bitmap = np.zeros((2, 2), bool)
        bitmap[0, 0] = True
        mask = rle_encode(bitmap, (0, 0, 2, 2))
        assert mask.runs == (0, 1, 3)
        assert mask.area == 1

    def test_round_trip_random(self):
        rng = np.random.default_rng(42)
        for _ in range(100):
            bitmap = rng.random((8, 8)) < 0.5
            if not bitmap.any():
                bitmap[0, 0] = True
            mask = rle_encode(bitmap, (3, 5, 8, 8))
            # per-pixel comparison oracle
            assert (mask.decode() == bitmap).all()
            assert mask.area == int(bitmap.sum())

    def test_empty_mask_rejected(self):
        with pytest.raises(EmptyMaskError):
            rle_encode(np.zeros((3, 3), bool), (0, 0, 3, 3))

    def test_canonical_form_enforced(self):
        with pytest.raises(RleFormatError):
            RunLengthMask(bbox=(0, 0, 2, 2), runs=(1, 0, 3))  # interior zero
        with pytest.raises(RleFormatError):
            RunLengthMask(bbox=(0, 0, 2, 2), runs=(1, 2))  # wrong sum

    def test_tight_reencode(self):
        bitmap = np.zeros((6, 6), bool)
        bitmap[2:4, 3:5] = True
        tight = rle_from_array(bitmap, origin=(10, 20))
        assert tight.bbox == (13, 22, 2, 2)
        assert tight.area == 4


class TestRelation:
    def test_identical(self):
        a = rle_encode(np.ones((3, 3), bool), (1, 1, 3, 3))
        rel, inter = mask_relation(a, a)
        assert rel == Relation.EQUAL
        assert inter == a.area

    def test_distinct_single_pixels(self):
        a = rle_encode(np.ones((1, 1), bool), (0, 0, 1, 1))
        b = rle_encode(np.ones((1, 1), bool), (5, 5, 1, 1))
        assert mask_relation(a, b) == (Relation.DISJOINT, 0)

    def test_random_pairs_match_oracle(self):
        rng = np.random.default_rng(0)
        masks = []
        for _ in range(60):
            w, h = int(rng.integers(1, 7)), int(rng.integers(1, 7))
            bitmap = rng.random((h, w)) < 0.6
            if not bitmap.any():
                bitmap[0, 0] = True
            x0, y0 = int(rng.integers(0, 6)), int(rng.integers(0, 6))
            masks.append(rle_encode(bitmap, (x0, y0, w, h)))
        checked = 0
        for i in range(len(masks)):
            for j in range(len(masks)):
                if checked >= 500:
                    break
                a, b = masks[i], masks[j]
                assert mask_relation(a, b) == relation_oracle(a, b)
                checked += 1

    def test_symmetry_and_intersection_bound(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            bm1 = rng.random((5, 5)) < 0.5
            bm2 = rng.random((5, 5)) < 0.5
            bm1[0, 0] = bm2[0, 0] = True
            a = rle_encode(bm1, (0, 0, 5, 5))
            b = rle_encode(bm2, (2, 1, 5, 5))
            rel_ab, inter_ab = mask_relation(a, b)
            rel_ba, inter_ba = mask_relation(b, a)
            assert inter_ab == inter_ba <= min(a.area, b.area)
            mirror = {
                Relation.A_INSIDE_B: Relation.B_INSIDE_A,
                Relation.B_INSIDE_A: Relation.A_INSIDE_B,
            }
            assert rel_ba == mirror.get(rel_ab, rel_ab)


class TestGlobalFrame:
    def test_origin_tile_unchanged(self):
        grid = TileGrid(tile_size=1024, rows=2, cols=2, overlap_ratio=0.0)
        rec = MaskRecord(1, (0, 0), Scale.FINE, rle_encode(np.ones((2, 2), bool), (5, 6, 2, 2)))
        assert global_frame(rec, grid).bbox == (5, 6, 2, 2)

    def test_half_overlap_offset(self):
        grid = TileGrid(tile_size=1024, rows=2, cols=2, overlap_ratio=0.5)
        rec = MaskRecord(1, (0, 1), Scale.FINE, rle_encode(np.ones((2, 2), bool), (0, 0, 2, 2)))
        assert global_frame(rec, grid).bbox == (512, 0, 2, 2)

    def test_out_of_range_tile(self):
        grid = TileGrid(tile_size=64, rows=1, cols=1)
        rec = MaskRecord(1, (0, 3), Scale.FINE, rle_encode(np.ones((1, 1), bool), (0, 0, 1, 1)))
        with pytest.raises(TileRangeError):
            global_frame(rec, grid)

    def test_area_invariant_random(self):
        rng = np.random.default_rng(11)
        grid = TileGrid(tile_size=128, rows=4, cols=4, overlap_ratio=0.5)
        for _ in range(50):
            bitmap = rng.random((6, 6)) < 0.5
            bitmap[0, 0] = True
            rec = MaskRecord(
                1,
                (int(rng.integers(0, 4)), int(rng.integers(0, 4))),
                Scale.FINE,
                rle_encode(bitmap, (int(rng.integers(0, 100)), int(rng.integers(0, 100)), 6, 6)),
            )
            moved = global_frame(rec, grid)
            assert moved.area == rec.mask.area
            assert len(pixel_set(moved)) == len(pixel_set(rec.mask))


class TestSchema:
    def test_default(self):
        schema = oem8_schema()
        assert schema.num_classes == 9
        assert schema.class_name(7) == "building"
        assert schema.ignore_id == 255

    def test_invariants(self):
        with pytest.raises(DataError):
            # non-contiguous ids
            from mcae.raster import ClassSchema

            ClassSchema("bad", ((0, "a", (0, 0, 0)), (2, "b", (1, 1, 1))))


class TestIo:
    def test_label_raster_round_trip(self, tmp_path):
        data = np.arange(48, dtype=np.uint8).reshape(6, 8) % 9
        raster = LabelRaster(8, 6, data, pixel_size_m=0.6)
        write_label_raster(raster, tmp_path / "r.png", "oem8")
        back, schema_name = read_label_raster(tmp_path / "r.png")
        assert schema_name == "oem8"
        assert back.pixel_size_m == 0.6
        assert (back.data == data).all()

    def test_mask_set_round_trip(self, tmp_path):
        rng = np.random.default_rng(5)
        records = []
        for i in range(10):
            bitmap = rng.random((4, 4)) < 0.5
            bitmap[0, 0] = True
            records.append(
                MaskRecord(i, (0, i % 3), Scale.FINE, rle_encode(bitmap, (i, 2 * i, 4, 4)))
            )
        write_mask_set(records, tmp_path / "m.jsonl")
        back = read_mask_set(tmp_path / "m.jsonl")
        assert back == records

    def test_duplicate_id_rejected(self, tmp_path):
        rec = MaskRecord(1, (0, 0), Scale.FINE, rle_encode(np.ones((1, 1), bool), (0, 0, 1, 1)))
        write_mask_set([rec, rec], tmp_path / "dup.jsonl")
        with pytest.raises(DataError):
            read_mask_set(tmp_path / "dup.jsonl")
