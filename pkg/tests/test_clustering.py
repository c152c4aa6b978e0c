import numpy as np
import pytest

from mcae.clustering import (
    ClusterConfig,
    dbscan,
    hierarchical_cluster,
    majority_vote_label,
    window_cluster,
)
from mcae.errors import MissingFeatureError
from mcae.features import FeatureTable, normalize
from mcae.raster import (
    IGNORE_ID,
    LabelRaster,
    MaskRecord,
    Scale,
    TileGrid,
    rle_encode,
)


def reference_dbscan(points, eps, min_pts):
    """Independent O(N^2) DBSCAN: full distance matrix, textbook expansion.

    Mirrors the documented semantics: cosine distance, self-inclusive
    neighborhoods, id-sorted seeds, breadth-first growth.
    """
    pts = sorted(points, key=lambda p: p[0])
    n = len(pts)
    dist = [[1.0 - float(np.dot(pts[i][1], pts[j][1])) for j in range(n)] for i in range(n)]
    neighbors = [[j for j in range(n) if dist[i][j] <= eps] for i in range(n)]
    core = [len(nb) >= min_pts for nb in neighbors]
    labels = [None] * n
    cluster = 0
    for i in range(n):
        if labels[i] is not None or not core[i]:
            continue
        labels[i] = cluster
        frontier = [i]
        while frontier:
            nxt = []
            for p in frontier:
                if not core[p]:
                    continue
                for q in neighbors[p]:
                    if labels[q] is None:
                        labels[q] = cluster
                        nxt.append(q)
            frontier = nxt
        cluster += 1
    return {pts[i][0]: labels[i] for i in range(n) if labels[i] is not None}


def same_partition(a: dict, b: dict) -> bool:
    """Equality up to label renaming (noise = absent on both sides)."""
    if set(a) != set(b):
        return False
    groups_a: dict = {}
    groups_b: dict = {}
    for key in a:
        groups_a.setdefault(a[key], set()).add(key)
        groups_b.setdefault(b[key], set()).add(key)
    return set(map(frozenset, groups_a.values())) == set(map(frozenset, groups_b.values()))


def unit_angle(theta: float) -> np.ndarray:
    return np.array([np.cos(theta), np.sin(theta)])


class TestDbscan:
    def test_empty(self):
        assert dbscan([], 0.2, 3) == {}

    def test_identical_blob(self):
        vec = normalize(np.ones(4))
        points = [(i, vec) for i in range(7)]
        result = dbscan(points, 0.1, 7)
        assert set(result.values()) == {0}
        assert set(result) == set(range(7))

    def test_two_blobs_match_reference(self):
        rng = np.random.default_rng(21)
        points = []
        for i in range(20):
            points.append((i, unit_angle(0.0 + rng.normal(0, 0.02))))
        for i in range(20, 40):
            points.append((i, unit_angle(np.pi / 2 + rng.normal(0, 0.02))))
        mine = dbscan(points, 0.05, 5)
        ref = reference_dbscan(points, 0.05, 5)
        assert same_partition(mine, ref)
        assert len(set(mine.values())) == 2

    def test_random_instances_match_reference(self):
        rng = np.random.default_rng(77)
        for trial in range(30):
            n = int(rng.integers(5, 80))
            dim = int(rng.integers(2, 6))
            vectors = [normalize(rng.normal(size=dim)) for _ in range(n)]
            ids = list(rng.permutation(n * 2)[:n])
            points = [(int(ids[i]), vectors[i]) for i in range(n)]
            eps = float(rng.uniform(0.05, 0.8))
            min_pts = int(rng.integers(2, 6))
            assert same_partition(
                dbscan(points, eps, min_pts), reference_dbscan(points, eps, min_pts)
            ), f"trial {trial}"

    def test_permutation_invariant(self):
        rng = np.random.default_rng(4)
        points = [(i, normalize(rng.normal(size=3))) for i in range(30)]
        base = dbscan(points, 0.4, 3)
        shuffled = dbscan(points[::-1], 0.4, 3)
        assert base == shuffled

    def test_dim_mismatch_rejected(self):
        from mcae.errors import FeatureDimError

        points = [(0, normalize(np.ones(3))), (1, normalize(np.ones(4)))]
        with pytest.raises(FeatureDimError):
            dbscan(points, 0.2, 2)


def make_raster(values: np.ndarray) -> LabelRaster:
    return LabelRaster(values.shape[1], values.shape[0], values.astype(np.uint8))


def rect_record(mask_id, x0, y0, w, h):
    return MaskRecord(mask_id, (0, 0), Scale.FUSED, rle_encode(np.ones((h, w), bool), (x0, y0, w, h)))


class TestMajorityVote:
    def test_uniform(self):
        raster = make_raster(np.full((10, 10), 3))
        assert majority_vote_label(raster, rect_record(1, 2, 2, 4, 4).mask) == 3

    def test_counted_majority(self):
        data = np.full((10, 10), 5)
        data[:6, :] = 2  # mask rows 0..9 in one column -> 6 of class 2, 4 of class 5
        raster = make_raster(data)
        assert majority_vote_label(raster, rect_record(1, 0, 0, 10, 10).mask) == 2

    def test_tie_smallest_id(self):
        data = np.full((10, 10), 4)
        data[:5, :] = 1
        raster = make_raster(data)
        assert majority_vote_label(raster, rect_record(1, 0, 0, 10, 10).mask) == 1

    def test_all_ignore(self):
        raster = make_raster(np.full((4, 4), IGNORE_ID))
        assert majority_vote_label(raster, rect_record(1, 0, 0, 2, 2).mask) == IGNORE_ID

    def test_ignore_pixels_skipped(self):
        data = np.full((4, 4), IGNORE_ID)
        data[0, 0] = 6
        raster = make_raster(data)
        assert majority_vote_label(raster, rect_record(1, 0, 0, 4, 4).mask) == 6


def class_basis(class_id, dim=8, noise=0.0, rng=None):
    vec = np.zeros(dim)
    vec[class_id] = 1.0
    if noise and rng is not None:
        vec = vec + rng.normal(0, noise, dim)
    return normalize(vec)


GRID = TileGrid(tile_size=32, rows=6, cols=6, overlap_ratio=0.0)
CFG = ClusterConfig(eps=0.15, min_pts=5, purity_threshold=0.9, small_window=3, large_window=5)


def scene_records(positions):
    """positions: list of (mask_id, x0, y0) 4x4 rects."""
    return [rect_record(mid, x0, y0, 4, 4) for mid, x0, y0 in positions]


class TestWindowCluster:
    def test_pure_window(self):
        records = scene_records([(i, 2 + 5 * i, 2, ) for i in range(6)])
        table = FeatureTable(dim=8, entries={r.id: class_basis(2) for r in records})
        raster = make_raster(np.full((GRID.mosaic_height, GRID.mosaic_width), 2))
        cands = window_cluster(records, table, raster, GRID, CFG, "small")
        assert len(cands) == 1
        assert cands[0].purity == 1.0
        assert cands[0].suggested
        assert cands[0].dominant_class == 2
        assert cands[0].member_ids == tuple(range(6))

    def test_impure_cluster_not_suggested(self):
        records = scene_records([(i, 2 + 5 * i, 2) for i in range(10)])
        table = FeatureTable(dim=8, entries={r.id: class_basis(2) for r in records})
        data = np.full((GRID.mosaic_height, GRID.mosaic_width), 2)
        # first 3 masks sit on class-4 ground: purity 7/10
        data[:, : 2 + 5 * 2 + 4] = 4
        cands = window_cluster(records, table, make_raster(data), GRID, CFG, "small")
        assert len(cands) == 1
        assert cands[0].purity == 0.7
        assert not cands[0].suggested

    def test_sparse_masks_all_noise(self):
        # one mask per small window: density can never form
        positions = [(i, 2 + 96 * (i % 2), 2 + 96 * (i // 2)) for i in range(4)]
        records = scene_records(positions)
        table = FeatureTable(dim=8, entries={r.id: class_basis(1) for r in records})
        raster = make_raster(np.full((GRID.mosaic_height, GRID.mosaic_width), 1))
        assert window_cluster(records, table, raster, GRID, CFG, "small") == []

    def test_missing_feature_named(self):
        records = scene_records([(7, 2, 2)])
        table = FeatureTable(dim=8, entries={})
        raster = make_raster(np.full((GRID.mosaic_height, GRID.mosaic_width), 1))
        with pytest.raises(MissingFeatureError, match="7"):
            window_cluster(records, table, raster, GRID, CFG, "small")


class TestHierarchical:
    def test_sparse_at_small_dense_at_large(self):
        # 2 per small window, 8 inside large window (0,0)
        positions = [
            (0, 2, 2), (1, 70, 70),        # window (0,0)
            (2, 98, 2), (3, 130, 70),      # window (0,3)
            (4, 2, 98), (5, 70, 130),      # window (3,0)
            (6, 98, 98), (7, 130, 130),    # window (3,3)
        ]
        records = scene_records(positions)
        rng = np.random.default_rng(0)
        table = FeatureTable(
            dim=8, entries={r.id: class_basis(5, noise=0.01, rng=rng) for r in records}
        )
        raster = make_raster(np.full((GRID.mosaic_height, GRID.mosaic_width), 5))
        result = hierarchical_cluster(records, table, raster, GRID, CFG)
        assert result.stage1 == []
        assert len(result.stage2) == 1
        assert result.stage2[0].member_ids == tuple(range(8))
        assert result.residual == []

    def test_single_mask_residual(self):
        records = scene_records([(3, 50, 50)])
        table = FeatureTable(dim=8, entries={3: class_basis(1)})
        raster = make_raster(np.full((GRID.mosaic_height, GRID.mosaic_width), 1))
        result = hierarchical_cluster(records, table, raster, GRID, CFG)
        assert result.stage1 == [] and result.stage2 == []
        assert result.residual == [3]

    def test_dense_blobs_leave_only_stragglers(self):
        # two dense single-class blobs, plus two isolated off-class stragglers
        positions = [(i, 2 + 6 * i, 2) for i in range(8)]          # window (0,0)
        positions += [(10 + i, 98 + 6 * i, 2) for i in range(8)]   # window (0,3)
        records = scene_records(positions)
        rng = np.random.default_rng(1)
        entries = {r.id: class_basis(2, noise=0.01, rng=rng) for r in records}
        stragglers = scene_records([(40, 2, 170), (41, 98, 170)])
        for rec in stragglers:
            entries[rec.id] = class_basis(7, noise=0.01, rng=rng)
        records += stragglers
        table = FeatureTable(dim=8, entries=entries)
        raster = make_raster(np.full((GRID.mosaic_height, GRID.mosaic_width), 2))
        result = hierarchical_cluster(records, table, raster, GRID, CFG)
        assert len(result.stage1) == 2
        assert result.stage2 == []
        assert result.residual == [40, 41]

    def test_partition_covers_everything(self, scene):
        from mcae.fusion import ConsistencyConfig, FusionConfig, fuse_scales, resolve_overlap_tiles, to_global, upsample_records

        resolved = resolve_overlap_tiles(scene.fine, scene.fine_grid, ConsistencyConfig())
        fusion = fuse_scales(
            to_global(resolved, scene.fine_grid),
            upsample_records(to_global(scene.coarse, scene.coarse_grid), 2),
            FusionConfig(),
        )
        result = hierarchical_cluster(fusion.fused, scene.features, scene.gt, scene.grid)
        all_ids = {rec.id for rec in fusion.fused}
        seen: set = set()
        for cand in result.stage1 + result.stage2:
            member_set = set(cand.member_ids)
            assert not (member_set & seen)
            seen |= member_set
        assert seen | set(result.residual) == all_ids
        assert not (seen & set(result.residual))

    def test_threads_give_identical_result(self, scene):
        from mcae.fusion import ConsistencyConfig, FusionConfig, fuse_scales, resolve_overlap_tiles, to_global, upsample_records

        resolved = resolve_overlap_tiles(scene.fine, scene.fine_grid, ConsistencyConfig())
        fusion = fuse_scales(
            to_global(resolved, scene.fine_grid),
            upsample_records(to_global(scene.coarse, scene.coarse_grid), 2),
            FusionConfig(),
        )
        seq = hierarchical_cluster(fusion.fused, scene.features, scene.gt, scene.grid)
        par = hierarchical_cluster(fusion.fused, scene.features, scene.gt, scene.grid, threads=4)
        assert seq == par
