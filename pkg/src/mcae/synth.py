"""Deterministic synthetic scenes: a desk-scale stand-in for real submeter
imagery with planted geometry for every pipeline stage.

A scene contains dense same-class colonies (small-window clustering fodder),
a same-class scatter too sparse for small windows but dense enough for large
ones, nested and partially overlapping coarse/fine mask pairs (fusion
fodder), one object duplicated across two overlapping fine tiles, and one
conflicting pair (overlap-window IoU 0.5). Planted features are class-basis
unit vectors with small angular noise, keyed to the fused mask ids, so the
clustering stages are guaranteed class-separable.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, InvariantError
from .features import FeatureTable, export_features, normalize
from .fusion import (
    ConsistencyConfig,
    FusionConfig,
    fuse_scales,
    resolve_overlap_tiles,
    to_global,
    upsample_records,
)
from .raster import (
    LabelRaster,
    MaskRecord,
    RunLengthMask,
    Scale,
    TileGrid,
    oem8_schema,
    rle_encode,
    write_label_raster,
    write_mask_set,
)

CLASS_BUILDING = 7
CLASS_TREE = 4
CLASS_WATER = 5
CLASS_AGRI = 6
CLASS_BACKGROUND = 1  # rangeland


@dataclass(frozen=True)
class SceneSpec:
    rows: int = 6
    cols: int = 6
    tile_size: int = 128
    colony_size: int = 30
    scatter_size: int = 8
    feature_noise: float = 0.02
    pixel_size_m: float = 0.3

    def __post_init__(self):
        if self.rows < 2 or self.cols < 2:
            raise ConfigError("scene needs at least a 2x2 tile grid")
        if self.rows % 2 or self.cols % 2:
            raise ConfigError("scene rows/cols must be even (coarse grid is half-res)")
        if self.tile_size < 128 or self.tile_size % 2:
            raise ConfigError("tile_size must be an even number >= 128")
        if self.colony_size < 1 or self.scatter_size < 1:
            raise ConfigError("colony_size and scatter_size must be positive")


@dataclass
class _Planted:
    group: str
    class_id: int
    mask: RunLengthMask  # global fine-frame footprint


@dataclass
class SyntheticScene:
    spec: SceneSpec
    seed: int
    grid: TileGrid  # annotation grid (overlap 0)
    fine_grid: TileGrid
    coarse_grid: TileGrid
    image: np.ndarray
    gt: LabelRaster
    fine: list[MaskRecord]
    coarse: list[MaskRecord]
    features: FeatureTable
    groups: dict[str, dict]  # name -> {class_id, fused_ids, ...}
    conflict_fine_ids: list[int]
    duplicate_fine_ids: list[list[int]]
    root: Path | None = None

    def fused_ids_of(self, group: str) -> list[int]:
        return list(self.groups[group]["fused_ids"])


def _place_rect(rng, bounds, size_lo, size_hi, occupied, max_tries=400):
    x_lo, y_lo, x_hi, y_hi = bounds
    for _ in range(max_tries):
        w = int(rng.integers(size_lo, size_hi + 1))
        h = int(rng.integers(size_lo, size_hi + 1))
        if x_hi - w < x_lo or y_hi - h < y_lo:
            continue
        x0 = int(rng.integers(x_lo, x_hi - w + 1))
        y0 = int(rng.integers(y_lo, y_hi - h + 1))
        pad = (x0 - 2, y0 - 2, w + 4, h + 4)
        if all(
            pad[0] + pad[2] <= ox or ox + ow <= pad[0] or pad[1] + pad[3] <= oy or oy + oh <= pad[1]
            for ox, oy, ow, oh in occupied
        ):
            occupied.append(pad)
            return x0, y0, w, h
    raise InvariantError("could not place object; scene too crowded")


def _rect_mask(x0, y0, w, h) -> RunLengthMask:
    return rle_encode(np.ones((h, w), bool), (x0, y0, w, h))


def _fine_tile_for(bbox, fine_grid: TileGrid) -> tuple[int, int]:
    """A fine tile fully containing the bbox (small objects always fit)."""
    x0, y0, w, h = bbox
    stride, tile = fine_grid.stride, fine_grid.tile_size
    row = min(y0 // stride, fine_grid.rows - 1)
    col = min(x0 // stride, fine_grid.cols - 1)
    ox, oy = fine_grid.tile_origin(row, col)
    if not (ox <= x0 and x0 + w <= ox + tile and oy <= y0 and y0 + h <= oy + tile):
        raise InvariantError(f"object {bbox} does not fit a fine tile")
    return row, col


def generate_scene(seed: int, out_dir: Path | str | None = None, spec: SceneSpec | None = None) -> SyntheticScene:
    spec = spec or SceneSpec()
    schema = oem8_schema()
    tile = spec.tile_size
    width, height = spec.cols * tile, spec.rows * tile

    grid = TileGrid(tile_size=tile, rows=spec.rows, cols=spec.cols, overlap_ratio=0.0)
    fine_grid = TileGrid(
        tile_size=tile, rows=2 * spec.rows - 1, cols=2 * spec.cols - 1, overlap_ratio=0.5
    )
    coarse_grid = TileGrid(
        tile_size=tile, rows=spec.rows // 2, cols=spec.cols // 2, overlap_ratio=0.0
    )

    rng = np.random.default_rng([seed, 0])
    occupied: list[tuple[int, int, int, int]] = []
    planted: list[_Planted] = []
    fine_plan: list[tuple[_Planted, int]] = []  # (object, copies in fine set)
    coarse_plan: list[_Planted] = []

    def window_bounds(wr: int, wc: int, span: int, margin: int = 8):
        x_lo = wc * tile + margin
        y_lo = wr * tile + margin
        x_hi = min((wc + span) * tile, width) - margin
        y_hi = min((wr + span) * tile, height) - margin
        return x_lo, y_lo, x_hi, y_hi

    # fusion fodder in window (3, 0): a nested pair and a partial-overlap pair,
    # same class so every planted mask stays class-pure in the ground truth.
    # Bounds keep the coarse rects inside one coarse tile (coarse tiles cover
    # 2*tile of fine pixels) and the centroids inside large window (0, 0).
    fod = (12, 3 * tile + 12, 2 * tile - 12, 3 * tile + tile - 12)
    nx0, ny0, _, _ = _place_rect(rng, fod, 44, 44, occupied)
    nx0, ny0 = nx0 // 2 * 2, ny0 // 2 * 2  # coarse masks live on even coordinates
    nested_coarse = _Planted("fusion_nested", CLASS_AGRI, _rect_mask(nx0, ny0, 20, 20))
    nested_fine = _Planted("fusion_nested", CLASS_AGRI, _rect_mask(nx0 + 6, ny0 + 6, 8, 8))
    px0, py0, _, _ = _place_rect(rng, fod, 52, 52, occupied)
    px0, py0 = px0 // 2 * 2, py0 // 2 * 2
    partial_coarse = _Planted("fusion_partial", CLASS_AGRI, _rect_mask(px0, py0, 32, 24))
    partial_fine = _Planted("fusion_partial", CLASS_AGRI, _rect_mask(px0 + 26, py0 + 6, 12, 12))
    planted += [nested_coarse, nested_fine, partial_coarse, partial_fine]
    coarse_plan += [nested_coarse, partial_coarse]
    fine_plan += [(nested_fine, 1), (partial_fine, 1)]

    # one object duplicated in the overlap zone of fine tiles (1, 2) and (1, 3)
    stride = fine_grid.stride
    dup_zone = (3 * stride + 4, 1 * stride + 4, 2 * stride + tile - 4, 1 * stride + tile // 2)
    rect = _place_rect(rng, dup_zone, 8, 12, occupied)
    dup_obj = _Planted("duplicate_building", CLASS_BUILDING, _rect_mask(*rect))
    planted.append(dup_obj)
    fine_plan.append((dup_obj, 2))

    # one conflicting pair: two versions offset by 2 rows, overlap-window IoU 0.5
    cx0, cy0, _, _ = _place_rect(rng, dup_zone, 14, 14, occupied)
    conflict_a = _Planted("conflict_pair", CLASS_BUILDING, _rect_mask(cx0, cy0, 8, 6))
    conflict_b = _Planted("conflict_pair", CLASS_BUILDING, _rect_mask(cx0, cy0 + 2, 8, 6))
    planted += [conflict_a, conflict_b]

    # two dense colonies in separate small (3x3) windows
    colonies = [("colony_building", CLASS_BUILDING, (0, 0)), ("colony_tree", CLASS_TREE, (0, 3))]
    for name, class_id, (wr, wc) in colonies:
        bounds = window_bounds(wr, wc, 3)
        for _ in range(spec.colony_size):
            rect = _place_rect(rng, bounds, 6, 12, occupied)
            obj = _Planted(name, class_id, _rect_mask(*rect))
            planted.append(obj)
            fine_plan.append((obj, 1))

    # scatter: <= 2 objects per small window, >= min_pts inside large window (0,0)
    scatter_tiles = [(0, 0), (2, 2), (0, 4), (2, 3), (4, 0), (3, 2), (4, 4), (3, 3)]
    for i in range(spec.scatter_size):
        tr, tc = scatter_tiles[i % len(scatter_tiles)]
        lo_x, lo_y = tc * tile + 24, tr * tile + 24
        bounds = (lo_x, lo_y, tc * tile + tile - 24, tr * tile + tile - 24)
        rect = _place_rect(rng, bounds, 7, 10, occupied)
        obj = _Planted("scatter_water", CLASS_WATER, _rect_mask(*rect))
        planted.append(obj)
        fine_plan.append((obj, 1))

    # paint ground truth and imagery
    gt_data = np.full((height, width), CLASS_BACKGROUND, np.uint8)
    image = np.empty((height, width, 3), np.uint8)
    image[:] = schema.class_color(CLASS_BACKGROUND)
    group_map = np.full((height, width), -1, np.int32)
    group_names: list[str] = []
    group_index: dict[str, int] = {}
    for obj in planted:
        if obj.group not in group_index:
            group_index[obj.group] = len(group_names)
            group_names.append(obj.group)
        x0, y0, w, h = obj.mask.bbox
        bits = obj.mask.decode()
        gt_data[y0 : y0 + h, x0 : x0 + w][bits] = obj.class_id
        jitter = rng.integers(-10, 11, size=3)
        color = np.clip(np.array(schema.class_color(obj.class_id), np.int64) + jitter, 0, 255)
        image[y0 : y0 + h, x0 : x0 + w][bits] = color.astype(np.uint8)
        group_map[y0 : y0 + h, x0 : x0 + w][bits] = group_index[obj.group]
    gt = LabelRaster(width, height, gt_data, spec.pixel_size_m)

    # mask records
    fine_records: list[MaskRecord] = []
    next_id = 0
    duplicate_ids: list[list[int]] = []
    conflict_ids: list[int] = []
    for obj, copies in fine_plan:
        ids = []
        frow, fcol = _fine_tile_for(obj.mask.bbox, fine_grid)
        # the dup zone guarantees the object also fits the previous column's tile
        tiles = [(frow, fcol)] if copies == 1 else [(frow, fcol - 1), (frow, fcol)]
        for trow, tcol in tiles:
            ox, oy = fine_grid.tile_origin(trow, tcol)
            local = obj.mask.translated(-ox, -oy)
            fine_records.append(
                MaskRecord(id=next_id, tile=(trow, tcol), scale=Scale.FINE, mask=local)
            )
            ids.append(next_id)
            next_id += 1
        if copies == 2:
            duplicate_ids.append(ids)
    for offset, obj in ((-1, conflict_a), (0, conflict_b)):
        frow, fcol = _fine_tile_for(obj.mask.bbox, fine_grid)
        # the two versions land in the neighboring tiles sharing the zone
        tcol = fcol + offset
        ox, oy = fine_grid.tile_origin(frow, tcol)
        fine_records.append(
            MaskRecord(id=next_id, tile=(frow, tcol), scale=Scale.FINE, mask=obj.mask.translated(-ox, -oy))
        )
        conflict_ids.append(next_id)
        next_id += 1

    coarse_records: list[MaskRecord] = []
    for obj in coarse_plan:
        x0, y0, w, h = obj.mask.bbox
        cmask = _rect_mask(x0 // 2, y0 // 2, w // 2, h // 2)
        trow = min((y0 // 2) // coarse_grid.stride, coarse_grid.rows - 1)
        tcol = min((x0 // 2) // coarse_grid.stride, coarse_grid.cols - 1)
        ox, oy = coarse_grid.tile_origin(trow, tcol)
        coarse_records.append(
            MaskRecord(
                id=next_id, tile=(trow, tcol), scale=Scale.COARSE, mask=cmask.translated(-ox, -oy)
            )
        )
        next_id += 1

    # run the real consistency + fusion path to learn the fused ids
    resolved = resolve_overlap_tiles(fine_records, fine_grid, ConsistencyConfig())
    fine_global = to_global(resolved, fine_grid)
    coarse_global = upsample_records(to_global(coarse_records, coarse_grid), 2)
    fusion = fuse_scales(fine_global, coarse_global, FusionConfig())

    groups: dict[str, dict] = {
        name: {"class_id": None, "fused_ids": []} for name in group_names
    }
    for obj in planted:
        groups[obj.group]["class_id"] = obj.class_id
    feat_rng = np.random.default_rng([seed, 1])
    entries: dict[int, np.ndarray] = {}
    dim = 17
    for rec in sorted(fusion.fused, key=lambda r: r.id):
        x0, y0, _, _ = rec.mask.bbox
        ys, xs = np.nonzero(rec.mask.decode())
        gi = int(group_map[y0 + ys[0], x0 + xs[0]])
        if gi < 0:
            raise InvariantError(f"fused mask {rec.id} falls outside every planted object")
        name = group_names[gi]
        groups[name]["fused_ids"].append(rec.id)
        basis = np.zeros(dim)
        basis[groups[name]["class_id"]] = 1.0
        entries[rec.id] = normalize(basis + feat_rng.normal(0.0, spec.feature_noise, dim))
    features = FeatureTable(dim=dim, entries=entries)

    scene = SyntheticScene(
        spec=spec,
        seed=seed,
        grid=grid,
        fine_grid=fine_grid,
        coarse_grid=coarse_grid,
        image=image,
        gt=gt,
        fine=fine_records,
        coarse=coarse_records,
        features=features,
        groups=groups,
        conflict_fine_ids=conflict_ids,
        duplicate_fine_ids=duplicate_ids,
    )
    if out_dir is not None:
        scene.root = Path(out_dir)
        _write_scene(scene)
    return scene


def _write_scene(scene: SyntheticScene) -> None:
    root = scene.root
    root.mkdir(parents=True, exist_ok=True)
    Image.fromarray(scene.image, mode="RGB").save(root / "image.png", format="PNG")
    write_label_raster(scene.gt, root / "gt.png", schema_name="oem8")
    write_mask_set(scene.fine, root / "fine.jsonl")
    write_mask_set(scene.coarse, root / "coarse.jsonl")
    export_features(scene.features, root / "feats.mcft")
    manifest = {
        "seed": scene.seed,
        "schema": "oem8",
        "tile_size": scene.spec.tile_size,
        "rows": scene.spec.rows,
        "cols": scene.spec.cols,
        "pixel_size_m": scene.spec.pixel_size_m,
        "groups": scene.groups,
        "conflict_fine_ids": scene.conflict_fine_ids,
        "duplicate_fine_ids": scene.duplicate_fine_ids,
        "n_fine": len(scene.fine),
        "n_coarse": len(scene.coarse),
    }
    (root / "scene.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
