"""Test-set curation: pooled tile embeddings, MST-based spatial
regionalization (SKATER), per-region sampling across refinement rounds, and
prediction-with-masks draft annotations."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .clustering import majority_vote_label
from .errors import DataError
from .features import FeatureTable, normalize
from .raster import (
    LabelRaster,
    MaskRecord,
    RunLengthMask,
    TileGrid,
    mask_centroid,
)

Tile = tuple[int, int]


@dataclass(frozen=True)
class TileEmbedding:
    tile: Tile
    vector: np.ndarray


def pool_embedding(vectors: np.ndarray) -> np.ndarray:
    """Mean-pool a (n, d) stack and L2-normalize."""
    return normalize(np.asarray(vectors, dtype=np.float64).mean(axis=0))


def tile_embeddings(
    masks: Sequence[MaskRecord], features: FeatureTable, grid: TileGrid
) -> dict[Tile, np.ndarray]:
    """One embedding per grid tile: mean of the member-mask features,
    normalized. Tiles with no masks take the global mean embedding so they
    join the nearest coherent region rather than forming noise regions."""
    sums: dict[Tile, np.ndarray] = {}
    counts: dict[Tile, int] = {}
    for rec in masks:
        if rec.id not in features.entries:
            continue
        cx, cy = mask_centroid(rec.mask)
        tile = grid.tile_of_point(cx, cy)
        vec = features.vector(rec.id).astype(np.float64)
        sums[tile] = sums.get(tile, 0.0) + vec
        counts[tile] = counts.get(tile, 0) + 1

    pooled = {tile: normalize(sums[tile] / counts[tile]) for tile in sums}
    if pooled:
        global_mean = normalize(np.mean(np.stack(list(pooled.values())), axis=0))
    else:
        global_mean = np.zeros(features.dim, dtype=np.float32)
    return {tile: pooled.get(tile, global_mean) for tile in grid.tiles()}


def tile_embedding_from_map(feature_map: np.ndarray, tile: Tile) -> TileEmbedding:
    """Pool a per-pixel (H, W, D) feature map for one tile."""
    if feature_map.ndim != 3:
        raise DataError("feature map must be (H, W, D)")
    return TileEmbedding(tile=tile, vector=pool_embedding(feature_map.reshape(-1, feature_map.shape[2])))


@dataclass(frozen=True)
class RegionPartition:
    """Spatially contiguous tile regions; regions sorted by first tile."""

    regions: tuple[tuple[Tile, ...], ...]

    @property
    def p(self) -> int:
        return len(self.regions)

    def region_of(self) -> dict[Tile, int]:
        return {t: i for i, region in enumerate(self.regions) for t in region}


def _region_ssd(tiles: Sequence[int], emb: np.ndarray, sq: np.ndarray) -> float:
    """Sum of squared deviations from the region mean, via sq-sum identity."""
    idx = np.asarray(tiles)
    s = emb[idx].sum(axis=0)
    return float(sq[idx].sum() - (s @ s) / len(idx))


def skater_partition(
    grid: TileGrid, embeddings: dict[Tile, np.ndarray], p: int
) -> RegionPartition:
    """Partition the tile grid into p contiguous regions.

    Builds the rook-adjacency MST with squared-Euclidean embedding distances
    (Kruskal, ties by canonical edge order), then performs p-1 greedy cuts,
    each removing the forest edge whose removal most reduces the total
    within-region SSD. Exact best-cut search, re-evaluated per cut.
    """
    tiles = list(grid.tiles())
    n = len(tiles)
    if not 1 <= p <= n:
        raise DataError(f"P must be in [1, {n}], got {p}")
    index = {t: i for i, t in enumerate(tiles)}
    missing = [t for t in tiles if t not in embeddings]
    if missing:
        raise DataError(f"missing embeddings for tiles {missing[:4]}")
    emb = np.stack([np.asarray(embeddings[t], dtype=np.float64) for t in tiles])
    sq = np.einsum("ij,ij->i", emb, emb)

    edges = []  # (weight, r1, c1, r2, c2, i, j); sorted prefix is the tie order
    for r, c in tiles:
        for dr, dc in ((0, 1), (1, 0)):
            r2, c2 = r + dr, c + dc
            if r2 < grid.rows and c2 < grid.cols:
                i, j = index[(r, c)], index[(r2, c2)]
                d = emb[i] - emb[j]
                edges.append((float(d @ d), r, c, r2, c2, i, j))
    edges.sort(key=lambda e: e[:5])

    parent = list(range(n))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    mst: list[tuple[int, int]] = []
    adj: list[list[int]] = [[] for _ in range(n)]
    for _, _, _, _, _, i, j in edges:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[ri] = rj
            mst.append((i, j))
            adj[i].append(j)
            adj[j].append(i)
        if len(mst) == n - 1:
            break

    # forest state: region id per node, SSD per region, live edges
    region = [0] * n
    ssd = {0: _region_ssd(list(range(n)), emb, sq)}
    live = list(range(len(mst)))

    def side_of(start: int, blocked: tuple[int, int], reg: int) -> list[int]:
        a, b = blocked
        seen = {start}
        stack = [start]
        while stack:
            u = stack.pop()
            for v in adj[u]:
                if region[v] != reg or v in seen:
                    continue
                if (u, v) == (a, b) or (u, v) == (b, a):
                    continue
                seen.add(v)
                stack.append(v)
        return list(seen)

    next_region = 1
    for _ in range(p - 1):
        best = None  # (gain, edge position in mst, side_a nodes)
        for pos in live:
            i, j = mst[pos]
            reg = region[i]
            side_a = side_of(i, (i, j), reg)
            all_nodes = [k for k in range(n) if region[k] == reg]
            side_b = list(set(all_nodes) - set(side_a))
            gain = ssd[reg] - _region_ssd(side_a, emb, sq) - _region_ssd(side_b, emb, sq)
            if best is None or gain > best[0]:
                best = (gain, pos, side_a)
        assert best is not None
        _, pos, side_a = best
        i, j = mst[pos]
        old = region[i]
        for k in side_a:
            region[k] = next_region
        remaining = [k for k in range(n) if region[k] == old]
        ssd[old] = _region_ssd(remaining, emb, sq)
        ssd[next_region] = _region_ssd(side_a, emb, sq)
        next_region += 1
        live = [pos2 for pos2 in live if pos2 != pos and region[mst[pos2][0]] == region[mst[pos2][1]]]

    groups: dict[int, list[Tile]] = {}
    for k, t in enumerate(tiles):
        groups.setdefault(region[k], []).append(t)
    regions = sorted((tuple(sorted(g)) for g in groups.values()), key=lambda r: r[0])
    return RegionPartition(regions=tuple(regions))


def total_ssd(partition: RegionPartition, embeddings: dict[Tile, np.ndarray]) -> float:
    total = 0.0
    for reg in partition.regions:
        mat = np.stack([np.asarray(embeddings[t], dtype=np.float64) for t in reg])
        mean = mat.mean(axis=0)
        total += float(((mat - mean) ** 2).sum())
    return total


def default_region_count(n_tiles: int) -> int:
    return max(1, -(-n_tiles // 400))  # ceil division


@dataclass(frozen=True)
class SampleResult:
    tiles: tuple[Tile, ...]
    short_regions: tuple[int, ...]  # region indices that could not fill n_per_region


def stratified_sample(
    partition: RegionPartition,
    n_per_region: int,
    seed: int,
    exclude: set[Tile] | None = None,
) -> SampleResult:
    """Uniform without-replacement draw of n_per_region tiles per region.

    Deterministic: region r draws from a PCG64 generator seeded by
    SeedSequence([seed, r]). Regions with fewer available tiles yield what
    they have and are flagged. Output is sorted."""
    if n_per_region < 0:
        raise DataError("n_per_region must be >= 0")
    exclude = exclude or set()
    chosen: list[Tile] = []
    short: list[int] = []
    for r, reg in enumerate(partition.regions):
        available = sorted(t for t in reg if t not in exclude)
        take = min(n_per_region, len(available))
        if take < n_per_region:
            short.append(r)
        if take == 0:
            continue
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, r])))
        picks = rng.choice(len(available), size=take, replace=False)
        chosen.extend(available[int(k)] for k in picks)
    return SampleResult(tiles=tuple(sorted(chosen)), short_regions=tuple(short))


@dataclass
class RefinementRound:
    round: int
    seed: int
    sampled_tiles: list[Tile]
    status: dict[Tile, str] = field(default_factory=dict)  # "drafted" | "refined"

    def __post_init__(self):
        for tile in self.sampled_tiles:
            self.status.setdefault(tile, "drafted")

    def mark_refined(self, tile: Tile) -> None:
        if tile not in self.status:
            raise DataError(f"tile {tile} not in round {self.round}")
        self.status[tile] = "refined"

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "seed": self.seed,
            "sampled_tiles": [list(t) for t in self.sampled_tiles],
            "status": {f"{r},{c}": s for (r, c), s in sorted(self.status.items())},
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "RefinementRound":
        tiles = [tuple(t) for t in obj["sampled_tiles"]]
        status = {}
        for key, s in obj.get("status", {}).items():
            r, c = key.split(",")
            status[(int(r), int(c))] = s
        return cls(round=int(obj["round"]), seed=int(obj["seed"]), sampled_tiles=tiles, status=status)

    def save(self, path: Path | str) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: Path | str) -> "RefinementRound":
        return cls.from_dict(json.loads(Path(path).read_text()))


def draft_annotation(prediction: LabelRaster, masks: Sequence[MaskRecord]) -> LabelRaster:
    """Snap the prediction to mask-uniform labels: inside each mask every
    pixel takes the mask's majority predicted class; outside, the raw
    prediction stands. Idempotent."""
    data = prediction.data.copy()
    for rec in masks:
        label = majority_vote_label(prediction, rec.mask)
        x0, y0, w, h = rec.mask.bbox
        region = data[y0 : y0 + h, x0 : x0 + w]
        region[rec.mask.decode()] = label
    return LabelRaster(prediction.width, prediction.height, data, prediction.pixel_size_m)


@dataclass(frozen=True)
class RefinementEdit:
    """One manual correction: repaint a mask footprint or a rectangle."""

    class_id: int
    mask: RunLengthMask | None = None
    rect: tuple[int, int, int, int] | None = None

    def __post_init__(self):
        if (self.mask is None) == (self.rect is None):
            raise DataError("edit needs exactly one of mask or rect")


def apply_refinement(
    draft: LabelRaster, edits: Sequence[RefinementEdit], schema=None
) -> LabelRaster:
    """Apply edits in order (later edits win on overlaps)."""
    data = draft.data.copy()
    for edit in edits:
        if schema is not None:
            schema.check_class(edit.class_id)
        if edit.rect is not None:
            x0, y0, w, h = edit.rect
            if x0 < 0 or y0 < 0 or x0 + w > draft.width or y0 + h > draft.height:
                raise DataError(f"edit rect {edit.rect} out of bounds")
            data[y0 : y0 + h, x0 : x0 + w] = edit.class_id
        else:
            x0, y0, w, h = edit.mask.bbox
            if x0 < 0 or y0 < 0 or x0 + w > draft.width or y0 + h > draft.height:
                raise DataError(f"edit mask bbox {edit.mask.bbox} out of bounds")
            region = data[y0 : y0 + h, x0 : x0 + w]
            region[edit.mask.decode()] = edit.class_id
    return LabelRaster(draft.width, draft.height, data, draft.pixel_size_m)
