"""Cross-tile mask consistency and two-scale fusion.

resolve_overlap_tiles reconciles duplicate/conflicting fine-scale masks that
stochastic per-tile generation produces in the 50%-overlap zones; fuse_scales
decomposes coarse masks around fine ones so every surviving region keeps the
finer boundary (finer-mask-wins).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .concurrency import pmap
from .errors import DataError
from .raster import (
    MaskRecord,
    RunLengthMask,
    Scale,
    TileGrid,
    canonical_key,
    connected_components,
    global_frame,
    intersection_area,
    mask_crop,
    mask_intersect,
    mask_subtract,
    rle_from_array,
    _bbox_intersection,
)


@dataclass(frozen=True)
class ConsistencyConfig:
    """IoU bands for the cross-tile verdicts, measured inside the shared
    overlap window: >= iou_match is the same object (keep one), anything
    between the floor and the match threshold is a conflict (drop both),
    <= floor means distinct objects (keep both)."""

    iou_match: float = 0.95
    iou_conflict_floor: float = 0.10

    def __post_init__(self):
        if not 0 < self.iou_conflict_floor < self.iou_match <= 1:
            raise DataError("need 0 < iou_conflict_floor < iou_match <= 1")


@dataclass(frozen=True)
class FusionConfig:
    min_fragment_px: int = 32

    def __post_init__(self):
        if self.min_fragment_px < 1:
            raise DataError("min_fragment_px must be >= 1")


def resolve_overlap_tiles(
    fine_masks: list[MaskRecord], grid: TileGrid, cfg: ConsistencyConfig | None = None
) -> list[MaskRecord]:
    """Deduplicate fine-scale masks across overlapping tiles.

    Every mask pair from two overlapping tiles whose footprints both enter the
    shared window gets a verdict from the window-restricted IoU; on a match the
    larger-area copy survives (tie: smaller id). Masks never entering an
    overlap window pass through unchanged. Idempotent.
    """
    cfg = cfg or ConsistencyConfig()
    by_tile: dict[tuple[int, int], list[MaskRecord]] = {}
    gmask: dict[int, RunLengthMask] = {}
    for rec in fine_masks:
        grid.tile_origin(*rec.tile)  # raises TileRangeError for bad records
        by_tile.setdefault(rec.tile, []).append(rec)
        gmask[rec.id] = global_frame(rec, grid)

    stride, tile = grid.stride, grid.tile_size
    reach = (tile - 1) // stride  # how many grid steps away tiles still overlap
    discarded: set[int] = set()
    for (r1, c1), recs_a in by_tile.items():
        for dr in range(-reach, reach + 1):
            for dc in range(-reach, reach + 1):
                r2, c2 = r1 + dr, c1 + dc
                if (r2, c2) <= (r1, c1) or (r2, c2) not in by_tile:
                    continue
                window = _bbox_intersection(grid.tile_rect(r1, c1), grid.tile_rect(r2, c2))
                if window is None:
                    continue
                _judge_pair(recs_a, by_tile[(r2, c2)], window, gmask, cfg, discarded)

    survivors = [rec for rec in fine_masks if rec.id not in discarded]
    survivors.sort(key=canonical_key)
    return survivors


def _judge_pair(recs_a, recs_b, window, gmask, cfg, discarded):
    in_window_a = [(rec, mask_crop(gmask[rec.id], window)) for rec in recs_a]
    in_window_b = [(rec, mask_crop(gmask[rec.id], window)) for rec in recs_b]
    for rec_a, wa in in_window_a:
        if wa is None:
            continue
        for rec_b, wb in in_window_b:
            if wb is None or rec_a.id == rec_b.id:
                continue
            inter = intersection_area(wa, wb)
            union = wa.area + wb.area - inter
            iou = inter / union
            if iou >= cfg.iou_match:
                loser = min(
                    (rec_a, rec_b),
                    key=lambda r: (gmask[r.id].area, -r.id),
                )
                discarded.add(loser.id)
            elif iou > cfg.iou_conflict_floor:
                discarded.add(rec_a.id)
                discarded.add(rec_b.id)


@dataclass(frozen=True)
class FusionResult:
    fused: list[MaskRecord]
    dropped: list[RunLengthMask] = field(default_factory=list)

    @property
    def dropped_px(self) -> int:
        return sum(m.area for m in self.dropped)


def upsample_mask(mask: RunLengthMask, factor: int = 2) -> RunLengthMask:
    """Nearest-neighbor upsampling: every pixel becomes a factor x factor block."""
    x0, y0, w, h = mask.bbox
    big = np.repeat(np.repeat(mask.decode(), factor, axis=0), factor, axis=1)
    out = rle_from_array(big, (x0 * factor, y0 * factor))
    assert out is not None
    return out


def fuse_scales(
    fine: list[MaskRecord],
    coarse: list[MaskRecord],
    cfg: FusionConfig | None = None,
    threads: int = 1,
) -> FusionResult:
    """Fuse fine and coarse mask sets in a common global frame.

    Fine masks claim their pixels first (earlier claims win inside the fine
    set); each claim is then partitioned along the boundaries of overlapping
    coarse masks (one piece per coverage signature). Coarse masks keep the
    residual outside all fine claims and earlier coarse masks, split into
    4-connected components. Decomposition fragments below min_fragment_px are
    dropped; untouched inputs pass through whole regardless of size. Outputs
    are pairwise disjoint and cover union(inputs) minus the dropped pixels.

    Each coarse residual depends only on the fine claims and the other input
    coarse masks, so coarse decompositions run in parallel when threads > 1;
    the canonical output sort makes the merge order-independent.
    """
    cfg = cfg or FusionConfig()
    fine_sorted = sorted(fine, key=canonical_key)
    coarse_sorted = sorted(coarse, key=canonical_key)

    # A piece is a droppable fragment only when decomposition actually cut it
    # down, i.e. it covers less than its whole originating input mask.
    pieces: list[tuple[RunLengthMask, bool]] = []  # (mask, is_fragment)
    claims: list[RunLengthMask] = []  # effective fine footprints, claim order

    for rec in fine_sorted:
        m: RunLengthMask | None = rec.mask
        for prev in claims:
            if m is None:
                break
            if intersection_area(m, prev):
                m = mask_subtract(m, prev)
        if m is None:
            continue
        claims.append(m)
        overlapping = [c for c in coarse_sorted if intersection_area(m, c.mask)]
        if not overlapping and m.area == rec.mask.area:
            pieces.append((rec.mask, False))
            continue
        parts = [m]
        for c in overlapping:
            split: list[RunLengthMask] = []
            for p in parts:
                inter = mask_intersect(p, c.mask)
                if inter is None:
                    split.append(p)
                    continue
                split.append(inter)
                rest = mask_subtract(p, c.mask)
                if rest is not None:
                    split.append(rest)
            parts = split
        pieces.extend((p, p.area < rec.mask.area) for p in parts)

    def coarse_pieces(i: int) -> list[tuple[RunLengthMask, bool]]:
        rec = coarse_sorted[i]
        residual: RunLengthMask | None = rec.mask
        for claim in claims:
            if residual is None:
                break
            if intersection_area(residual, claim):
                residual = mask_subtract(residual, claim)
        for prev in coarse_sorted[:i]:
            if residual is None:
                break
            if intersection_area(residual, prev.mask):
                residual = mask_subtract(residual, prev.mask)
        if residual is None:
            return []
        if residual.area == rec.mask.area:
            return [(rec.mask, False)]
        return [(part, True) for part in connected_components(residual)]

    for chunk in pmap(coarse_pieces, range(len(coarse_sorted)), threads):
        pieces.extend(chunk)

    kept: list[RunLengthMask] = []
    dropped: list[RunLengthMask] = []
    for mask, is_fragment in pieces:
        if is_fragment and mask.area < cfg.min_fragment_px:
            dropped.append(mask)
        else:
            kept.append(mask)

    kept.sort(key=lambda m: (m.bbox[1], m.bbox[0], m.bbox[3], m.bbox[2], m.runs))
    fused = [
        MaskRecord(id=i, tile=(0, 0), scale=Scale.FUSED, mask=m) for i, m in enumerate(kept)
    ]
    return FusionResult(fused=fused, dropped=dropped)


def to_global(records: list[MaskRecord], grid: TileGrid) -> list[MaskRecord]:
    """Records re-expressed in mosaic coordinates (tile kept as metadata)."""
    return [replace(rec, mask=global_frame(rec, grid)) for rec in records]


def upsample_records(records: list[MaskRecord], factor: int = 2) -> list[MaskRecord]:
    return [replace(rec, mask=upsample_mask(rec.mask, factor), area_px=-1) for rec in records]
