"""Hierarchical mask clustering: DBSCAN over mask features inside small tile
windows, purity filtering against a reference label raster, then a second
pass over the leftovers in large windows."""
from __future__ import annotations

import json
from collections import Counter, deque
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .concurrency import pmap
from .errors import DataError, FeatureDimError, MaskBoundsError, MissingFeatureError
from .features import FeatureTable
from .raster import (
    IGNORE_ID,
    LabelRaster,
    MaskRecord,
    RunLengthMask,
    TileGrid,
    mask_centroid,
)


@dataclass(frozen=True)
class ClusterConfig:
    """Knobs for both clustering passes. eps is a cosine distance; windows are
    measured in tiles and anchored at multiples of their span."""

    eps: float = 0.15
    min_pts: int = 5
    purity_threshold: float = 0.90
    small_window: int = 3
    large_window: int = 5

    def __post_init__(self):
        if not 0 < self.eps < 2:
            raise DataError("eps must be in (0, 2)")
        if self.min_pts < 2:
            raise DataError("min_pts must be >= 2")
        if not 0.5 < self.purity_threshold <= 1:
            raise DataError("purity_threshold must be in (0.5, 1]")
        if not 0 < self.small_window < self.large_window:
            raise DataError("need 0 < small_window < large_window")


@dataclass(frozen=True)
class ClusterCandidate:
    id: int
    stage: str  # "small" | "large"
    window: tuple[int, int, int]  # (row0, col0, span)
    member_ids: tuple[int, ...]
    dominant_class: int
    purity: float
    suggested: bool

    def to_json(self) -> str:
        return json.dumps(
            {
                "id": self.id,
                "stage": self.stage,
                "window": list(self.window),
                "member_ids": list(self.member_ids),
                "dominant_class": self.dominant_class,
                "purity": self.purity,
                "suggested": self.suggested,
            }
        )

    @classmethod
    def from_json(cls, line: str) -> "ClusterCandidate":
        obj = json.loads(line)
        return cls(
            id=int(obj["id"]),
            stage=obj["stage"],
            window=tuple(obj["window"]),
            member_ids=tuple(obj["member_ids"]),
            dominant_class=int(obj["dominant_class"]),
            purity=float(obj["purity"]),
            suggested=bool(obj["suggested"]),
        )


def write_candidates(candidates: Iterable[ClusterCandidate], path: Path | str) -> None:
    with open(path, "w") as fh:
        for cand in candidates:
            fh.write(cand.to_json() + "\n")


def read_candidates(path: Path | str) -> list[ClusterCandidate]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                out.append(ClusterCandidate.from_json(line))
    return out


def dbscan(
    points: Sequence[tuple[int, np.ndarray]], eps: float, min_pts: int
) -> dict[int, int]:
    """DBSCAN under cosine distance (1 - dot on unit vectors).

    Neighborhoods use distance <= eps and include the point itself (so a blob
    of n identical points is one cluster whenever min_pts <= n). Seeds are
    visited in ascending id order and clusters grow breadth-first, so border
    points join the first core cluster that reaches them. Returns
    {id: cluster_label}; noise ids are absent.
    """
    if not points:
        return {}
    order = sorted(range(len(points)), key=lambda i: points[i][0])
    ids = [points[i][0] for i in order]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate point ids")
    try:
        mat = np.stack([np.asarray(points[i][1], dtype=np.float64) for i in order])
    except ValueError as exc:
        raise FeatureDimError("feature vectors must share one dimension") from exc

    dist = 1.0 - mat @ mat.T
    neighbors = [np.flatnonzero(dist[i] <= eps) for i in range(len(ids))]
    core = np.array([len(nb) >= min_pts for nb in neighbors])

    labels = np.full(len(ids), -1, dtype=np.int64)
    next_label = 0
    for seed in range(len(ids)):
        if labels[seed] != -1 or not core[seed]:
            continue
        labels[seed] = next_label
        queue = deque([seed])
        while queue:
            p = queue.popleft()
            if not core[p]:
                continue
            for q in neighbors[p]:
                if labels[q] == -1:
                    labels[q] = next_label
                    queue.append(int(q))
        next_label += 1
    return {ids[i]: int(labels[i]) for i in range(len(ids)) if labels[i] != -1}


def majority_vote_label(reference: LabelRaster, mask: RunLengthMask) -> int:
    """Most frequent non-ignore class under the mask; ties take the smallest
    class id; an all-ignore footprint returns the ignore id."""
    x0, y0, w, h = mask.bbox
    if x0 < 0 or y0 < 0 or x0 + w > reference.width or y0 + h > reference.height:
        raise MaskBoundsError(f"mask bbox {mask.bbox} exceeds raster")
    values = reference.data[y0 : y0 + h, x0 : x0 + w][mask.decode()]
    counts = np.bincount(values[values != IGNORE_ID], minlength=1)
    if counts.sum() == 0:
        return IGNORE_ID
    return int(counts.argmax())  # argmax takes the smallest index on ties


def window_cluster(
    masks: Sequence[MaskRecord],
    features: FeatureTable,
    reference: LabelRaster,
    grid: TileGrid,
    cfg: ClusterConfig,
    stage: str,
    start_id: int = 0,
    threads: int = 1,
) -> list[ClusterCandidate]:
    """Cluster masks window-by-window and score every cluster's purity.

    A mask belongs to the unique span x span tile window (anchored at
    multiples of the span) containing its area-weighted centroid tile.
    Every cluster is returned, suggested or not. Windows are independent and
    processed in parallel when threads > 1; output order is canonical either
    way.
    """
    if stage not in ("small", "large"):
        raise DataError(f"stage must be 'small' or 'large', got {stage!r}")
    span = cfg.small_window if stage == "small" else cfg.large_window

    windows: dict[tuple[int, int], list[MaskRecord]] = {}
    for rec in masks:
        if rec.id not in features.entries:
            raise MissingFeatureError(rec.id)
        cx, cy = mask_centroid(rec.mask)
        tr, tc = grid.tile_of_point(cx, cy)
        anchor = (tr // span * span, tc // span * span)
        windows.setdefault(anchor, []).append(rec)

    def clusters_of(anchor: tuple[int, int]) -> list[tuple]:
        members = windows[anchor]
        assignment = dbscan([(m.id, features.vector(m.id)) for m in members], cfg.eps, cfg.min_pts)
        by_label: dict[int, list[MaskRecord]] = {}
        for rec in members:
            label = assignment.get(rec.id)
            if label is not None:
                by_label.setdefault(label, []).append(rec)
        out = []
        for label in sorted(by_label):
            cluster = by_label[label]
            votes = Counter(majority_vote_label(reference, rec.mask) for rec in cluster)
            dominant, count = min(votes.items(), key=lambda kv: (-kv[1], kv[0]))
            out.append((anchor, cluster, dominant, count / len(cluster)))
        return out

    anchors = sorted(windows)
    candidates: list[ClusterCandidate] = []
    next_id = start_id
    for window_clusters in pmap(clusters_of, anchors, threads):
        for anchor, cluster, dominant, purity in window_clusters:
            suggested = purity >= cfg.purity_threshold and dominant != IGNORE_ID
            candidates.append(
                ClusterCandidate(
                    id=next_id,
                    stage=stage,
                    window=(anchor[0], anchor[1], span),
                    member_ids=tuple(sorted(rec.id for rec in cluster)),
                    dominant_class=dominant,
                    purity=purity,
                    suggested=suggested,
                )
            )
            next_id += 1
    return candidates


@dataclass(frozen=True)
class HierarchicalResult:
    stage1: list[ClusterCandidate]
    stage2: list[ClusterCandidate]
    residual: list[int]

    @property
    def suggested(self) -> list[ClusterCandidate]:
        return self.stage1 + self.stage2


def hierarchical_cluster(
    masks: Sequence[MaskRecord],
    features: FeatureTable,
    reference: LabelRaster,
    grid: TileGrid,
    cfg: ClusterConfig | None = None,
    threads: int = 1,
) -> HierarchicalResult:
    """Two-pass clustering: small windows first; everything not captured by a
    suggested small-window cluster is re-clustered in large windows; what is
    still uncaptured is the residual. Suggested member sets partition
    (masks minus residual)."""
    cfg = cfg or ClusterConfig()
    pass1 = window_cluster(masks, features, reference, grid, cfg, "small", threads=threads)
    stage1 = [c for c in pass1 if c.suggested]
    covered = {mid for cand in stage1 for mid in cand.member_ids}
    leftovers = [rec for rec in masks if rec.id not in covered]

    next_id = max((c.id for c in pass1), default=-1) + 1
    pass2 = window_cluster(
        leftovers, features, reference, grid, cfg, "large", start_id=next_id, threads=threads
    )
    stage2 = [c for c in pass2 if c.suggested]
    covered2 = {mid for cand in stage2 for mid in cand.member_ids}

    residual = sorted(rec.id for rec in leftovers if rec.id not in covered2)
    return HierarchicalResult(stage1=stage1, stage2=stage2, residual=residual)
