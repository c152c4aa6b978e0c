"""Durable cluster-decision log, sparse-raster export, and annotation-cost
accounting against the pixel- and mask-based baselines."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .clustering import ClusterCandidate, read_candidates
from .errors import (
    DataError,
    MaskBoundsError,
    NonMemberExclusionError,
    UnknownClusterError,
)
from .raster import (
    ClassSchema,
    LabelRaster,
    MaskRecord,
    TileGrid,
    global_frame,
    read_mask_set,
    schema_by_name,
)

VERDICT_LABELED = "labeled"
VERDICT_REJECTED = "rejected"


@dataclass(frozen=True)
class ClusterDecision:
    cluster_id: int
    verdict: str  # "labeled" | "rejected"
    class_id: int | None = None
    excluded_member_ids: tuple[int, ...] = ()
    annotator: str = ""
    timestamp: int = 0

    def __post_init__(self):
        if self.verdict not in (VERDICT_LABELED, VERDICT_REJECTED):
            raise DataError(f"unknown verdict {self.verdict!r}")
        if self.verdict == VERDICT_LABELED and self.class_id is None:
            raise DataError("labeled decision needs a class_id")

    def to_json(self) -> str:
        return json.dumps(
            {
                "cluster_id": self.cluster_id,
                "verdict": self.verdict,
                "class_id": self.class_id,
                "excluded_member_ids": list(self.excluded_member_ids),
                "annotator": self.annotator,
                "timestamp": self.timestamp,
            }
        )

    @classmethod
    def from_json(cls, line: str) -> "ClusterDecision":
        obj = json.loads(line)
        return cls(
            cluster_id=int(obj["cluster_id"]),
            verdict=obj["verdict"],
            class_id=None if obj.get("class_id") is None else int(obj["class_id"]),
            excluded_member_ids=tuple(obj.get("excluded_member_ids", ())),
            annotator=obj.get("annotator", ""),
            timestamp=int(obj.get("timestamp", 0)),
        )


class SessionStore:
    """Append-only decision log over a fixed cluster/mask universe.

    The effective state is last-write-wins per cluster; replaying the log from
    empty always reproduces it. When a log path is attached, decisions are
    flushed to disk before record_decision returns.
    """

    def __init__(
        self,
        schema: ClassSchema,
        candidates: Iterable[ClusterCandidate],
        masks: Iterable[MaskRecord],
        log_path: Path | str | None = None,
    ):
        self.schema = schema
        self.candidates = {c.id: c for c in candidates}
        self.masks = {m.id: m for m in masks}
        self.decisions: list[ClusterDecision] = []
        self._effective: dict[int, ClusterDecision] = {}
        self._log_path = Path(log_path) if log_path else None
        if self._log_path and self._log_path.exists():
            for line in self._read_complete_lines(self._log_path):
                self._apply(ClusterDecision.from_json(line))

    @staticmethod
    def _read_complete_lines(path: Path) -> list[str]:
        # crash safety: a torn final line (no newline) is ignored
        raw = path.read_text()
        lines = raw.split("\n")
        if raw and not raw.endswith("\n"):
            lines = lines[:-1]
        return [ln for ln in lines if ln.strip()]

    def _apply(self, decision: ClusterDecision) -> None:
        self.decisions.append(decision)
        self._effective[decision.cluster_id] = decision

    def record_decision(self, decision: ClusterDecision) -> None:
        cand = self.candidates.get(decision.cluster_id)
        if cand is None:
            raise UnknownClusterError(f"no cluster {decision.cluster_id}")
        bad = set(decision.excluded_member_ids) - set(cand.member_ids)
        if bad:
            raise NonMemberExclusionError(
                f"cluster {decision.cluster_id}: excluded non-members {sorted(bad)}"
            )
        if decision.verdict == VERDICT_LABELED:
            self.schema.check_class(decision.class_id)
        if self._log_path:
            with open(self._log_path, "a") as fh:
                fh.write(decision.to_json() + "\n")
                fh.flush()
                os.fsync(fh.fileno())
        self._apply(decision)

    def effective(self) -> dict[int, ClusterDecision]:
        return dict(self._effective)

    def labeled_mask_ids(self) -> dict[int, int]:
        """mask id -> class id over all effectively labeled clusters."""
        out: dict[int, int] = {}
        for decision in self._effective.values():
            if decision.verdict != VERDICT_LABELED:
                continue
            cand = self.candidates[decision.cluster_id]
            excluded = set(decision.excluded_member_ids)
            for mid in cand.member_ids:
                if mid not in excluded:
                    out[mid] = decision.class_id
        return out

    def export_sparse(self, grid: TileGrid, pixel_size_m: float = 0.3) -> LabelRaster:
        """Mosaic-sized raster: members of labeled clusters painted with their
        class, everything else ignore."""
        data = np.full((grid.mosaic_height, grid.mosaic_width), 255, np.uint8)
        for mid, class_id in sorted(self.labeled_mask_ids().items()):
            rec = self.masks[mid]
            gmask = global_frame(rec, grid)
            x0, y0, w, h = gmask.bbox
            if x0 < 0 or y0 < 0 or x0 + w > grid.mosaic_width or y0 + h > grid.mosaic_height:
                raise MaskBoundsError(f"mask {mid} bbox {gmask.bbox} exceeds the mosaic")
            region = data[y0 : y0 + h, x0 : x0 + w]
            region[gmask.decode()] = class_id
        return LabelRaster(grid.mosaic_width, grid.mosaic_height, data, pixel_size_m)


@dataclass(frozen=True)
class CostReport:
    """Action counts for the three annotation regimes: four boundary clicks
    per object, one prompt per object, one action per cluster."""

    n_masks: int
    n_clusters: int
    pixel_cost: int = field(init=False)
    mask_cost: int = field(init=False)
    mcae_cost: int = field(init=False)
    avg_masks_per_cluster: float = field(init=False)

    def __post_init__(self):
        if self.n_clusters < 1:
            raise DataError("need at least one cluster")
        object.__setattr__(self, "pixel_cost", 4 * self.n_masks)
        object.__setattr__(self, "mask_cost", self.n_masks)
        object.__setattr__(self, "mcae_cost", self.n_clusters)
        object.__setattr__(self, "avg_masks_per_cluster", self.n_masks / self.n_clusters)


def cost_report(n_masks: int, n_clusters: int) -> CostReport:
    return CostReport(n_masks=n_masks, n_clusters=n_clusters)


@dataclass
class SessionPaths:
    """On-disk session layout: session.json + decisions.jsonl (+ thumbs/)."""

    root: Path

    @property
    def manifest(self) -> Path:
        return self.root / "session.json"

    @property
    def decisions(self) -> Path:
        return self.root / "decisions.jsonl"

    @property
    def thumbs(self) -> Path:
        return self.root / "thumbs"


def init_session(
    root: Path | str,
    clusters_file: Path | str,
    masks_file: Path | str,
    schema_name: str,
    image_file: Path | str | None,
    grid: TileGrid,
    pixel_size_m: float = 0.3,
) -> SessionPaths:
    paths = SessionPaths(Path(root))
    paths.root.mkdir(parents=True, exist_ok=True)
    manifest = {
        "clusters": str(clusters_file),
        "masks": str(masks_file),
        "schema": schema_name,
        "image": None if image_file is None else str(image_file),
        "grid": {
            "tile_size": grid.tile_size,
            "rows": grid.rows,
            "cols": grid.cols,
            "overlap_ratio": grid.overlap_ratio,
        },
        "pixel_size_m": pixel_size_m,
    }
    paths.manifest.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    paths.decisions.touch()
    return paths


def open_session(root: Path | str) -> tuple[SessionStore, TileGrid, dict]:
    """Load a session directory into a live store. Raises DataError when the
    directory is not a session."""
    paths = SessionPaths(Path(root))
    if not paths.manifest.exists():
        raise DataError(f"{root}: no session.json")
    manifest = json.loads(paths.manifest.read_text())
    schema = schema_by_name(manifest["schema"])
    candidates = read_candidates(manifest["clusters"])
    masks = read_mask_set(manifest["masks"])
    g = manifest["grid"]
    grid = TileGrid(
        tile_size=int(g["tile_size"]),
        rows=int(g["rows"]),
        cols=int(g["cols"]),
        overlap_ratio=float(g["overlap_ratio"]),
    )
    store = SessionStore(schema, candidates, masks, log_path=paths.decisions)
    return store, grid, manifest
