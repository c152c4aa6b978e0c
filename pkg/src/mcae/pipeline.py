"""End-to-end run: consistency -> fusion -> features -> clustering -> session
-> sparse export -> curation round 1 -> agreement metrics, with a digest
manifest so reruns are verifiable."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .annotation import ClusterDecision, SessionStore, init_session
from .clustering import hierarchical_cluster, write_candidates
from .concurrency import pmap
from .config import EngineConfig
from .curation import (
    RefinementRound,
    default_region_count,
    draft_annotation,
    skater_partition,
    stratified_sample,
    tile_embeddings,
)
from .errors import ConfigError, DataError, McaeError
from .features import export_features, handcrafted_descriptor, import_features, FeatureTable
from .fusion import fuse_scales, resolve_overlap_tiles, to_global, upsample_records
from .metrics import confusion, metrics, write_report
from .raster import (
    LabelRaster,
    TileGrid,
    mask_crop,
    read_label_raster,
    read_mask_set,
    schema_by_name,
    write_label_raster,
    write_mask_set,
)


class StageError(McaeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


@dataclass
class PipelineResult:
    out_dir: Path
    manifest: dict


def run_pipeline(cfg: EngineConfig) -> PipelineResult:
    if not cfg.out_dir:
        raise ConfigError("out_dir is required")
    for key in ("fine_masks", "coarse_masks", "reference"):
        if not getattr(cfg, key):
            raise ConfigError(f"{key} is required")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    schema = schema_by_name(cfg.schema)

    manifest: dict = {
        "engine_version": __version__,
        "config": cfg.to_dict(),
        "inputs": {},
        "outputs": {},
        "stages": [],
    }

    stage = "load"
    try:
        for key in ("image", "fine_masks", "coarse_masks", "reference", "features"):
            value = getattr(cfg, key)
            if value:
                if not Path(value).is_file():
                    raise DataError(f"input {key} not found: {value}")
                manifest["inputs"][key] = _sha256(Path(value))
        reference, _ = read_label_raster(cfg.reference)
        reference.validate_against(schema)
        fine = read_mask_set(cfg.fine_masks)
        coarse = read_mask_set(cfg.coarse_masks)
        grid, fine_grid, coarse_grid = _grids(cfg, reference)

        stage = "consistency"
        resolved = resolve_overlap_tiles(fine, fine_grid, cfg.consistency())
        write_mask_set(resolved, out / "resolved.jsonl")
        manifest["stages"].append(
            {"stage": stage, "in": len(fine), "kept": len(resolved)}
        )

        stage = "fuse"
        fusion = fuse_scales(
            to_global(resolved, fine_grid),
            upsample_records(to_global(coarse, coarse_grid), 2),
            cfg.fusion(),
            threads=cfg.threads,
        )
        fused_path = out / "fused.jsonl"
        write_mask_set(fusion.fused, fused_path)
        manifest["stages"].append(
            {
                "stage": stage,
                "fused": len(fusion.fused),
                "dropped_fragments": len(fusion.dropped),
                "dropped_px": fusion.dropped_px,
            }
        )

        stage = "features"
        feats_path = out / "feats.mcft"
        if cfg.features:
            table = import_features(cfg.features)
            missing = [rec.id for rec in fusion.fused if rec.id not in table.entries]
            if missing:
                raise DataError(f"feature table missing fused ids {missing[:5]}")
        else:
            image = _load_image(cfg.image)
            table = FeatureTable(
                dim=17,
                entries={
                    rec.id: handcrafted_descriptor(image, rec.mask) for rec in fusion.fused
                },
            )
        export_features(table, feats_path)
        manifest["stages"].append({"stage": stage, "count": len(table)})

        stage = "cluster"
        result = hierarchical_cluster(
            fusion.fused, table, reference, grid, cfg.cluster(), threads=cfg.threads
        )
        clusters_path = out / "clusters.jsonl"
        write_candidates(result.suggested, clusters_path)
        manifest["stages"].append(
            {
                "stage": stage,
                "stage1": len(result.stage1),
                "stage2": len(result.stage2),
                "residual": len(result.residual),
            }
        )

        stage = "session"
        session_dir = out / "session"
        init_session(
            session_dir,
            clusters_path,
            fused_path,
            cfg.schema,
            cfg.image or None,
            grid,
            cfg.pixel_size_m,
        )
        store = SessionStore(
            schema, result.suggested, fusion.fused, log_path=session_dir / "decisions.jsonl"
        )
        if cfg.auto_label:
            for cand in result.suggested:
                store.record_decision(
                    ClusterDecision(
                        cluster_id=cand.id,
                        verdict="labeled",
                        class_id=cand.dominant_class,
                        annotator="auto",
                        timestamp=0,
                    )
                )
        manifest["stages"].append(
            {"stage": stage, "auto_labeled": len(store.decisions)}
        )

        stage = "export"
        sparse = store.export_sparse(grid, cfg.pixel_size_m)
        write_label_raster(sparse, out / "sparse.png", cfg.schema)
        manifest["stages"].append(
            {"stage": stage, "painted_px": int((sparse.data != 255).sum())}
        )

        stage = "curate"
        embeddings = tile_embeddings(fusion.fused, table, grid)
        p = cfg.regions or default_region_count(grid.rows * grid.cols)
        partition = skater_partition(grid, embeddings, p)
        sample = stratified_sample(partition, cfg.n_per_region, cfg.seed)
        round1 = RefinementRound(round=1, seed=cfg.seed, sampled_tiles=list(sample.tiles))
        curation_dir = out / "curation"
        curation_dir.mkdir(exist_ok=True)
        (curation_dir / "partition.json").write_text(
            json.dumps(
                {"p": partition.p, "regions": [[list(t) for t in reg] for reg in partition.regions]},
                indent=2,
                sort_keys=True,
            )
            + "\n"
        )
        round1.save(curation_dir / "round_001.json")
        drafts_dir = curation_dir / "drafts"
        drafts_dir.mkdir(exist_ok=True)

        def render_draft(tile: tuple[int, int]):
            tr, tc = tile
            tile_raster, tile_masks = _tile_view(reference, fusion.fused, grid, tr, tc)
            draft = draft_annotation(tile_raster, tile_masks)
            write_label_raster(draft, drafts_dir / f"tile_{tr:03d}_{tc:03d}.png", cfg.schema)

        pmap(render_draft, sample.tiles, cfg.threads)
        manifest["stages"].append(
            {"stage": stage, "p": partition.p, "sampled": len(sample.tiles)}
        )

        stage = "evaluate"
        cm = confusion(sparse, reference, schema)
        if cm.total:
            report = metrics(cm)
            write_report(report, cm, out / "metrics.json")
            oa = report.oa
        else:  # nothing labeled yet: agreement is undefined, not an error
            (out / "metrics.json").write_text(
                json.dumps({"oa": None, "scored_px": 0}, indent=2, sort_keys=True) + "\n"
            )
            oa = None
        manifest["stages"].append({"stage": stage, "oa": oa, "scored_px": cm.total})
    except McaeError as exc:
        raise StageError(stage, exc) from exc

    for path in sorted(out.rglob("*")):
        if path.is_file() and path.name != "manifest.json":
            manifest["outputs"][str(path.relative_to(out))] = _sha256(path)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return PipelineResult(out_dir=out, manifest=manifest)


def _grids(cfg: EngineConfig, reference: LabelRaster) -> tuple[TileGrid, TileGrid, TileGrid]:
    tile = cfg.tile_size
    if reference.width % tile or reference.height % tile:
        raise DataError("reference raster dimensions must be multiples of tile_size")
    rows, cols = reference.height // tile, reference.width // tile
    grid = TileGrid(tile_size=tile, rows=rows, cols=cols, overlap_ratio=0.0)
    stride = int(round(tile * (1 - cfg.overlap_ratio)))
    if (reference.height - tile) % stride or (reference.width - tile) % stride:
        raise DataError("overlap_ratio does not evenly tile the mosaic")
    fine_grid = TileGrid(
        tile_size=tile,
        rows=(reference.height - tile) // stride + 1,
        cols=(reference.width - tile) // stride + 1,
        overlap_ratio=cfg.overlap_ratio,
    )
    if rows % 2 or cols % 2:
        raise DataError("grid rows/cols must be even (coarse mosaic is half-res)")
    coarse_grid = TileGrid(tile_size=tile, rows=rows // 2, cols=cols // 2, overlap_ratio=0.0)
    return grid, fine_grid, coarse_grid


def _load_image(path: str) -> np.ndarray:
    if not path:
        raise DataError("features='' (handcrafted) requires an image path")
    return np.asarray(Image.open(path).convert("RGB"))


def _tile_view(reference: LabelRaster, fused, grid: TileGrid, tr: int, tc: int):
    """Crop the reference to one tile and shift the tile's masks into it."""
    x0, y0, w, h = grid.tile_rect(tr, tc)
    data = reference.data[y0 : y0 + h, x0 : x0 + w].copy()
    tile_raster = LabelRaster(w, h, data, reference.pixel_size_m)
    tile_masks = []
    for rec in fused:
        cropped = mask_crop(rec.mask, (x0, y0, w, h))
        if cropped is not None:
            tile_masks.append(replace(rec, mask=cropped.translated(-x0, -y0), area_px=-1))
    return tile_raster, tile_masks
