"""`mcae` command line: every pipeline stage as a subcommand.

Exit codes: 0 ok, 2 config error, 3 data error, 4 internal invariant
violation.
"""
from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click
import numpy as np
from PIL import Image

from . import __version__
from .annotation import cost_report, init_session, open_session
from .clustering import hierarchical_cluster, write_candidates
from .config import EngineConfig, load_config
from .curation import (
    RefinementEdit,
    RefinementRound,
    apply_refinement,
    default_region_count,
    draft_annotation,
    skater_partition,
    stratified_sample,
    tile_embeddings,
)
from .errors import ConfigError, DataError, InvariantError, McaeError
from .features import FeatureTable, export_features, handcrafted_descriptor, import_features
from .fusion import fuse_scales, resolve_overlap_tiles, to_global, upsample_records
from .metrics import confusion, metrics, write_report
from .pipeline import StageError, run_pipeline
from .raster import (
    RunLengthMask,
    TileGrid,
    read_label_raster,
    read_mask_set,
    schema_by_name,
    write_label_raster,
    write_mask_set,
)
from .synth import SceneSpec, generate_scene

log = logging.getLogger("mcae")


@click.group()
@click.version_option(__version__)
@click.option("--config", "config_path", type=click.Path(), default=None, help="TOML config file.")
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--threads", type=int, default=None, help="Worker pool size.")
@click.option("--log-level", default="warning", show_default=True)
@click.pass_context
def cli(ctx, config_path, seed, threads, log_level):
    logging.basicConfig(level=getattr(logging, log_level.upper(), logging.WARNING))
    overrides = {}
    if seed is not None:
        overrides["seed"] = seed
    if threads is not None:
        overrides["threads"] = threads
    ctx.obj = load_config(config_path, overrides)


def _grid_from_cfg(cfg: EngineConfig, rows: int, cols: int, overlap: float) -> TileGrid:
    return TileGrid(tile_size=cfg.tile_size, rows=rows, cols=cols, overlap_ratio=overlap)


def _infer_grid(cfg: EngineConfig, records, overlap: float) -> TileGrid:
    rows = max((r.tile[0] for r in records), default=0) + 1
    cols = max((r.tile[1] for r in records), default=0) + 1
    return _grid_from_cfg(cfg, rows, cols, overlap)


@cli.command()
@click.option("--fine", "fine_path", required=True, type=click.Path(exists=True))
@click.option("--coarse", "coarse_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.pass_obj
def fuse(cfg: EngineConfig, fine_path, coarse_path, out_path):
    """Resolve cross-tile duplicates, then fuse the two scales."""
    fine = read_mask_set(fine_path)
    coarse = read_mask_set(coarse_path)
    fine_grid = _infer_grid(cfg, fine, cfg.overlap_ratio)
    coarse_grid = _infer_grid(cfg, coarse, 0.0)
    resolved = resolve_overlap_tiles(fine, fine_grid, cfg.consistency())
    result = fuse_scales(
        to_global(resolved, fine_grid),
        upsample_records(to_global(coarse, coarse_grid), 2),
        cfg.fusion(),
        threads=cfg.threads,
    )
    write_mask_set(result.fused, out_path)
    click.echo(
        f"fused {len(result.fused)} masks "
        f"({len(fine)} fine -> {len(resolved)} resolved, "
        f"{len(result.dropped)} fragments dropped)"
    )


@cli.command()
@click.option(
    "--images",
    "images_path",
    required=True,
    type=click.Path(exists=True),
    help="Mosaic image, or a directory holding exactly one PNG.",
)
@click.option("--masks", "masks_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
def features(images_path, masks_path, out_path):
    """Handcrafted 17-d descriptors for every mask (mosaic-frame masks)."""
    images_path = Path(images_path)
    if images_path.is_dir():
        pngs = sorted(images_path.glob("*.png"))
        if len(pngs) != 1:
            raise DataError(f"{images_path}: expected exactly one mosaic PNG, found {len(pngs)}")
        images_path = pngs[0]
    image = np.asarray(Image.open(images_path).convert("RGB"))
    records = read_mask_set(masks_path)
    table = FeatureTable(
        dim=17, entries={rec.id: handcrafted_descriptor(image, rec.mask) for rec in records}
    )
    export_features(table, out_path)
    click.echo(f"wrote {len(table)} descriptors")


@cli.command()
@click.option("--masks", "masks_path", required=True, type=click.Path(exists=True))
@click.option("--features", "features_path", required=True, type=click.Path(exists=True))
@click.option("--reference", "reference_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.pass_obj
def cluster(cfg: EngineConfig, masks_path, features_path, reference_path, out_path):
    """Two-stage windowed clustering with purity filtering."""
    records = read_mask_set(masks_path)
    table = import_features(features_path)
    reference, _ = read_label_raster(reference_path)
    rows = reference.height // cfg.tile_size
    cols = reference.width // cfg.tile_size
    grid = _grid_from_cfg(cfg, rows, cols, 0.0)
    result = hierarchical_cluster(records, table, reference, grid, cfg.cluster(), threads=cfg.threads)
    write_candidates(result.suggested, out_path)
    click.echo(
        f"stage1 {len(result.stage1)}, stage2 {len(result.stage2)}, "
        f"residual {len(result.residual)} masks"
    )


@cli.command()
@click.option("--session", "session_dir", required=True, type=click.Path())
@click.option("--clusters", "clusters_path", required=True, type=click.Path(exists=True))
@click.option("--masks", "masks_path", required=True, type=click.Path(exists=True))
@click.option("--image", "image_path", type=click.Path(exists=True), default=None)
@click.option("--rows", type=int, required=True)
@click.option("--cols", type=int, required=True)
@click.pass_obj
def init(cfg: EngineConfig, session_dir, clusters_path, masks_path, image_path, rows, cols):
    """Create a session directory around existing cluster/mask files."""
    grid = _grid_from_cfg(cfg, rows, cols, 0.0)
    init_session(session_dir, clusters_path, masks_path, cfg.schema, image_path, grid, cfg.pixel_size_m)
    click.echo(f"session ready at {session_dir}")


@cli.command()
@click.option("--session", "session_dir", required=True, type=click.Path(exists=True))
@click.option("--addr", default="127.0.0.1:8731", show_default=True)
@click.option("--ui", "ui_dir", type=click.Path(), default=None, help="Static UI directory.")
def serve(session_dir, addr, ui_dir):
    """Serve the annotation API (and UI when --ui points at a build)."""
    from .server import serve as run_server

    run_server(session_dir, addr, ui_dir)


@cli.command()
@click.option("--session", "session_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
def export(session_dir, out_path):
    """Export the sparse label raster of the session's decisions."""
    store, grid, manifest = open_session(session_dir)
    raster = store.export_sparse(grid, float(manifest.get("pixel_size_m", 0.3)))
    write_label_raster(raster, out_path, manifest["schema"])
    click.echo(f"painted {int((raster.data != 255).sum())} px")


@cli.command()
@click.option("--session", "session_dir", required=True, type=click.Path(exists=True))
def stats(session_dir):
    """Cost accounting for the session's clusters and masks."""
    store, _, _ = open_session(session_dir)
    suggested = [c for c in store.candidates.values() if c.suggested]
    if not suggested:
        click.echo(json.dumps({"n_masks": 0, "n_clusters": 0, "decided": 0}, sort_keys=True))
        return
    n_masks = sum(len(c.member_ids) for c in suggested)
    report = cost_report(n_masks, len(suggested))
    click.echo(json.dumps({
        "n_masks": report.n_masks,
        "n_clusters": report.n_clusters,
        "pixel_cost": report.pixel_cost,
        "mask_cost": report.mask_cost,
        "mcae_cost": report.mcae_cost,
        "avg_masks_per_cluster": round(report.avg_masks_per_cluster, 2),
        "decided": len(store.effective()),
    }, indent=2, sort_keys=True))


@cli.group()
def curate():
    """Test-set curation: partition, sample, draft, refine."""


@curate.command()
@click.option("--masks", "masks_path", required=True, type=click.Path(exists=True))
@click.option("--features", "features_path", required=True, type=click.Path(exists=True))
@click.option("--rows", type=int, required=True)
@click.option("--cols", type=int, required=True)
@click.option("--regions", "-P", "p", type=int, default=0, help="Region count; 0 = heuristic.")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.pass_obj
def partition(cfg: EngineConfig, masks_path, features_path, rows, cols, p, out_path):
    """SKATER partition of the tile grid."""
    records = read_mask_set(masks_path)
    table = import_features(features_path)
    grid = _grid_from_cfg(cfg, rows, cols, 0.0)
    embeddings = tile_embeddings(records, table, grid)
    p = p or default_region_count(rows * cols)
    part = skater_partition(grid, embeddings, p)
    Path(out_path).write_text(
        json.dumps(
            {"p": part.p, "regions": [[list(t) for t in reg] for reg in part.regions]},
            indent=2,
            sort_keys=True,
        )
        + "\n"
    )
    click.echo(f"{part.p} regions")


@curate.command()
@click.option("--partition", "partition_path", required=True, type=click.Path(exists=True))
@click.option("--round", "round_no", type=int, required=True)
@click.option("--n", "n_per_region", type=int, default=100, show_default=True)
@click.option("--seed", type=int, default=None)
@click.option("--session", "session_dir", required=True, type=click.Path(exists=True))
@click.pass_obj
def sample(cfg: EngineConfig, partition_path, round_no, n_per_region, seed, session_dir):
    """Sample tiles for a refinement round; excludes all earlier rounds."""
    from .curation import RegionPartition

    obj = json.loads(Path(partition_path).read_text())
    part = RegionPartition(
        regions=tuple(tuple(tuple(t) for t in reg) for reg in obj["regions"])
    )
    seed = cfg.seed if seed is None else seed
    session_dir = Path(session_dir)
    exclude: set = set()
    for earlier in sorted(session_dir.glob("round_*.json")):
        prev = RefinementRound.load(earlier)
        if prev.round != round_no:
            exclude.update(tuple(t) for t in prev.sampled_tiles)
    result = stratified_sample(part, n_per_region, seed, exclude)
    rnd = RefinementRound(round=round_no, seed=seed, sampled_tiles=list(result.tiles))
    rnd.save(session_dir / f"round_{round_no:03d}.json")
    click.echo(f"sampled {len(result.tiles)} tiles; short regions: {list(result.short_regions)}")


@curate.command()
@click.option("--pred", "pred_path", required=True, type=click.Path(exists=True))
@click.option("--masks", "masks_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
def draft(pred_path, masks_path, out_path):
    """Overlay masks on a prediction raster (majority label per mask)."""
    prediction, schema_name = read_label_raster(pred_path)
    records = read_mask_set(masks_path)
    result = draft_annotation(prediction, records)
    write_label_raster(result, out_path, schema_name)
    changed = int((result.data != prediction.data).sum())
    click.echo(f"drafted; {changed} px snapped")


@curate.command()
@click.option("--draft", "draft_path", required=True, type=click.Path(exists=True))
@click.option("--edits", "edits_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--round-manifest", "round_path", type=click.Path(exists=True), default=None)
@click.option("--tile", "tile_str", default=None, help="row,col to mark refined.")
@click.pass_obj
def refine(cfg: EngineConfig, draft_path, edits_path, out_path, round_path, tile_str):
    """Apply manual edits (JSON list of {class, rect?|bbox+rle?}) to a draft."""
    raster, schema_name = read_label_raster(draft_path)
    schema = schema_by_name(cfg.schema)
    edits = []
    for obj in json.loads(Path(edits_path).read_text()):
        if "rect" in obj:
            edits.append(RefinementEdit(class_id=int(obj["class"]), rect=tuple(obj["rect"])))
        else:
            edits.append(
                RefinementEdit(
                    class_id=int(obj["class"]),
                    mask=RunLengthMask(bbox=tuple(obj["bbox"]), runs=tuple(obj["rle"])),
                )
            )
    refined = apply_refinement(raster, edits, schema)
    write_label_raster(refined, out_path, schema_name)
    if round_path and tile_str:
        rnd = RefinementRound.load(round_path)
        r, c = (int(v) for v in tile_str.split(","))
        rnd.mark_refined((r, c))
        rnd.save(round_path)
    click.echo(f"applied {len(edits)} edits")


@cli.command()
@click.option("--gt", "gt_path", required=True, type=click.Path(exists=True))
@click.option("--pred", "pred_path", required=True, type=click.Path(exists=True))
@click.option("--schema", "schema_name", default=None, help="Override the config schema.")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.pass_obj
def evaluate(cfg: EngineConfig, gt_path, pred_path, schema_name, out_path):
    """Confusion metrics for a prediction against ground truth (file or dir)."""
    schema = schema_by_name(schema_name or cfg.schema)
    gt_path, pred_path = Path(gt_path), Path(pred_path)
    if gt_path.is_dir():
        pairs = []
        for gt_file in sorted(gt_path.glob("*.png")):
            pred_file = pred_path / gt_file.name
            if not pred_file.exists():
                raise DataError(f"prediction missing for {gt_file.name}")
            pairs.append((gt_file, pred_file))
        if not pairs:
            raise DataError(f"no .png rasters under {gt_path}")
    else:
        pairs = [(gt_path, pred_path)]
    total = None
    for gt_file, pred_file in pairs:
        gt, _ = read_label_raster(gt_file)
        pred, _ = read_label_raster(pred_file)
        cm = confusion(gt, pred, schema)
        total = cm if total is None else total + cm
    report = metrics(total)
    write_report(report, total, out_path)
    click.echo(f"OA {report.oa:.4f}  mIoU {report.m_iou:.4f}  mF1 {report.m_f1:.4f}")


@cli.command()
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--rows", type=int, default=6, show_default=True)
@click.option("--cols", type=int, default=6, show_default=True)
@click.option("--tile-size", type=int, default=128, show_default=True)
@click.pass_obj
def synth(cfg: EngineConfig, out_dir, rows, cols, tile_size):
    """Generate a deterministic synthetic scene."""
    spec = SceneSpec(rows=rows, cols=cols, tile_size=tile_size)
    scene = generate_scene(cfg.seed, out_dir, spec)
    click.echo(
        f"scene at {out_dir}: {len(scene.fine)} fine, {len(scene.coarse)} coarse masks, "
        f"{len(scene.features)} planted features"
    )


@cli.command()
@click.option("--scene", "scene_dir", type=click.Path(exists=True), default=None)
@click.option("--out", "out_dir", type=click.Path(), default=None)
@click.option("--auto-label", is_flag=True, default=None)
@click.pass_obj
def run(cfg: EngineConfig, scene_dir, out_dir, auto_label):
    """Run the full pipeline (config file paths, or a scene dir shortcut)."""
    if scene_dir:
        scene_dir = Path(scene_dir)
        spec = json.loads((scene_dir / "scene.json").read_text())
        cfg.tile_size = int(spec["tile_size"])
        cfg.image = str(scene_dir / "image.png")
        cfg.fine_masks = str(scene_dir / "fine.jsonl")
        cfg.coarse_masks = str(scene_dir / "coarse.jsonl")
        cfg.reference = str(scene_dir / "gt.png")
        cfg.features = str(scene_dir / "feats.mcft")
    if out_dir:
        cfg.out_dir = out_dir
    if auto_label is not None:
        cfg.auto_label = auto_label
    result = run_pipeline(cfg)
    click.echo(f"run complete: {result.out_dir / 'manifest.json'}")


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.Abort:
        return 130
    except click.ClickException as exc:
        exc.show()
        return 2
    except StageError as exc:
        click.echo(f"error: {exc}", err=True)
        inner = exc.cause
        if isinstance(inner, ConfigError):
            return 2
        if isinstance(inner, InvariantError):
            return 4
        return 3
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        return 2
    except InvariantError as exc:
        click.echo(f"invariant violation: {exc}", err=True)
        return 4
    except McaeError as exc:
        click.echo(f"data error: {exc}", err=True)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
