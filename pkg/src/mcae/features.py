"""Per-mask feature contract: learned-embedding ingestion (MCFT files), a
deterministic handcrafted descriptor fallback, and the crop-consistency
scorer used to diagnose feature quality on overlapping crops."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    DataError,
    DuplicateFeatureIdError,
    FeatureDimError,
    FeatureFormatError,
    MaskBoundsError,
    NonFiniteFeatureError,
    NotNormalizedError,
)
from .raster import RunLengthMask

DESCRIPTOR_DIM = 17
_MCFT_MAGIC = b"MCFT"
_MCFT_VERSION = 1


@dataclass(frozen=True)
class FeatureTable:
    """Unit-norm feature vector per mask id; one dimension per table.
    Vectors are stored float32, matching the on-disk format, so an
    export/import cycle is bit-exact."""

    dim: int
    entries: dict[int, np.ndarray]

    def __post_init__(self):
        canonical: dict[int, np.ndarray] = {}
        for mask_id, vec in self.entries.items():
            vec = np.asarray(vec, dtype=np.float32)
            if vec.shape != (self.dim,):
                raise FeatureDimError(f"mask {mask_id}: vector dim {vec.shape} != {self.dim}")
            norm = float(np.linalg.norm(vec.astype(np.float64)))
            if abs(norm - 1.0) > 1e-5:
                raise NotNormalizedError(f"mask {mask_id}: norm {norm} != 1")
            canonical[mask_id] = vec
        object.__setattr__(self, "entries", canonical)

    def __len__(self) -> int:
        return len(self.entries)

    def vector(self, mask_id: int) -> np.ndarray:
        return self.entries[mask_id]


def normalize(vec: np.ndarray) -> np.ndarray:
    vec = np.asarray(vec, dtype=np.float64)
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise DataError("cannot normalize a zero vector")
    return vec / norm


def build_table(entries: dict[int, np.ndarray]) -> FeatureTable:
    if not entries:
        raise DataError("cannot infer dim from an empty table; construct FeatureTable directly")
    dim = len(next(iter(entries.values())))
    return FeatureTable(dim=dim, entries={k: normalize(v) for k, v in entries.items()})


def handcrafted_descriptor(tile_image: np.ndarray, mask: RunLengthMask) -> np.ndarray:
    """17-d color/shape descriptor: RGB mean (3), RGB std (3), 8-bin hue
    histogram, log-area, perimeter^2/area compactness, bbox elongation;
    L2-normalized. Deterministic and translation-invariant."""
    if tile_image.ndim != 3 or tile_image.shape[2] != 3:
        raise DataError("tile_image must be an HxWx3 8-bit RGB array")
    h_img, w_img = tile_image.shape[:2]
    x0, y0, w, h = mask.bbox
    if x0 < 0 or y0 < 0 or x0 + w > w_img or y0 + h > h_img:
        raise MaskBoundsError(f"mask bbox {mask.bbox} exceeds image {w_img}x{h_img}")

    bits = mask.decode()
    patch = tile_image[y0 : y0 + h, x0 : x0 + w].astype(np.float64) / 255.0
    rgb = patch[bits]  # (area, 3)
    mean = rgb.mean(axis=0)
    std = rgb.std(axis=0)

    hue = _hue(rgb)
    hist, _ = np.histogram(hue, bins=8, range=(0.0, 1.0))
    hist = hist / rgb.shape[0]

    log_area = np.log(float(mask.area))
    perimeter = _perimeter(bits)
    compactness = perimeter * perimeter / float(mask.area)
    elongation = max(w, h) / min(w, h)

    vec = np.concatenate([mean, std, hist, [log_area, compactness, elongation]])
    return normalize(vec)


def _hue(rgb: np.ndarray) -> np.ndarray:
    """Hue in [0, 1); gray pixels map to 0 (matplotlib/colorsys convention)."""
    r, g, b = rgb[:, 0], rgb[:, 1], rgb[:, 2]
    maxc = rgb.max(axis=1)
    minc = rgb.min(axis=1)
    span = maxc - minc
    nz = span > 0
    safe = np.where(nz, span, 1)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    hue = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    return np.where(nz, (hue / 6.0) % 1.0, 0.0)


def _perimeter(bits: np.ndarray) -> int:
    """Count of 4-neighbor pixel edges between foreground and background
    (image border counts as background)."""
    padded = np.pad(bits, 1, constant_values=False)
    per = 0
    for axis, shift in ((0, 1), (0, -1), (1, 1), (1, -1)):
        per += int(np.count_nonzero(padded & ~np.roll(padded, shift, axis=axis)))
    return per


def export_features(table: FeatureTable, path: Path | str) -> None:
    """MCFT: magic, u32 version, u32 count, u32 dim, then (u64 id, dim f32) LE."""
    with open(path, "wb") as fh:
        fh.write(_MCFT_MAGIC)
        fh.write(struct.pack("<III", _MCFT_VERSION, len(table.entries), table.dim))
        for mask_id in sorted(table.entries):
            fh.write(struct.pack("<Q", mask_id))
            fh.write(table.entries[mask_id].astype("<f4").tobytes())


def import_features(path: Path | str) -> FeatureTable:
    """Read an MCFT file. Vectors with a norm within 1e-3 of 1 are
    renormalized; further off is rejected. Dim mismatch, duplicate ids and
    non-finite values raise distinct errors."""
    raw = Path(path).read_bytes()
    if raw[:4] != _MCFT_MAGIC:
        raise FeatureFormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 16:
        raise FeatureFormatError(f"{path}: truncated header")
    version, count, dim = struct.unpack("<III", raw[4:16])
    if version != _MCFT_VERSION:
        raise FeatureFormatError(f"{path}: unsupported version {version}")
    record_size = 8 + 4 * dim
    if len(raw) != 16 + count * record_size:
        raise FeatureDimError(
            f"{path}: file size {len(raw)} != header promise of {count} x dim-{dim} records"
        )
    entries: dict[int, np.ndarray] = {}
    for i in range(count):
        off = 16 + i * record_size
        (mask_id,) = struct.unpack("<Q", raw[off : off + 8])
        vec = np.frombuffer(raw, dtype="<f4", count=dim, offset=off + 8).astype(np.float32)
        if mask_id in entries:
            raise DuplicateFeatureIdError(f"{path}: duplicate mask id {mask_id}")
        if not np.all(np.isfinite(vec)):
            raise NonFiniteFeatureError(f"{path}: non-finite feature for mask {mask_id}")
        norm = float(np.linalg.norm(vec))
        if abs(norm - 1.0) > 1e-3:
            raise NotNormalizedError(f"{path}: mask {mask_id} norm {norm} too far from 1")
        if abs(norm - 1.0) > 1e-5:
            vec = (vec / norm).astype(np.float32)  # keep in-tolerance bits untouched
        entries[mask_id] = vec
    return FeatureTable(dim=dim, entries=entries)


@dataclass(frozen=True)
class ConsistencyLossConfig:
    temperature: float = 0.07

    def __post_init__(self):
        if self.temperature <= 0:
            raise DataError("temperature must be positive")


def crop_consistency_score(
    feat_a: np.ndarray,
    feat_b: np.ndarray,
    shared_masks: list[RunLengthMask],
    cfg: ConsistencyLossConfig | None = None,
) -> float:
    """Contrastive consistency of two per-pixel feature maps over shared masks.

    Each mask is mean-pooled and L2-normalized in both maps; the score is the
    mean InfoNCE term -log(exp(a_m.b_m / t) / sum_n exp(a_m.b_n / t)).
    A single shared mask has no negatives and scores 0 by definition.
    """
    cfg = cfg or ConsistencyLossConfig()
    if not shared_masks:
        raise DataError("need at least one shared mask")
    if feat_a.shape != feat_b.shape or feat_a.ndim != 3:
        raise DataError("feature maps must share an (H, W, D) shape")
    if len(shared_masks) == 1:
        return 0.0

    a_vecs, b_vecs = [], []
    for mask in shared_masks:
        x0, y0, w, h = mask.bbox
        if x0 < 0 or y0 < 0 or x0 + w > feat_a.shape[1] or y0 + h > feat_a.shape[0]:
            raise MaskBoundsError(f"mask bbox {mask.bbox} exceeds feature map")
        bits = mask.decode()
        a_vecs.append(normalize(feat_a[y0 : y0 + h, x0 : x0 + w][bits].mean(axis=0)))
        b_vecs.append(normalize(feat_b[y0 : y0 + h, x0 : x0 + w][bits].mean(axis=0)))
    a_mat = np.stack(a_vecs)
    b_mat = np.stack(b_vecs)
    logits = (a_mat @ b_mat.T) / cfg.temperature
    logits -= logits.max(axis=1, keepdims=True)  # stable softmax
    log_probs = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    return float(-log_probs.diagonal().mean())
