"""Pixel-exact primitives: class schema, label rasters, RLE masks, tile grids.

Masks are stored bbox-local as alternating zero/one run counts (row-major
within the bbox, leading zero count). Global placement is a bbox translation,
never a pixel copy. All types are immutable values; the operations are pure.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
from PIL import Image

from .errors import (
    DataError,
    EmptyMaskError,
    InvalidClassError,
    RleFormatError,
    TileRangeError,
)

IGNORE_ID = 255

# The eight OpenEarthMap land-cover categories plus a configurable trailing class.
OEM8_CLASSES = [
    (0, "bareland", (128, 0, 0)),
    (1, "rangeland", (0, 255, 36)),
    (2, "developed", (148, 148, 148)),
    (3, "road", (255, 255, 255)),
    (4, "tree", (34, 97, 38)),
    (5, "water", (0, 69, 255)),
    (6, "agriculture", (75, 181, 73)),
    (7, "building", (222, 31, 7)),
    (8, "others", (255, 0, 255)),
]


@dataclass(frozen=True)
class ClassSchema:
    """Ordered land-cover class list with a fixed ignore id."""

    name: str
    classes: tuple[tuple[int, str, tuple[int, int, int]], ...]
    ignore_id: int = IGNORE_ID

    def __post_init__(self):
        ids = [c[0] for c in self.classes]
        names = [c[1] for c in self.classes]
        if len(ids) < 2:
            raise DataError("schema needs at least 2 classes")
        if ids != list(range(len(ids))):
            raise DataError("class ids must be contiguous from 0")
        if len(set(names)) != len(names):
            raise DataError("class names must be unique")
        if self.ignore_id in ids:
            raise DataError("ignore_id collides with a class id")

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def class_name(self, class_id: int) -> str:
        self.check_class(class_id)
        return self.classes[class_id][1]

    def class_color(self, class_id: int) -> tuple[int, int, int]:
        self.check_class(class_id)
        return self.classes[class_id][2]

    def check_class(self, class_id: int) -> None:
        if not 0 <= class_id < len(self.classes):
            raise InvalidClassError(f"class id {class_id} not in schema '{self.name}'")


def oem8_schema() -> ClassSchema:
    """Default schema: the eight OpenEarthMap categories plus 'others'."""
    return ClassSchema(name="oem8", classes=tuple(OEM8_CLASSES))


SCHEMAS = {"oem8": oem8_schema}


def schema_by_name(name: str) -> ClassSchema:
    try:
        return SCHEMAS[name]()
    except KeyError:
        raise DataError(f"unknown schema '{name}'") from None


@dataclass(frozen=True)
class LabelRaster:
    """Row-major u8 class-id raster with a pixel size in meters."""

    width: int
    height: int
    data: np.ndarray  # shape (height, width), uint8
    pixel_size_m: float = 0.3

    def __post_init__(self):
        if self.data.shape != (self.height, self.width):
            raise DataError("raster data shape disagrees with width/height")
        if self.data.dtype != np.uint8:
            raise DataError("raster data must be uint8")

    @classmethod
    def full_ignore(cls, width: int, height: int, pixel_size_m: float = 0.3) -> LabelRaster:
        return cls(width, height, np.full((height, width), IGNORE_ID, np.uint8), pixel_size_m)

    def validate_against(self, schema: ClassSchema) -> None:
        values = np.unique(self.data)
        bad = values[(values >= schema.num_classes) & (values != schema.ignore_id)]
        if bad.size:
            raise DataError(f"raster contains invalid class ids {bad.tolist()}")


def write_label_raster(raster: LabelRaster, path: Path | str, schema_name: str = "oem8") -> None:
    """Single-channel 8-bit PNG plus a sidecar text file with pixel size and schema."""
    path = Path(path)
    Image.fromarray(raster.data, mode="L").save(path, format="PNG")
    sidecar = path.with_suffix(path.suffix + ".txt")
    sidecar.write_text(f"pixel_size_m = {raster.pixel_size_m}\nschema = {schema_name}\n")


def read_label_raster(path: Path | str) -> tuple[LabelRaster, str]:
    path = Path(path)
    img = Image.open(path)
    if img.mode != "L":
        raise DataError(f"{path}: label raster must be single-channel 8-bit, got {img.mode}")
    data = np.asarray(img, dtype=np.uint8)
    pixel_size, schema_name = 0.3, "oem8"
    sidecar = path.with_suffix(path.suffix + ".txt")
    if sidecar.exists():
        for line in sidecar.read_text().splitlines():
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key == "pixel_size_m":
                pixel_size = float(value)
            elif key == "schema":
                schema_name = value
    h, w = data.shape
    return LabelRaster(w, h, data, pixel_size), schema_name


class Scale(str, Enum):
    FINE = "fine"
    COARSE = "coarse"
    FUSED = "fused"


@dataclass(frozen=True)
class RunLengthMask:
    """Object footprint: bbox (x0, y0, w, h) plus alternating zero/one runs.

    Canonical form: the first count is the leading zero run (possibly 0),
    every later count is >= 1, and the counts sum to w*h.
    """

    bbox: tuple[int, int, int, int]
    runs: tuple[int, ...]

    def __post_init__(self):
        x0, y0, w, h = self.bbox
        if w <= 0 or h <= 0:
            raise RleFormatError(f"degenerate bbox {self.bbox}")
        if not self.runs:
            raise RleFormatError("empty run list")
        if any(r < 0 for r in self.runs):
            raise RleFormatError("negative run count")
        if any(r == 0 for r in self.runs[1:]):
            raise RleFormatError("interior zero-length run")
        if sum(self.runs) != w * h:
            raise RleFormatError(f"runs sum {sum(self.runs)} != bbox area {w * h}")
        if self.area == 0:
            raise EmptyMaskError("mask has no foreground pixels")

    @property
    def area(self) -> int:
        return sum(self.runs[1::2])

    def decode(self) -> np.ndarray:
        """Bool bitmap of shape (h, w) within the bbox."""
        _, _, w, h = self.bbox
        values = np.arange(len(self.runs), dtype=np.uint8) % 2
        flat = np.repeat(values, np.asarray(self.runs, dtype=np.int64)).astype(bool)
        return flat.reshape(h, w)

    def translated(self, dx: int, dy: int) -> RunLengthMask:
        x0, y0, w, h = self.bbox
        return replace(self, bbox=(x0 + dx, y0 + dy, w, h))

    def pixels(self) -> set[tuple[int, int]]:
        """Global (x, y) foreground coordinates; small masks only."""
        x0, y0, _, _ = self.bbox
        ys, xs = np.nonzero(self.decode())
        return {(x0 + int(x), y0 + int(y)) for y, x in zip(ys, xs)}


def rle_encode(bitmap: np.ndarray, bbox: tuple[int, int, int, int]) -> RunLengthMask:
    """Encode a (h, w) binary bitmap placed at bbox. Raises EmptyMaskError on
    empty foreground. The bbox is kept as given so decode round-trips exactly."""
    x0, y0, w, h = bbox
    bitmap = np.asarray(bitmap, dtype=bool)
    if bitmap.shape != (h, w):
        raise RleFormatError(f"bitmap shape {bitmap.shape} != bbox ({h}, {w})")
    if not bitmap.any():
        raise EmptyMaskError("cannot encode an empty mask")
    flat = bitmap.ravel()
    changes = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate(([0], changes, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs = [0] + runs
    return RunLengthMask(bbox=(x0, y0, w, h), runs=tuple(int(r) for r in runs))


def rle_from_array(bitmap: np.ndarray, origin: tuple[int, int] = (0, 0)) -> RunLengthMask | None:
    """Encode with a tight bbox; origin is the (x, y) of bitmap[0, 0].
    Returns None for an empty bitmap (callers treat that as 'no mask')."""
    bitmap = np.asarray(bitmap, dtype=bool)
    ys, xs = np.nonzero(bitmap)
    if ys.size == 0:
        return None
    y0, y1 = int(ys.min()), int(ys.max()) + 1
    x0, x1 = int(xs.min()), int(xs.max()) + 1
    sub = bitmap[y0:y1, x0:x1]
    return rle_encode(sub, (origin[0] + x0, origin[1] + y0, x1 - x0, y1 - y0))


class Relation(str, Enum):
    DISJOINT = "disjoint"
    EQUAL = "equal"
    A_INSIDE_B = "a_inside_b"
    B_INSIDE_A = "b_inside_a"
    PARTIAL = "partial"


def _bbox_intersection(a: tuple[int, int, int, int], b: tuple[int, int, int, int]):
    ax0, ay0, aw, ah = a
    bx0, by0, bw, bh = b
    x0, y0 = max(ax0, bx0), max(ay0, by0)
    x1, y1 = min(ax0 + aw, bx0 + bw), min(ay0 + ah, by0 + bh)
    if x0 >= x1 or y0 >= y1:
        return None
    return x0, y0, x1 - x0, y1 - y0


def _window(mask: RunLengthMask, rect: tuple[int, int, int, int]) -> np.ndarray:
    """Bool view of the mask over rect (rect must lie inside the mask bbox)."""
    mx0, my0, _, _ = mask.bbox
    x0, y0, w, h = rect
    return mask.decode()[y0 - my0 : y0 - my0 + h, x0 - mx0 : x0 - mx0 + w]


def intersection_area(a: RunLengthMask, b: RunLengthMask) -> int:
    rect = _bbox_intersection(a.bbox, b.bbox)
    if rect is None:
        return 0
    return int(np.count_nonzero(_window(a, rect) & _window(b, rect)))


def mask_relation(a: RunLengthMask, b: RunLengthMask) -> tuple[Relation, int]:
    """Exact set relation of two masks in a shared coordinate frame."""
    inter = intersection_area(a, b)
    if inter == 0:
        return Relation.DISJOINT, 0
    if inter == a.area == b.area:
        return Relation.EQUAL, inter
    if inter == a.area:
        return Relation.A_INSIDE_B, inter
    if inter == b.area:
        return Relation.B_INSIDE_A, inter
    return Relation.PARTIAL, inter


def mask_intersect(a: RunLengthMask, b: RunLengthMask) -> RunLengthMask | None:
    rect = _bbox_intersection(a.bbox, b.bbox)
    if rect is None:
        return None
    return rle_from_array(_window(a, rect) & _window(b, rect), (rect[0], rect[1]))


def mask_subtract(a: RunLengthMask, b: RunLengthMask) -> RunLengthMask | None:
    """Pixels of a not in b; None when nothing remains."""
    rect = _bbox_intersection(a.bbox, b.bbox)
    if rect is None:
        return a
    bitmap = a.decode().copy()
    ax0, ay0, _, _ = a.bbox
    x0, y0, w, h = rect
    bitmap[y0 - ay0 : y0 - ay0 + h, x0 - ax0 : x0 - ax0 + w] &= ~_window(b, rect)
    return rle_from_array(bitmap, (ax0, ay0))


def mask_crop(a: RunLengthMask, rect: tuple[int, int, int, int]) -> RunLengthMask | None:
    """Restrict a mask to a rectangle; None when nothing falls inside."""
    inter = _bbox_intersection(a.bbox, rect)
    if inter is None:
        return None
    return rle_from_array(_window(a, inter), (inter[0], inter[1]))


def connected_components(mask: RunLengthMask) -> list[RunLengthMask]:
    """Split into 4-connected components, ordered by first (row-major) pixel."""
    from scipy import ndimage

    labels, count = ndimage.label(mask.decode())
    x0, y0, _, _ = mask.bbox
    parts = []
    for lab in range(1, count + 1):
        part = rle_from_array(labels == lab, (x0, y0))
        assert part is not None
        parts.append(part)
    parts.sort(key=lambda m: (m.bbox[1], m.bbox[0]))
    return parts


@dataclass(frozen=True)
class TileGrid:
    """Regular tile layout over a mosaic; overlap_ratio 0.5 is the fine-scale
    generation convention, 0 the annotation/export convention."""

    tile_size: int = 1024
    rows: int = 1
    cols: int = 1
    overlap_ratio: float = 0.0

    def __post_init__(self):
        if self.tile_size <= 0:
            raise DataError("tile_size must be positive")
        if not 0 <= self.overlap_ratio < 1:
            raise DataError("overlap_ratio must be in [0, 1)")
        if self.rows < 1 or self.cols < 1:
            raise DataError("grid needs at least one tile")

    @property
    def stride(self) -> int:
        return int(round(self.tile_size * (1 - self.overlap_ratio)))

    @property
    def mosaic_width(self) -> int:
        return (self.cols - 1) * self.stride + self.tile_size

    @property
    def mosaic_height(self) -> int:
        return (self.rows - 1) * self.stride + self.tile_size

    def tile_origin(self, row: int, col: int) -> tuple[int, int]:
        if not (0 <= row < self.rows and 0 <= col < self.cols):
            raise TileRangeError(f"tile ({row}, {col}) outside {self.rows}x{self.cols} grid")
        return col * self.stride, row * self.stride

    def tile_rect(self, row: int, col: int) -> tuple[int, int, int, int]:
        x0, y0 = self.tile_origin(row, col)
        return x0, y0, self.tile_size, self.tile_size

    def tile_of_point(self, x: float, y: float) -> tuple[int, int]:
        """Tile whose stride cell contains the point (clamped to the grid)."""
        col = min(self.cols - 1, max(0, int(x // self.stride)))
        row = min(self.rows - 1, max(0, int(y // self.stride)))
        return row, col

    def tiles(self) -> Iterator[tuple[int, int]]:
        for r in range(self.rows):
            for c in range(self.cols):
                yield r, c


@dataclass(frozen=True)
class MaskRecord:
    """A mask plus identity, tile address, scale tag and cached area."""

    id: int
    tile: tuple[int, int]
    scale: Scale
    mask: RunLengthMask
    area_px: int = field(default=-1)

    def __post_init__(self):
        if self.area_px == -1:
            object.__setattr__(self, "area_px", self.mask.area)
        elif self.area_px != self.mask.area:
            raise DataError(f"record {self.id}: area_px {self.area_px} != decoded {self.mask.area}")


def canonical_key(record: MaskRecord):
    return (record.tile[0], record.tile[1], record.mask.bbox[1], record.mask.bbox[0], record.id)


def global_frame(record: MaskRecord, grid: TileGrid) -> RunLengthMask:
    """The record's mask translated into mosaic coordinates (a view: same runs)."""
    x_off, y_off = grid.tile_origin(*record.tile)
    return record.mask.translated(x_off, y_off)


def write_mask_set(records: Iterable[MaskRecord], path: Path | str) -> None:
    """JSON-lines, one record per line."""
    with open(path, "w") as fh:
        for rec in records:
            fh.write(
                json.dumps(
                    {
                        "id": rec.id,
                        "tile": list(rec.tile),
                        "scale": rec.scale.value,
                        "bbox": list(rec.mask.bbox),
                        "rle": list(rec.mask.runs),
                    }
                )
                + "\n"
            )


def read_mask_set(path: Path | str) -> list[MaskRecord]:
    records = []
    seen: set[int] = set()
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                rec = MaskRecord(
                    id=int(obj["id"]),
                    tile=(int(obj["tile"][0]), int(obj["tile"][1])),
                    scale=Scale(obj["scale"]),
                    mask=RunLengthMask(bbox=tuple(obj["bbox"]), runs=tuple(obj["rle"])),
                )
            except (KeyError, ValueError, TypeError) as exc:
                raise DataError(f"{path}:{ln}: bad mask record: {exc}") from exc
            if rec.id in seen:
                raise DataError(f"{path}:{ln}: duplicate mask id {rec.id}")
            seen.add(rec.id)
            records.append(rec)
    return records


def mask_centroid(mask: RunLengthMask) -> tuple[float, float]:
    """Area-weighted centroid (x, y) of the foreground pixel set."""
    x0, y0, _, _ = mask.bbox
    ys, xs = np.nonzero(mask.decode())
    return x0 + float(xs.mean()), y0 + float(ys.mean())
