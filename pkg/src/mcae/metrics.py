"""Confusion-matrix metrics (OA, mF1, mIoU, UA) and class-area reporting."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .raster import ClassSchema, LabelRaster


@dataclass(frozen=True)
class ConfusionMatrix:
    """K x K pixel tally; rows are ground truth, columns are prediction."""

    counts: np.ndarray

    def __post_init__(self):
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise DataError("confusion matrix must be square")

    @property
    def k(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)


def confusion(gt: LabelRaster, pred: LabelRaster, schema: ClassSchema) -> ConfusionMatrix:
    """Per-pixel tally; ground-truth ignore pixels are skipped. Prediction
    pixels must be valid class ids wherever the ground truth is scored."""
    if (gt.width, gt.height) != (pred.width, pred.height):
        raise DataError(
            f"dimension mismatch: gt {gt.width}x{gt.height} vs pred {pred.width}x{pred.height}"
        )
    k = schema.num_classes
    keep = gt.data != schema.ignore_id
    g = gt.data[keep].astype(np.int64)
    p = pred.data[keep].astype(np.int64)
    if g.size and int(g.max()) >= k:
        raise DataError("ground truth contains ids outside the schema")
    if p.size and int(p.max()) >= k:
        raise DataError("prediction contains ids outside the schema")
    counts = np.bincount(k * g + p, minlength=k * k).reshape(k, k).astype(np.uint64)
    return ConfusionMatrix(counts)


@dataclass(frozen=True)
class MetricsReport:
    """Per-class ratios are None where undefined (0/0); means skip classes
    whose row and column are both empty."""

    oa: float
    iou: tuple[float | None, ...]
    f1: tuple[float | None, ...]
    ua: tuple[float | None, ...]
    m_iou: float
    m_f1: float

    def to_dict(self) -> dict:
        return {
            "oa": self.oa,
            "iou": list(self.iou),
            "f1": list(self.f1),
            "ua": list(self.ua),
            "m_iou": self.m_iou,
            "m_f1": self.m_f1,
        }


def metrics(cm: ConfusionMatrix) -> MetricsReport:
    counts = cm.counts.astype(np.float64)
    total = counts.sum()
    if total == 0:
        raise DataError("empty confusion matrix")
    tp = np.diag(counts)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp

    oa = float(tp.sum() / total)
    iou, f1, ua = [], [], []
    for i in range(cm.k):
        denom_iou = tp[i] + fp[i] + fn[i]
        iou.append(float(tp[i] / denom_iou) if denom_iou > 0 else None)
        f1.append(float(2 * tp[i] / (2 * tp[i] + fp[i] + fn[i])) if denom_iou > 0 else None)
        ua.append(float(tp[i] / (tp[i] + fp[i])) if tp[i] + fp[i] > 0 else None)

    defined_iou = [v for v in iou if v is not None]
    defined_f1 = [v for v in f1 if v is not None]
    if not defined_iou:
        raise DataError("no class has any pixels")
    return MetricsReport(
        oa=oa,
        iou=tuple(iou),
        f1=tuple(f1),
        ua=tuple(ua),
        m_iou=float(np.mean(defined_iou)),
        m_f1=float(np.mean(defined_f1)),
    )


def area_report(raster: LabelRaster) -> dict[int, float]:
    """Per-class area in hectares: pixel count x pixel_size_m^2 / 10,000."""
    if raster.pixel_size_m is None or raster.pixel_size_m <= 0:
        raise DataError("pixel_size_m must be positive")
    values, counts = np.unique(raster.data, return_counts=True)
    factor = raster.pixel_size_m**2 / 10_000.0
    return {
        int(v): float(c) * factor
        for v, c in zip(values, counts)
        if int(v) != 255
    }


def write_report(report: MetricsReport, cm: ConfusionMatrix, path: Path | str) -> None:
    payload = report.to_dict()
    payload["confusion"] = cm.counts.astype(int).tolist()
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
