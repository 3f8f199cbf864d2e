"""Confusion counts, Acc/Se/Sp, rank AUC and refinement gain."""
import csv
import logging
import os
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import DataError, RasterError
from .raster import LabelMap, ProbMap, iou

logger = logging.getLogger(__name__)

UNDEFINED = "undefined"


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)


@dataclass(frozen=True)
class ScalarMetrics:
    acc: Optional[float]
    se: Optional[float]
    sp: Optional[float]


def _masked(values: np.ndarray, mask: Optional[LabelMap]) -> np.ndarray:
    if mask is None:
        return values.ravel()
    if mask.data.shape != values.shape:
        raise RasterError(f"mask shape {mask.data.shape} does not match {values.shape}")
    return values[mask.data.astype(bool)]


def confusion(pred: LabelMap, gt: LabelMap, mask: Optional[LabelMap] = None) -> ConfusionCounts:
    if pred.data.shape != gt.data.shape:
        raise RasterError(f"dimension mismatch: {pred.data.shape} vs {gt.data.shape}")
    p = _masked(pred.data, mask).astype(bool)
    g = _masked(gt.data, mask).astype(bool)
    return ConfusionCounts(
        tp=int(np.count_nonzero(p & g)),
        fp=int(np.count_nonzero(p & ~g)),
        tn=int(np.count_nonzero(~p & ~g)),
        fn=int(np.count_nonzero(~p & g)),
    )


def _ratio(num: int, den: int) -> Optional[float]:
    return num / den if den else None


def scalar_metrics(c: ConfusionCounts) -> ScalarMetrics:
    """Acc, Se, Sp; a zero denominator yields None rather than a number."""
    return ScalarMetrics(
        acc=_ratio(c.tp + c.tn, c.total),
        se=_ratio(c.tp, c.tp + c.fn),
        sp=_ratio(c.tn, c.tn + c.fp),
    )


def auc(scores: ProbMap, gt: LabelMap, mask: Optional[LabelMap] = None) -> float:
    """ROC area via the Mann-Whitney rank sum, ties given their average rank."""
    if scores.data.shape != gt.data.shape:
        raise RasterError(f"dimension mismatch: {scores.data.shape} vs {gt.data.shape}")
    s = _masked(scores.data, mask)
    g = _masked(gt.data, mask).astype(bool)
    n_pos = int(np.count_nonzero(g))
    n_neg = g.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUC is undefined when the ground truth holds a single class")
    ranks = rankdata(s, method="average")
    rank_sum = float(ranks[g].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


@dataclass(frozen=True)
class RefinementReport:
    iou_noisy: float
    iou_refined: float
    delta: float


def refinement_report(clean: LabelMap, noisy: LabelMap, refined: LabelMap) -> RefinementReport:
    before = iou(noisy, clean)
    after = iou(refined, clean)
    return RefinementReport(before, after, after - before)


@dataclass
class ImageReport:
    image_id: str
    counts: ConfusionCounts
    auc: Optional[float] = None
    refinement: Optional[RefinementReport] = None

    @property
    def metrics(self) -> ScalarMetrics:
        return scalar_metrics(self.counts)


REPORT_COLUMNS = ["image_id", "acc", "se", "sp", "auc", "iou_noisy", "iou_refined", "delta"]


def _fmt(value: Optional[float]) -> str:
    return UNDEFINED if value is None else f"{value:.6f}"


def _mean(values: Iterable[Optional[float]]) -> Optional[float]:
    present = [v for v in values if v is not None]
    return sum(present) / len(present) if present else None


def aggregate(rows: Sequence[ImageReport]) -> ImageReport:
    """Mean row: Acc/Se/Sp from summed counts, AUC and IoUs averaged per image."""
    total = ConfusionCounts()
    for row in rows:
        total = total + row.counts
    refinement = None
    refined_rows = [r.refinement for r in rows if r.refinement is not None]
    if refined_rows:
        refinement = RefinementReport(
            _mean(r.iou_noisy for r in refined_rows),
            _mean(r.iou_refined for r in refined_rows),
            _mean(r.delta for r in refined_rows),
        )
    return ImageReport("mean", total, _mean(r.auc for r in rows), refinement)


def report_row(row: ImageReport) -> List[str]:
    m = row.metrics
    ref = row.refinement
    return [
        row.image_id,
        _fmt(m.acc),
        _fmt(m.se),
        _fmt(m.sp),
        _fmt(row.auc),
        _fmt(ref.iou_noisy if ref else None),
        _fmt(ref.iou_refined if ref else None),
        _fmt(ref.delta if ref else None),
    ]


def write_report_tsv(path: str, rows: Sequence[ImageReport]) -> ImageReport:
    """One row per image plus a trailing mean row; returns the mean row."""
    mean = aggregate(rows)
    dirname = os.path.dirname(path)
    if dirname:
        os.makedirs(dirname, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for row in rows:
            writer.writerow(report_row(row))
        writer.writerow(report_row(mean))
    undefined = sum(1 for row in rows for v in report_row(row)[1:4] if v == UNDEFINED)
    if undefined:
        logger.warning("%d undefined metric values in %s", undefined, path)
    return mean
