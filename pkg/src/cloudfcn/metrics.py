"""Confusion counts and the Jaccard / precision / recall / accuracy measures.

A ratio whose denominator is zero is reported as ``None`` (undefined)
rather than coerced to 0.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Iterable

import numpy as np

from .errors import InputError, ShapeError
from .raster_io import MaskGrid


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn)

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


@dataclass(frozen=True)
class MetricReport:
    jaccard: float | None
    precision: float | None
    recall: float | None
    overall_accuracy: float | None

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _bits(m) -> np.ndarray:
    return m.bits if isinstance(m, MaskGrid) else np.asarray(m, dtype=bool)


def confusion(pred, truth) -> ConfusionCounts:
    p, t = _bits(pred), _bits(truth)
    if p.shape != t.shape:
        raise ShapeError(f"prediction {p.shape} and truth {t.shape} differ in shape")
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, p.size - tp - fp - fn, fp, fn)


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


def compute_metrics(c: ConfusionCounts) -> MetricReport:
    return MetricReport(
        jaccard=_ratio(c.tp, c.tp + c.fn + c.fp),
        precision=_ratio(c.tp, c.tp + c.fp),
        recall=_ratio(c.tp, c.tp + c.fn),
        overall_accuracy=_ratio(c.tp + c.tn, c.total),
    )


def aggregate(items: Iterable[ConfusionCounts | MetricReport], mode: str = "pooled") -> MetricReport:
    """Combine per-scene results.

    ``pooled`` sums the confusion counts and computes metrics once;
    ``mean`` averages each metric over the scenes where it is defined.
    """
    items = list(items)
    if not items:
        raise InputError("cannot aggregate an empty set of scenes")
    if mode == "pooled":
        if not all(isinstance(i, ConfusionCounts) for i in items):
            raise InputError("pooled aggregation needs confusion counts")
        total = ConfusionCounts()
        for c in items:
            total = total + c
        return compute_metrics(total)
    if mode == "mean":
        reports = [compute_metrics(i) if isinstance(i, ConfusionCounts) else i for i in items]
        out = {}
        for f in fields(MetricReport):
            vals = [getattr(r, f.name) for r in reports if getattr(r, f.name) is not None]
            out[f.name] = sum(vals) / len(vals) if vals else None
        return MetricReport(**out)
    raise InputError(f"unknown aggregation mode {mode!r}")
