"""Overlap metrics (DSC, JAC, SE, SP, PRE) and Table-style reporting."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .data import as_mask
from .errors import ValidationError

METRIC_NAMES = ("DSC", "JAC", "SE", "SP", "PRE")
# JAC is reported as a fraction, the others as percentages
PERCENT_METRICS = {"DSC", "SE", "SP", "PRE"}


class SegMetrics(NamedTuple):
    dsc: float
    jac: float
    se: float
    sp: float
    pre: float


def confusion_counts(pred_mask, gt_mask) -> tuple[int, int, int, int]:
    """Return ``(tp, fp, tn, fn)``."""
    p = as_mask(pred_mask).astype(bool)
    g = as_mask(gt_mask).astype(bool)
    if p.shape != g.shape:
        raise ValidationError(f"shape mismatch: {p.shape} vs {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = p.size - tp - fp - fn
    return tp, fp, tn, fn


def _ratio(num: float, den: float) -> float:
    return num / den if den > 0 else 0.0


def metrics_from_counts(tp: int, fp: int, tn: int, fn: int) -> SegMetrics:
    """Five metrics from confusion counts.

    When both masks are empty DSC, JAC, SE and PRE are 1; otherwise any metric
    whose denominator is zero is 0.
    """
    sp = _ratio(tn, tn + fp)
    if tp + fp + fn == 0:
        return SegMetrics(1.0, 1.0, 1.0, sp, 1.0)
    return SegMetrics(
        dsc=_ratio(2 * tp, 2 * tp + fp + fn),
        jac=_ratio(tp, tp + fp + fn),
        se=_ratio(tp, tp + fn),
        sp=sp,
        pre=_ratio(tp, tp + fp),
    )


def confusion_metrics(pred_mask, gt_mask) -> SegMetrics:
    return metrics_from_counts(*confusion_counts(pred_mask, gt_mask))


def dice(pred_mask, gt_mask) -> float:
    return confusion_metrics(pred_mask, gt_mask).dsc


def aggregate_mean_std(per_slice: Sequence[float]) -> tuple[float, float]:
    """Mean and population standard deviation."""
    vals = np.asarray(per_slice, dtype=np.float64)
    if vals.size == 0:
        raise ValidationError("cannot aggregate an empty list")
    return float(vals.mean()), float(vals.std())


@dataclass
class MetricReport:
    """Per-slice metric values plus mean and std for each metric."""

    ids: list[str] = field(default_factory=list)
    per_slice: dict[str, list[float]] = field(default_factory=lambda: {k: [] for k in METRIC_NAMES})

    @classmethod
    def from_masks(cls, ids: Iterable[str], preds: Iterable[np.ndarray], gts: Iterable[np.ndarray]) -> "MetricReport":
        rep = cls()
        for sid, p, g in zip(ids, preds, gts):
            rep.add(sid, confusion_metrics(p, g))
        if not rep.ids:
            raise ValidationError("no slices to evaluate")
        return rep

    def add(self, slice_id: str, m: SegMetrics) -> None:
        self.ids.append(slice_id)
        for name, v in zip(METRIC_NAMES, m):
            self.per_slice[name].append(float(v))

    def summary(self) -> dict[str, tuple[float, float]]:
        return {k: aggregate_mean_std(v) for k, v in self.per_slice.items()}

    def mean(self, name: str = "DSC") -> float:
        return self.summary()[name][0]

    def to_dict(self) -> dict:
        return {
            "n": len(self.ids),
            "summary": {k: {"mean": m, "std": s} for k, (m, s) in self.summary().items()},
            "per_slice": {"ids": self.ids, **self.per_slice},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        per = d["per_slice"]
        return cls(ids=list(per["ids"]), per_slice={k: list(per[k]) for k in METRIC_NAMES})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def format_cell(name: str, mean: float, std: float) -> str:
    if name in PERCENT_METRICS:
        return f"{100 * mean:.2f}±{std:.2f}"
    return f"{mean:.2f}±{std:.2f}"


def format_table(rows: Sequence[tuple[str, MetricReport]]) -> str:
    """Aligned method x metric table with ``mean±std`` cells.

    DSC/SE/SP/PRE means are shown as percentages, JAC as a fraction; the std
    is always shown on the 0-1 scale.
    """
    header = ["Method", *(f"{k}↑" for k in METRIC_NAMES)]
    body = []
    for name, rep in rows:
        s = rep.summary()
        body.append([name, *(format_cell(k, *s[k]) for k in METRIC_NAMES)])
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
             for r in [header, *body]]
    rule = "-" * len(lines[0])
    return "\n".join([rule, lines[0], rule, *lines[1:], rule]) + "\n"
