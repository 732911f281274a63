"""Confusion-matrix accuracy metrics and per-date accuracy curves.

Rows are truth, columns are predictions, plus one trailing "unclassified"
column for pixels the pipeline left unknown or in conflict.  In strict mode
(default) unclassified predictions count against producer accuracy and OA,
matching per-date curves that sit at zero before any labels exist.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .raster import CONFLICT, UNKNOWN, LabelRaster


@dataclass
class ConfusionMatrix:
    counts: np.ndarray            # (K, K+1) int64; last column = unclassified
    classes: list[int]            # evaluated class codes, row/column order
    class_names: dict[int, str]
    strict: bool = True

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        k = len(self.classes)
        if k < 2:
            raise ValueError("need at least two evaluated classes")
        if self.counts.shape != (k, k + 1):
            raise ValueError("counts must be (K, K+1)")
        if (self.counts < 0).any():
            raise ValueError("counts must be non-negative")

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class ClassScore:
    ua: float
    pa: float
    f1: float
    degenerate: bool


@dataclass
class StepMetrics:
    step: int
    doy: int
    oa: float
    f1: dict[int, float]
    degenerate: dict[int, bool] = field(default_factory=dict)
    agreement: dict[int, float | None] = field(default_factory=dict)
    label_counts: dict[int, int] = field(default_factory=dict)


@dataclass
class AccuracyCurve:
    steps: list[StepMetrics]

    def __post_init__(self):
        ids = [m.step for m in self.steps]
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise ValueError("time steps must be strictly increasing")

    def oa_series(self) -> list[float]:
        return [m.oa for m in self.steps]


def confusion(
    pred: LabelRaster,
    truth: LabelRaster,
    eval_mask: np.ndarray | None = None,
    classes: list[int] | None = None,
    strict: bool = True,
) -> ConfusionMatrix:
    """Count predictions over pixels with known truth inside ``eval_mask``.

    Unknown/conflict predictions land in the trailing unclassified column.
    """
    if pred.cells.shape != truth.cells.shape:
        raise ValueError("prediction and truth geometry mismatch")
    if classes is None:
        classes = [0] + sorted(truth.class_table)
    k = len(classes)
    code_to_idx = {c: i for i, c in enumerate(classes)}
    lut = np.full(65536, -1, dtype=np.int32)
    for c, i in code_to_idx.items():
        lut[c] = i
    t_idx = lut[truth.cells]
    sel = t_idx >= 0
    if eval_mask is not None:
        sel &= eval_mask
    p_idx = lut[pred.cells]
    p_idx = np.where((pred.cells == UNKNOWN) | (pred.cells == CONFLICT), k, p_idx)
    p_idx = np.where(p_idx < 0, k, p_idx)  # codes outside the class set
    counts = np.zeros((k, k + 1), dtype=np.int64)
    np.add.at(counts, (t_idx[sel], p_idx[sel]), 1)
    names = {0: "background", **truth.class_table}
    return ConfusionMatrix(counts, list(classes), {c: names.get(c, str(c)) for c in classes},
                           strict)


def class_score(cm: ConfusionMatrix, class_code: int) -> ClassScore:
    i = cm.classes.index(class_code)
    diag = float(cm.counts[i, i])
    col = float(cm.counts[:, i].sum())
    row_all = float(cm.counts[i, :].sum())
    row_strict = row_all if cm.strict else row_all - float(cm.counts[i, -1])
    ua = diag / col if col > 0 else 0.0
    pa = diag / row_strict if row_strict > 0 else 0.0
    f1v = 2 * ua * pa / (ua + pa) if (ua + pa) > 0 else 0.0
    degenerate = col == 0 and row_all == 0
    return ClassScore(ua, pa, f1v, degenerate)


def f1(cm: ConfusionMatrix, class_code: int) -> float:
    return class_score(cm, class_code).f1


def oa(cm: ConfusionMatrix) -> float:
    total = cm.counts.sum() if cm.strict else cm.counts[:, :-1].sum()
    if total == 0:
        return 0.0
    return float(np.trace(cm.counts[:, :-1])) / float(total)


def earliest_date(curve: AccuracyCurve, threshold: float = 0.85) -> int | None:
    """First time step whose OA meets the threshold, or None."""
    for m in curve.steps:
        if m.oa >= threshold:
            return m.step
    return None


def report(
    main: AccuracyCurve,
    baselines: dict[str, AccuracyCurve],
    class_names: dict[int, str],
    main_name: str = "main",
) -> tuple[str, str]:
    """Aligned per-date comparison; returns (text table, csv series)."""
    classes = sorted(class_names)
    by_step = {name: {m.step: m for m in curve.steps} for name, curve in baselines.items()}
    header = ["step", "doy", f"oa_{main_name}"]
    header += [f"f1_{class_names[c]}_{main_name}" for c in classes]
    for name in baselines:
        header.append(f"oa_{name}")
        header += [f"f1_{class_names[c]}_{name}" for c in classes]
        header.append(f"delta_oa_{name}")
    rows = []
    for m in main.steps:
        row = [m.step, m.doy, f"{m.oa:.6f}"]
        row += [f"{m.f1.get(c, 0.0):.6f}" for c in classes]
        for name in baselines:
            other = by_step[name].get(m.step)
            if other is None:
                row += [""] * (len(classes) + 2)
            else:
                row.append(f"{other.oa:.6f}")
                row += [f"{other.f1.get(c, 0.0):.6f}" for c in classes]
                row.append(f"{m.oa - other.oa:+.6f}")
        rows.append(row)
    csv_buf = io.StringIO()
    csv_buf.write(",".join(header) + "\n")
    for row in rows:
        csv_buf.write(",".join(str(v) for v in row) + "\n")

    widths = [max(len(str(h)), *(len(str(r[i])) for r in rows)) if rows else len(str(h))
              for i, h in enumerate(header)]
    text_buf = io.StringIO()
    text_buf.write("  ".join(h.ljust(w) for h, w in zip(header, widths)) + "\n")
    for row in rows:
        text_buf.write("  ".join(str(v).ljust(w) for v, w in zip(row, widths)) + "\n")
    best = max((m.oa for m in main.steps), default=0.0)
    text_buf.write(f"\nbest OA ({main_name}): {best:.4f}\n")
    for name, curve in baselines.items():
        b = max((m.oa for m in curve.steps), default=0.0)
        text_buf.write(f"best OA ({name}): {b:.4f}\n")
    return text_buf.getvalue(), csv_buf.getvalue()
