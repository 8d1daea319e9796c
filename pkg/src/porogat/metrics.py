"""Ranking and threshold metrics for rare-event evaluation."""

from __future__ import annotations

from dataclasses import dataclass, fields
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

THRESHOLD_GRID = np.round(np.arange(101) * 0.01, 2)


def _validate(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).astype(int).ravel()
    if s.shape != y.shape:
        raise ValueError(f"scores {s.shape} and labels {y.shape} differ in length")
    return s, y


def auc(scores, labels) -> float:
    """ROC AUC as the Mann-Whitney statistic, ties counted one half."""
    s, y = _validate(scores, labels)
    n1 = int(y.sum())
    n0 = y.size - n1
    if n1 == 0 or n0 == 0:
        raise ValueError("AUC needs both classes present")
    r = rankdata(s)  # mid-ranks
    return float((r[y == 1].sum() - n1 * (n1 + 1) / 2) / (n1 * n0))


def aupr(scores, labels) -> float:
    """Average precision: sum over distinct thresholds of (R_k - R_{k-1}) * P_k."""
    s, y = _validate(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("AUPR needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.cumsum(y)[last]
    gain = np.diff(np.r_[0, tp])
    # exact rational sum, so the result is the correctly rounded value
    total = sum(Fraction(int(g) * int(t), int(k) + 1) for g, t, k in zip(gain, tp, last) if g)
    return float(total / n_pos)


def prf_at(scores, labels, t: float):
    """Precision, recall and F1 of ``score > t``; zero denominators give 0."""
    s, y = _validate(scores, labels)
    pred = s > t
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def f1_threshold_scan(scores, labels, grid=THRESHOLD_GRID):
    """Best-F1 threshold on the grid; ties go to the smaller threshold."""
    best_t, best_f1 = float(grid[0]), -1.0
    for t in grid:
        f1 = prf_at(scores, labels, t)[2]
        if f1 > best_f1:
            best_t, best_f1 = float(t), f1
    return best_t, best_f1


def spearman(u, v) -> float:
    """Pearson correlation of mid-ranks."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.size != v.size or u.size < 2:
        raise ValueError("spearman needs two vectors of equal length >= 2")
    ru, rv = rankdata(u), rankdata(v)
    ru -= ru.mean()
    rv -= rv.mean()
    den = np.sqrt((ru ** 2).sum() * (rv ** 2).sum())
    if den == 0:
        raise ValueError("spearman is undefined for a constant vector")
    return float((ru * rv).sum() / den)


@dataclass
class MetricReport:
    auc: float
    aupr: float
    precision: float
    recall: float
    f1: float
    f1_star: float
    t_star: float
    val_f1_star: float = float("nan")
    recovery_pct: float = float("nan")

    @classmethod
    def evaluate(cls, test_scores, test_labels, t_star: float, val_f1: float = float("nan"),
                 t: float = 0.5) -> "MetricReport":
        p, r, f = prf_at(test_scores, test_labels, t)
        return cls(auc(test_scores, test_labels), aupr(test_scores, test_labels), p, r, f,
                   prf_at(test_scores, test_labels, t_star)[2], t_star, val_f1)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def write(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("".join(f"{k} = {float(v)!r}\n" for k, v in self.to_dict().items()))

    @classmethod
    def read(cls, path: str | Path) -> "MetricReport":
        vals = {}
        for line in Path(path).read_text().splitlines():
            if line.strip():
                k, v = (x.strip() for x in line.split("=", 1))
                vals[k] = float(v)
        return cls(**vals)

    def csv_row(self, prefix=()) -> str:
        return ",".join([*map(str, prefix), *(repr(float(v)) for v in self.to_dict().values())])


METRIC_NAMES = tuple(f.name for f in fields(MetricReport))
