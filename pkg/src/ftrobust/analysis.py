"""Pareto frontiers of (accuracy, robustness), their AUC and cross-method comparisons.

AUC construction: the frontier's highest-robustness point is extended
horizontally to accuracy 0, consecutive frontier points are joined by
straight segments, and the highest-accuracy point drops vertically to
robustness 0. The AUC is the area under that curve, so a single point
(a, r) gives the rectangle a * r.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import kernels
from .errors import AnalysisError


@dataclass(frozen=True)
class ParetoPoint:
    accuracy: float
    robustness: float
    step: int = -1
    run_id: str = ""

    def __post_init__(self):
        if not (math.isfinite(self.accuracy) and math.isfinite(self.robustness)):
            raise AnalysisError(f"non-finite point ({self.accuracy}, {self.robustness})")


@dataclass(frozen=True)
class Frontier:
    points: tuple  # ascending accuracy, strictly descending robustness

    @property
    def accuracy(self) -> np.ndarray:
        return np.array([p.accuracy for p in self.points], dtype=np.float64)

    @property
    def robustness(self) -> np.ndarray:
        return np.array([p.robustness for p in self.points], dtype=np.float64)

    def __len__(self) -> int:
        return len(self.points)


def _as_points(points: Iterable) -> list[ParetoPoint]:
    out = []
    for p in points:
        out.append(p if isinstance(p, ParetoPoint) else ParetoPoint(float(p[0]), float(p[1])))
    return out


def pareto_frontier(points: Iterable) -> Frontier:
    """Maximal non-dominated subset; among identical coordinates the first point is kept."""
    pts = _as_points(points)
    if not pts:
        raise AnalysisError("pareto_frontier needs at least one point")
    acc = np.array([p.accuracy for p in pts], dtype=np.float64)
    rob = np.array([p.robustness for p in pts], dtype=np.float64)
    keep = np.flatnonzero(kernels.pareto_mask(acc, rob))
    keep = keep[np.argsort(acc[keep], kind="stable")]
    return Frontier(tuple(pts[i] for i in keep))


def auc(frontier: Frontier | Iterable) -> float:
    f = frontier if isinstance(frontier, Frontier) else pareto_frontier(frontier)
    if len(f) == 0:
        raise AnalysisError("auc needs a nonempty frontier")
    return kernels.frontier_auc(f.accuracy, f.robustness)


def relative_auc(auc_by_method: Mapping[str, float]) -> dict[str, float]:
    """Percent above (+) or below (-) the mean over methods."""
    if len(auc_by_method) < 2:
        raise AnalysisError("relative_auc needs at least two methods")
    mean = float(np.mean(list(auc_by_method.values())))
    if mean == 0:
        raise AnalysisError("relative_auc is undefined when the mean AUC is zero")
    return {m: (v / mean - 1.0) * 100.0 for m, v in auc_by_method.items()}


@dataclass(frozen=True)
class SlopeProfile:
    slopes: tuple
    max_abs_slope: float
    length: float

    @property
    def empty(self) -> bool:
        return not self.slopes


def frontier_slope_profile(frontier: Frontier) -> SlopeProfile:
    """Per-segment d(robustness)/d(accuracy), the steepest |slope| and the polyline length."""
    if len(frontier) < 2:
        return SlopeProfile((), 0.0, 0.0)
    da = np.diff(frontier.accuracy)
    dr = np.diff(frontier.robustness)
    slopes = dr / da
    return SlopeProfile(tuple(float(s) for s in slopes), float(np.abs(slopes).max()),
                        float(np.hypot(da, dr).sum()))


# ---------------------------------------------------------------- published AUC table

TABLE2_DATASETS = ("C10", "C100", "Cal", "CUB", "Dogs")
TABLE2 = {
    "BitFit": (0.21, 0.10, 0.33, 0.14, 0.08),
    "Adapter": (0.12, 0.05, 0.21, 0.07, 0.05),
    "LoRA": (0.14, 0.07, 0.23, 0.12, 0.06),
    "Compacter": (0.09, 0.06, 0.34, 0.15, 0.09),
    "IA3": (0.08, 0.05, 0.31, 0.13, 0.05),
    "LP": (0.06, 0.03, 0.24, 0.08, 0.02),
    "FullFT": (0.11, 0.04, 0.26, 0.09, 0.05),
}
# percentages stated in the text, signed (+ above / - below the column mean)
TABLE2_TEXT_CLAIMS = (
    ("C10", "BitFit", 75.0),
    ("C100", "BitFit", 81.5),
    ("Cal", "Compacter", 57.5),
    ("Dogs", "Compacter", 24.0),
    ("CUB", "Compacter", 34.6),
    ("C100", "LP", -47.5),
    ("C100", "FullFT", -20.0),
    ("CUB", "LP", -28.2),
    ("CUB", "FullFT", -19.2),
)


def table2_column(dataset: str) -> dict[str, float]:
    j = TABLE2_DATASETS.index(dataset)
    return {m: row[j] for m, row in TABLE2.items()}


def table2_relative() -> dict[str, dict[str, float]]:
    return {ds: relative_auc(table2_column(ds)) for ds in TABLE2_DATASETS}


@dataclass(frozen=True)
class Discrepancy:
    dataset: str
    method: str
    stated: float
    recomputed: float

    @property
    def matches(self) -> bool:
        return round(self.recomputed, 1) == self.stated


def table2_discrepancies() -> list[Discrepancy]:
    """Every textual percentage next to the value recomputed from the table."""
    rel = table2_relative()
    return [Discrepancy(ds, m, stated, rel[ds][m]) for ds, m, stated in TABLE2_TEXT_CLAIMS]


# ---------------------------------------------------------------- CSV emission


def _csv(rows: Sequence[Sequence], header: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _num(v: float) -> str:
    return f"{v:.6f}"


def frontier_csv(frontiers: Mapping[str, Frontier]) -> str:
    rows = [(run_id, p.step, _num(p.accuracy), _num(p.robustness))
            for run_id, f in frontiers.items() for p in f.points]
    return _csv(rows, ("run_id", "step", "accuracy", "robustness"))


def auc_table_csv(table: Mapping[str, Mapping[str, float]]) -> str:
    """Rows are methods, columns tasks (the published table layout), then one relative-% column per task.

    ``table`` maps task -> method -> AUC. A task with a single method gets an
    empty relative column.
    """
    tasks = list(table)
    methods: list[str] = []
    for t in tasks:
        methods.extend(m for m in table[t] if m not in methods)
    rel = {t: relative_auc(table[t]) if len(table[t]) >= 2 else {} for t in tasks}
    rows = []
    for m in methods:
        row = [m] + [_num(table[t][m]) if m in table[t] else "" for t in tasks]
        row += [f"{rel[t][m]:.2f}" if m in rel[t] else "" for t in tasks]
        rows.append(row)
    return _csv(rows, ["method", *tasks, *[f"{t}_rel_pct" for t in tasks]])


def discrepancy_csv() -> str:
    rows = [(d.dataset, d.method, f"{d.stated:.1f}", f"{d.recomputed:.2f}", int(d.matches))
            for d in table2_discrepancies()]
    return _csv(rows, ("dataset", "method", "stated_pct", "recomputed_pct", "matches"))
