import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from ftrobust import analysis as an
from ftrobust.errors import AnalysisError

coords = st.floats(0, 1, allow_nan=False, width=32)
clouds = st.lists(st.tuples(coords, coords), min_size=1, max_size=25)


def brute_force_frontier(points):
    """O(n^2) dominance check; duplicates keep their first occurrence."""
    keep = []
    for i, (a, r) in enumerate(points):
        dominated = any((b >= a and s >= r and (b > a or s > r)) for b, s in points)
        earlier_twin = any((b, s) == (a, r) for b, s in points[:i])
        if not dominated and not earlier_twin:
            keep.append((a, r))
    return sorted(keep)


def riemann_auc(points, h=1e-5):
    """Left Riemann sum of the staircase-with-segments curve."""
    f = brute_force_frontier(points)
    acc = np.array([p[0] for p in f])
    rob = np.array([p[1] for p in f])
    grid = np.arange(0, acc[-1], h) + h / 2
    y = np.interp(grid, acc, rob, left=rob[0])
    return float(y.sum() * h)


def test_examples():
    assert an.auc([(0.5, 0.4)]) == pytest.approx(0.2)
    assert an.auc([(0.4, 0.5), (0.6, 0.3)]) == pytest.approx(0.4 * 0.5 + 0.2 * 0.4)
    f = an.pareto_frontier([(0.5, 0.2), (0.5, 0.4), (0.3, 0.1)])
    assert [(p.accuracy, p.robustness) for p in f.points] == [(0.5, 0.4)]
    prof = an.frontier_slope_profile(an.pareto_frontier([(0.2, 0.6), (0.6, 0.4)]))
    assert prof.slopes == pytest.approx((-0.5,))
    assert prof.max_abs_slope == pytest.approx(0.5)
    assert prof.length == pytest.approx(math.hypot(0.4, 0.2))
    assert an.frontier_slope_profile(an.pareto_frontier([(0.2, 0.6)])).empty


def test_errors():
    with pytest.raises(AnalysisError):
        an.pareto_frontier([])
    with pytest.raises(AnalysisError):
        an.ParetoPoint(float("nan"), 0.1)
    with pytest.raises(AnalysisError):
        an.relative_auc({"LoRA": 0.1})
    with pytest.raises(AnalysisError):
        an.relative_auc({"LoRA": 0.0, "IA3": 0.0})


def test_point_metadata_survives():
    pts = [an.ParetoPoint(0.3, 0.5, step=50, run_id="a"), an.ParetoPoint(0.6, 0.2, step=700, run_id="a")]
    f = an.pareto_frontier(pts)
    assert [p.step for p in f.points] == [50, 700]


@settings(max_examples=200, deadline=None)
@given(clouds)
def test_frontier_matches_brute_force(points):
    f = an.pareto_frontier(points)
    got = [(p.accuracy, p.robustness) for p in f.points]
    assert got == brute_force_frontier(points)


@settings(max_examples=100, deadline=None)
@given(clouds)
def test_auc_matches_riemann(points):
    f = brute_force_frontier(points)
    assume(f[-1][0] > 1e-3)
    assert an.auc(points) == pytest.approx(riemann_auc(points), abs=1e-4)


@settings(max_examples=150, deadline=None)
@given(clouds)
def test_frontier_idempotent(points):
    f = an.pareto_frontier(points)
    assert an.pareto_frontier(f.points).points == f.points
    assert np.all(np.diff(f.accuracy) > 0) and np.all(np.diff(f.robustness) < 0)


def test_point_below_the_chord_lowers_auc():
    """With straight segments, a non-dominated point under the current curve adds a dent."""
    pts = [(0.75, 1.0), (1.0, 0.0)]
    assert an.auc(pts) == pytest.approx(0.875)
    assert an.auc(pts + [(0.875, 0.25)]) == pytest.approx(0.84375)


@settings(max_examples=300, deadline=None)
@given(clouds, st.tuples(coords, coords))
def test_auc_monotone_and_bounded(points, extra):
    """Adding a point on or above the current curve, or a dominated one, never lowers the AUC."""
    base = an.auc(points)
    f = an.pareto_frontier(points)
    a, r = f.accuracy, f.robustness
    curve = float(np.interp(extra[0], a, r, left=r[0])) if extra[0] <= a[-1] else 0.0
    dominated = any(p[0] >= extra[0] and p[1] >= extra[1] for p in points)
    if extra[1] >= curve:
        assert an.auc(points + [extra]) >= base - 1e-12
    elif dominated:
        assert an.auc(points + [extra]) == base
    acc = max(p[0] for p in points)
    rob = max(p[1] for p in points)
    assert -1e-12 <= base <= acc * rob + 1e-12


@settings(max_examples=100, deadline=None)
@given(clouds, st.floats(0.1, 10), st.floats(0.1, 10))
def test_auc_scale_equivariant(points, sa, sr):
    scaled = [(a * sa, r * sr) for a, r in points]
    assert an.auc(scaled) == pytest.approx(sa * sr * an.auc(points), rel=1e-9, abs=1e-12)


def test_relative_auc_sums_to_zero():
    rel = an.relative_auc({"a": 0.1, "b": 0.2, "c": 0.3})
    assert rel == pytest.approx({"a": -50.0, "b": 0.0, "c": 50.0})
    assert sum(rel.values()) == pytest.approx(0.0, abs=1e-9)


def test_table2_recomputation():
    rel = an.table2_relative()
    assert rel["C10"]["BitFit"] == pytest.approx(81.48, abs=0.01)
    assert rel["C100"]["BitFit"] == pytest.approx(75.0, abs=0.01)
    assert rel["Cal"]["Compacter"] == pytest.approx(23.96, abs=0.01)
    assert rel["Dogs"]["Compacter"] == pytest.approx(57.5, abs=0.01)
    assert rel["C100"]["FullFT"] == pytest.approx(-30.0, abs=0.01)
    matched = {(d.dataset, d.method) for d in an.table2_discrepancies() if d.matches}
    assert matched == {("CUB", "Compacter"), ("C100", "LP"), ("CUB", "LP"), ("CUB", "FullFT")}


def test_auc_table_csv_layout():
    text = an.auc_table_csv({"t1": {"LoRA": 0.1, "IA3": 0.3}, "t2": {"LoRA": 0.2}})
    lines = text.splitlines()
    assert lines[0] == "method,t1,t2,t1_rel_pct,t2_rel_pct"
    assert lines[1] == "LoRA,0.100000,0.200000,-50.00,"
    assert lines[2] == "IA3,0.300000,,50.00,"
    assert an.discrepancy_csv().splitlines()[0] == "dataset,method,stated_pct,recomputed_pct,matches"
