import csv
import json

import pytest

from cepshed.engine import ComplexEvent
from cepshed.metrics import (
    FalsePositiveError,
    diff,
    latency_summary,
    mean_std,
    overhead,
    violation_trend,
    write_plot_data,
    write_report,
)


def ces(qid, n, start=0):
    return {ComplexEvent(qid, i, (i, i + 1)) for i in range(start, start + n)}


def test_identical_sets_have_no_fn():
    gt = ces("q", 5)
    r = diff(gt, set(gt), {"q": 1.0})
    assert r.fn_weighted == 0 and r.fn_pct == 0


def test_thirty_percent():
    gt = ces("q", 10)
    shed = set(sorted(gt, key=lambda c: c.window_id)[:7])
    assert diff(gt, shed, {"q": 1.0}).fn_pct == pytest.approx(30.0)


def test_weighted_sum():
    gt = ces("a", 4) | ces("b", 5)
    shed = ces("a", 3) | ces("b", 2)
    r = diff(gt, shed, {"a": 2.0, "b": 1.0})
    assert r.queries["a"].fn == 1 and r.queries["b"].fn == 3
    assert r.fn_weighted == 5


def test_weight_scaling_invariance():
    gt = ces("a", 4) | ces("b", 5)
    shed = ces("a", 1) | ces("b", 4)
    a = diff(gt, shed, {"a": 2.0, "b": 1.0}).fn_pct
    b = diff(gt, shed, {"a": 20.0, "b": 10.0}).fn_pct
    assert a == pytest.approx(b)


def test_false_positives():
    gt = ces("q", 3)
    extra = gt | ces("q", 1, start=10)
    with pytest.raises(FalsePositiveError):
        diff(gt, extra, {"q": 1.0}, strategy="pspice")
    r = diff(gt, extra, {"q": 1.0}, strategy="e_bl")
    assert r.queries["q"].fp == 1


def test_latency_bound_is_inclusive():
    s = latency_summary([1, 5, 10], 10)
    assert s["violations"] == 0 and s["max"] == 10
    s = latency_summary([1, 5, 11, 12], 10)
    assert s["violation_fraction"] == 0.5
    assert violation_trend([0] * 5 + [20] * 5, 10, 2) == [0.0, 1.0]


def test_overhead_and_stats():
    o = overhead(1000, 25, [0.5, 0.25])
    assert o["shed_pct"] == 2.5 and o["model_build_s"] == 0.75
    assert overhead(0, 0)["shed_pct"] == 0
    m, s = mean_std([1.0, 3.0])
    assert m == 2 and s == pytest.approx(2**0.5)


def test_writers(tmp_path):
    r = diff(ces("q", 2), ces("q", 1), {"q": 1.0})
    write_report(tmp_path / "r.json", r)
    assert json.loads((tmp_path / "r.json").read_text())[0]["fn_pct"] == 50
    write_plot_data(tmp_path / "p.csv", [{"x": 1, "y": 2, "series": "a", "yerr": 0.1}])
    rows = list(csv.DictReader(open(tmp_path / "p.csv")))
    assert rows == [{"x": "1", "y": "2", "series": "a", "yerr": "0.1"}]
