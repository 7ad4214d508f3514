"""Quality and cost of a shed run: false negatives, latency, overhead.

``FN%`` is the weighted share of missed ground-truth complex events,
``100 * sum(w * FN) / sum(w * |GT|)``.  Complex events are compared by
identity ``(query_id, window_id, seq_nos)``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .engine import ComplexEvent
from .shedding import PM_STRATEGIES

Key = tuple[str, int, tuple[int, ...]]


class FalsePositiveError(AssertionError):
    """A PM-dropping run produced a complex event the ground truth lacks."""


def _key(ce: ComplexEvent | Key) -> Key:
    return ce.key if isinstance(ce, ComplexEvent) else ce


@dataclass
class QueryFN:
    query_id: str
    weight: float
    gt: int
    fn: int
    fp: int = 0


@dataclass
class RunReport:
    strategy: str
    queries: dict[str, QueryFN]
    fn_weighted: float
    fn_pct: float
    match_probability: float | None = None
    latency: dict[str, float] = field(default_factory=dict)
    overhead: dict[str, float] = field(default_factory=dict)
    sheds: dict[str, float] = field(default_factory=dict)
    params: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["queries"] = {k: asdict(v) for k, v in self.queries.items()}
        return out


def diff(
    gt: Iterable[ComplexEvent | Key],
    shed: Iterable[ComplexEvent | Key],
    weights: Mapping[str, float],
    *,
    strategy: str = "none",
    check_fp: bool | None = None,
) -> RunReport:
    """Compare a shed run with the ground truth.

    False positives raise :class:`FalsePositiveError` for PM-dropping
    strategies (``check_fp`` overrides); the event-level baseline may
    legitimately produce them and only gets them counted.
    """
    gt_keys = {_key(c) for c in gt}
    shed_keys = {_key(c) for c in shed}
    if check_fp is None:
        check_fp = strategy in PM_STRATEGIES
    extra = shed_keys - gt_keys
    if check_fp and extra:
        sample = sorted(extra)[:3]
        raise FalsePositiveError(f"{len(extra)} complex events not in ground truth, e.g. {sample}")
    queries = {q: QueryFN(q, float(w), 0, 0) for q, w in weights.items()}
    for k in gt_keys:
        qf = queries.setdefault(k[0], QueryFN(k[0], float(weights.get(k[0], 1.0)), 0, 0))
        qf.gt += 1
        if k not in shed_keys:
            qf.fn += 1
    for k in extra:
        queries.setdefault(k[0], QueryFN(k[0], float(weights.get(k[0], 1.0)), 0, 0)).fp += 1
    fn_w = sum(q.weight * q.fn for q in queries.values())
    total_w = sum(q.weight * q.gt for q in queries.values())
    return RunReport(strategy, queries, fn_w, 100.0 * fn_w / total_w if total_w else 0.0)


def latency_summary(latencies_ns: Sequence[int] | np.ndarray, bound_ns: float) -> dict[str, float]:
    """p50/p99/max and the share of events with ``l_e > bound`` (``l_e == bound`` is fine)."""
    lat = np.asarray(latencies_ns, dtype=np.float64)
    if lat.size == 0:
        return {"count": 0, "p50": 0.0, "p99": 0.0, "max": 0.0, "mean": 0.0, "violations": 0, "violation_fraction": 0.0}
    viol = int(np.count_nonzero(lat > bound_ns))
    return {
        "count": int(lat.size),
        "p50": float(np.percentile(lat, 50)),
        "p99": float(np.percentile(lat, 99)),
        "max": float(lat.max()),
        "mean": float(lat.mean()),
        "violations": viol,
        "violation_fraction": viol / lat.size,
    }


def violation_trend(latencies_ns, bound_ns: float, buckets: int = 10) -> list[float]:
    """Violation fraction per consecutive slice of the run."""
    lat = np.asarray(latencies_ns)
    if lat.size == 0:
        return []
    return [float(np.mean(part > bound_ns)) for part in np.array_split(lat, min(buckets, lat.size))]


def overhead(busy_ns: int, shed_ns: int, model_seconds: Sequence[float] = ()) -> dict[str, float]:
    """``shed%`` is detection plus shedding time over total operator busy time."""
    return {
        "shed_pct": 100.0 * shed_ns / busy_ns if busy_ns else 0.0,
        "busy_s": busy_ns / 1e9,
        "shed_s": shed_ns / 1e9,
        "model_build_s": float(sum(model_seconds)),
    }


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        return math.nan, math.nan
    return float(arr.mean()), float(arr.std(ddof=1)) if arr.size > 1 else 0.0


def write_report(path: str | Path, reports: Sequence[RunReport | dict] | RunReport) -> None:
    if isinstance(reports, RunReport):
        reports = [reports]
    rows = [r.to_dict() if isinstance(r, RunReport) else r for r in reports]
    Path(path).write_text(json.dumps(rows, indent=2, default=float))


def read_report(path: str | Path) -> list[dict]:
    return json.loads(Path(path).read_text())


def write_plot_data(path: str | Path, rows: Iterable[Mapping[str, Any]], columns: Sequence[str] = ("x", "y", "series")) -> None:
    """Write ``(x, y, series, ...)`` rows as CSV for any plotting tool."""
    rows = list(rows)
    cols = list(columns)
    for r in rows:
        cols.extend(k for k in r if k not in cols)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow(r)
