"""Three-phase experiment cells and sweeps.

Each cell runs on a fresh operator:

1. calibrate: push the stream back to back with shedding off, measure the
   maximum throughput and fit the latency model ``f``;
2. train: stream at ``train_rate_pct`` of that throughput until the model
   builder has ``eta`` observations per query;
3. overload: continue the same stream at the cell's rate with the strategy.

Ground truth is one unshed run over the whole stream.  FN counts only
complex events whose last contributing event arrived in the overload
phase (and was consumed before any time limit cut the run short).
"""

from __future__ import annotations

import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ..engine import GroundTruth, Operator, ground_truth
from ..events import Event, generate, ingest_csv, schedule
from ..latency import LatencyModel, fit_latency_models
from ..metrics import (
    RunReport,
    diff,
    latency_summary,
    mean_std,
    overhead,
    write_plot_data,
    write_report,
)
from ..model import ModelBuilder, UtilityTable
from ..patterns import QuerySpec, compile_query
from ..runtime import (
    Calibration,
    ModelNotReady,
    RunResult,
    Runtime,
    ShedRecord,
    SimClock,
    WallClock,
    measure_max_throughput,
)
from ..shedding import PSPICE, PSPICE_MM, ShedConfig
from ..windowing import TIME_BASED
from .config import ExperimentConfig

log = logging.getLogger(__name__)


# -- workload ----------------------------------------------------------------


def derive_rising(events: list[Event], price: str, symbol: str, attr: str = "rise") -> None:
    """Set ``attr`` to 1 when ``price`` rose since the previous event of the same ``symbol``."""
    last: dict[object, float] = {}
    for e in events:
        key = e.attributes.get(symbol, e.event_type)
        p = e.attributes[price]
        prev = last.get(key)
        e.attributes[attr] = 1 if prev is not None and p > prev else 0
        last[key] = p


def load_events(cfg: ExperimentConfig, seed: int = 0) -> list[Event]:
    if cfg.synthetic is not None:
        events = generate(cfg.synthetic_spec(seed))
    else:
        events = list(ingest_csv(cfg.dataset, cfg.schema_obj()))
    if cfg.derive_rising:
        derive_rising(events, **cfg.derive_rising)
    return events


def model_window_size(spec: QuerySpec, events: Sequence[Event]) -> int:
    """Expected events per window, the horizon of the utility tables."""
    w = spec.window
    if w.mode != TIME_BASED:
        return w.size
    if w.expected_size:
        return int(w.expected_size)
    span = events[-1].source_ts - events[0].source_ts if len(events) > 1 else 0
    if span <= 0:
        return max(1, len(events))
    return max(1, int(round(len(events) / span * w.size)))


def make_operator(cfg: ExperimentConfig, specs: Sequence[QuerySpec], observe_every: int) -> Operator:
    eval_ns = int(cfg.cost.get("eval_ns", 1_000))
    return Operator(specs, observe_every=observe_every, virtual=cfg.virtual, eval_ns=eval_ns)


def inject_processing_cost(
    op: Operator,
    query_id: str,
    multiplier: float,
    *,
    calibration_events: Sequence[Event] | None = None,
) -> int:
    """Make guard evaluations of ``query_id`` cost ``multiplier`` times as much.

    A virtual operator is charged ``(multiplier - 1) * eval_ns`` extra per
    evaluation.  A real one spins ``multiplier - 1`` times the measured
    duration of each evaluation.  Returns the injected nanoseconds per
    evaluation: exact when virtual, otherwise estimated on
    ``calibration_events`` (0 without them).
    """
    if multiplier < 1:
        raise ValueError("multiplier must be >= 1")
    qi = op.query_index(query_id)
    if op.virtual:
        extra = int(round((multiplier - 1) * op.queries[qi].unit_ns))
        op.inject_processing_cost(query_id, extra)
        return extra
    op.inject_processing_cost(query_id, scale=multiplier)
    if multiplier == 1 or not calibration_events:
        return 0
    return int(round((multiplier - 1) * _mean_eval_ns(op, qi, calibration_events)))


def apply_costs(cfg: ExperimentConfig, op: Operator) -> None:
    for qid, mult in cfg.cost_multipliers.items():
        inject_processing_cost(op, qid, mult)


def _mean_eval_ns(op: Operator, qi: int, events: Sequence[Event]) -> float:
    """Mean timed guard evaluation of query ``qi`` on a fresh, warmed-up operator."""
    specs = [q.spec for q in op.queries]
    probe = Operator(specs, observe_every=1)
    half = len(events) // 2
    for e in events[:half]:
        probe.process(e)
    probe.drain_observations()
    for e in events[half:]:
        probe.process(e)
    times = [t for q, _, _, t in probe.observations if q == qi]
    if not times:
        raise ValueError(f"query {specs[qi].query_id} made no guard evaluations on the calibration events")
    return float(np.mean(times))


@dataclass
class Prepared:
    """Everything shared by the cells of one (sweep point, stream seed)."""

    events: list[Event]
    specs: list[QuerySpec]
    weights: dict[str, float]
    gt: GroundTruth
    extra_ns: dict[str, int]
    calibration: Calibration
    latency: LatencyModel

    @property
    def throughput(self) -> float:
        return self.calibration.throughput_eps


def prepare(cfg: ExperimentConfig, stream_seed: int = 0) -> Prepared:
    """Generate or load the stream, compute ground truth and calibrate."""
    events = load_events(cfg, stream_seed)
    specs = cfg.query_specs()
    gt = ground_truth(events, specs)
    op = make_operator(cfg, specs, observe_every=0)
    probe = events[: min(len(events), 2_000)]
    extra = {
        qid: inject_processing_cost(op, qid, m, calibration_events=probe) for qid, m in cfg.cost_multipliers.items()
    }
    max_ws = max(model_window_size(s, events) for s in specs)
    warmup = cfg.calibration_warmup if cfg.calibration_warmup is not None else min(3 * max_ws, len(events) // 3)
    measure = min(cfg.calibration_events, len(events) - warmup)
    cal = measure_max_throughput(op, events, warmup=warmup, measure=measure, cost=cfg.cost_model())
    latency = fit_latency_models(cal.f_samples)
    log.info("calibrated %.0f events/s, mean %.0f PMs", cal.throughput_eps, cal.mean_n_pm)
    return Prepared(events, specs, {s.query_id: s.weight for s in specs}, gt, extra, cal, latency)


# -- one cell ----------------------------------------------------------------


@dataclass
class CellResult:
    report: RunReport
    run: RunResult | None = None
    builder: ModelBuilder | None = None
    train: RunResult | None = None

    @property
    def shed_log(self) -> list[ShedRecord]:
        return self.run.shed_log if self.run is not None else []


def new_builder(cfg: ExperimentConfig, prep: Prepared) -> ModelBuilder:
    return ModelBuilder(
        [compile_query(s).m for s in prep.specs],
        [s.query_id for s in prep.specs],
        [s.weight for s in prep.specs],
        [model_window_size(s, prep.events) for s in prep.specs],
        bs=cfg.bin_size,
        eta=cfg.eta,
        theta=cfg.drift_threshold,
    )


def train(cfg: ExperimentConfig, prep: Prepared, op: Operator, builder: ModelBuilder, clock, cost) -> RunResult:
    """Phase 2: sub-capacity streaming until every query's model is built."""
    n = cfg.train_events if cfg.train_events is not None else len(prep.events) // 2
    rate = prep.throughput * cfg.train_rate_pct / 100.0
    rt = Runtime(op, builder=builder, clock=clock, cost=cost, drift=False)
    return rt.run(schedule(prep.events[:n], rate, clock.now()), stop_when_ready=True, max_seconds=cfg.max_seconds)


def run_cell(
    cfg: ExperimentConfig,
    prep: Prepared,
    strategy: str,
    rate_pct: float,
    seed: int = 0,
    *,
    tables: Sequence[UtilityTable | None] | None = None,
    replay_log: Sequence[ShedRecord] | None = None,
    point: float | None = None,
) -> CellResult:
    """Train (unless ``tables`` are given) and run one overload phase."""
    clock = SimClock() if cfg.virtual else WallClock()
    cost = cfg.cost_model()
    op = make_operator(cfg, prep.specs, observe_every=1 if tables is None else cfg.observe_during_overload)
    apply_costs(cfg, op)
    builder = new_builder(cfg, prep)
    tr = None
    start = 0
    if tables is None:
        tr = train(cfg, prep, op, builder, clock, cost)
        start = tr.consumed
        if not builder.ready and strategy in (PSPICE, PSPICE_MM):
            seen = ", ".join(f"{q}: {st.seen}/{eta}" for q, st, eta in zip(builder.query_ids, builder.stats, builder.eta))
            raise ModelNotReady(
                f"model not trained after {start} events ({seen} observations); "
                "lower eta or lengthen the training phase"
            )
    op.observe_every = cfg.observe_during_overload
    stop = len(prep.events) if cfg.overload_events is None else min(len(prep.events), start + cfg.overload_events)
    rest = prep.events[start:stop]
    if not rest:
        raise ValueError("no events left for the overload phase")
    shed_cfg = ShedConfig.from_ms(cfg.latency_bound_ms, cfg.safety_buffer_pct, strategy)
    rt = Runtime(
        op,
        strategy=strategy,
        cfg=shed_cfg,
        latency=prep.latency,
        builder=builder,
        tables=tables,
        clock=clock,
        cost=cost,
        seed=seed,
        refit_every=cfg.refit_every,
        drift=cfg.drift,
        e_bl_rule=cfg.e_bl_rule,
    )
    res = rt.run(
        schedule(rest, prep.throughput * rate_pct / 100.0, clock.now()),
        max_seconds=cfg.max_seconds,
        replay_log=replay_log,
    )
    first = rest[0].seq_no
    last = rest[res.consumed - 1].seq_no if res.consumed else first - 1
    expected = [c for c in prep.gt.complex_events if first <= max(c.seq_nos) <= last]
    report = diff(expected, res.complex_events, prep.weights, strategy=strategy)
    report.match_probability = prep.gt.match_probability
    report.latency = latency_summary(res.latencies, shed_cfg.latency_bound)
    report.overhead = overhead(res.busy_ns, res.shed_ns, builder.build_seconds)
    report.sheds = {
        "count": len(res.shed_log),
        "dropped_pms": res.dropped_pms,
        "dropped_events": res.dropped_events,
        "retrains": int(sum(builder.retrains)),
    }
    report.params = {
        "point": point,
        "rate_pct": rate_pct,
        "seed": seed,
        "clock": cfg.clock,
        "throughput_eps": prep.throughput,
        "train_events": start,
        "overload_events": res.consumed,
        "truncated": res.truncated,
        "expected_complex_events": len(expected),
    }
    return CellResult(report, res, builder, tr)


# -- sweeps ------------------------------------------------------------------


def _failed(strategy: str, msg: str, **params) -> RunReport:
    return RunReport(strategy, {}, math.nan, math.nan, params={**params, "error": msg})


def run_experiment(
    cfg: ExperimentConfig,
    out_dir: str | Path | None = None,
    *,
    progress: Callable[[RunReport], None] | None = None,
) -> list[RunReport]:
    """Run every (sweep point, seed, rate, strategy) cell."""
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "shed_logs").mkdir(parents=True, exist_ok=True)
    reports: list[RunReport] = []
    for point, pcfg in cfg.points():
        cache: dict[int, Prepared] = {}
        for seed in cfg.run_seeds():
            stream_seed = seed if cfg.vary_stream else 0
            if stream_seed not in cache:
                cache[stream_seed] = prepare(pcfg, stream_seed)
            prep = cache[stream_seed]
            for rate in pcfg.rates:
                for strategy in pcfg.strategies:
                    try:
                        cell = run_cell(pcfg, prep, strategy, rate, seed, point=point)
                    except ModelNotReady as exc:
                        log.error("cell %s/%s/%s/%s aborted: %s", point, rate, strategy, seed, exc)
                        reports.append(_failed(strategy, str(exc), point=point, rate_pct=rate, seed=seed))
                        continue
                    reports.append(cell.report)
                    if out is not None:
                        name = f"{point}_{rate:g}_{strategy}_{seed}.json"
                        (out / "shed_logs" / name).write_text(json.dumps([r.to_dict() for r in cell.shed_log]))
                    if progress is not None:
                        progress(cell.report)
    if out is not None:
        write_outputs(out, reports, cfg)
    return reports


def summarize(reports: Sequence[RunReport | dict]) -> list[dict]:
    """Mean and standard deviation across seeds per (point, rate, strategy)."""
    groups: dict[tuple, list[dict]] = defaultdict(list)
    for r in reports:
        d = r.to_dict() if isinstance(r, RunReport) else r
        p = d["params"]
        groups[(p.get("point"), p.get("rate_pct"), d["strategy"])].append(d)
    rows = []
    for (point, rate, strategy), ds in groups.items():
        ok = [d for d in ds if not d["params"].get("error")]
        fn_m, fn_s = mean_std([d["fn_pct"] for d in ok])
        sh_m, sh_s = mean_std([d["overhead"]["shed_pct"] for d in ok])
        vi_m, _ = mean_std([d["latency"]["violation_fraction"] for d in ok])
        mp = [d["match_probability"] for d in ok if d.get("match_probability") is not None]
        rows.append(
            {
                "point": point,
                "rate_pct": rate,
                "strategy": strategy,
                "runs": len(ok),
                "failed": len(ds) - len(ok),
                "match_probability": float(np.mean(mp)) if mp else math.nan,
                "fn_pct_mean": fn_m,
                "fn_pct_std": fn_s,
                "shed_pct_mean": sh_m,
                "shed_pct_std": sh_s,
                "violation_fraction_mean": vi_m,
            }
        )
    return rows


def plot_rows(rows: Sequence[dict], axis: str | None) -> list[dict]:
    x_key = "rate_pct" if axis in (None, "rate") else "point"
    return [
        {"x": r[x_key], "y": r["fn_pct_mean"], "series": r["strategy"], "yerr": r["fn_pct_std"]}
        for r in sorted(rows, key=lambda r: (r["strategy"], r[x_key] if r[x_key] is not None else 0))
    ]


def write_outputs(out: Path, reports: Sequence[RunReport | dict], cfg: ExperimentConfig | None = None) -> list[dict]:
    write_report(out / "reports.json", reports)
    rows = summarize(reports)
    write_plot_data(out / "summary.csv", rows, columns=list(rows[0]) if rows else ["point"])
    if cfg is not None:
        axis = cfg.sweep.axis if cfg.sweep is not None else None
    else:
        axis = None if all(r["point"] is None for r in rows) else "point"
    write_plot_data(out / "plot_data.csv", plot_rows(rows, axis), columns=("x", "y", "series", "yerr"))
    return rows


def format_table(rows: Sequence[dict]) -> str:
    head = f"{'point':>8} {'rate%':>6} {'strategy':>9} {'runs':>4} {'mp':>6} {'FN% mean':>9} {'std':>6} {'shed%':>7} {'viol':>6}"
    lines = [head]
    for r in sorted(rows, key=lambda r: (str(r["point"]), r["rate_pct"] or 0, r["strategy"])):
        lines.append(
            f"{str(r['point']):>8} {r['rate_pct'] or 0:>6g} {r['strategy']:>9} {r['runs']:>4} "
            f"{r['match_probability']:>6.3f} {r['fn_pct_mean']:>9.2f} {r['fn_pct_std']:>6.2f} "
            f"{r['shed_pct_mean']:>7.2f} {r['violation_fraction_mean']:>6.3f}"
        )
    return "\n".join(lines)
