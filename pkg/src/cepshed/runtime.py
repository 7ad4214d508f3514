"""The operator loop: input queue, overload detection, shedding, processing.

Events arrive pre-stamped with their enqueue instant (see
:func:`cepshed.events.schedule`).  The loop takes the head of the queue,
waits for it if it has not arrived yet, runs the detector and the chosen
strategy, processes the event and records its latency
``l_e = completion - arrival``.

Two clocks are supported.  :class:`WallClock` measures real time and the
operator does real (optionally busy-spun) work.  :class:`SimClock` is a
discrete-event simulation: processing an event costs
``CostModel.event_ns`` plus the operator's virtual per-evaluation cost, so
latencies, shed decisions and therefore false negatives are reproducible
bit for bit.  Either way the real time spent detecting and shedding is
measured for overhead reporting.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .engine import ComplexEvent, Operator
from .events import Event, wait_until
from .latency import InsufficientSamples, LatencyModel, fit_latency_models
from .model import ModelBuilder, UtilityTable
from .shedding import (
    E_BL,
    NONE,
    PM_BL,
    PSPICE,
    PSPICE_MM,
    ShedConfig,
    TypeUtility,
    detect_overload,
    e_bl_budget,
    normalize_strategy,
    shed_e_bl,
    shed_pm_bl,
    shed_pspice,
    shed_pspice_minus_minus,
)

log = logging.getLogger(__name__)

SAMPLE_EVERY = 100


class ModelNotReady(RuntimeError):
    pass


class WallClock:
    virtual = False

    def now(self) -> int:
        return time.perf_counter_ns()

    def advance(self, ns: int) -> None:
        pass

    def wait_until(self, t: int) -> None:
        wait_until(t)


class SimClock:
    virtual = True

    def __init__(self, start: int = 0):
        self.t = start

    def now(self) -> int:
        return self.t

    def advance(self, ns: float) -> None:
        self.t += int(ns)

    def wait_until(self, t: int) -> None:
        if t > self.t:
            self.t = t


@dataclass
class CostModel:
    """Virtual costs in nanoseconds (simulated clock only)."""

    event_ns: int = 20_000
    eval_ns: int = 1_000
    detect_ns: int = 200
    shed_pm_ns: int = 20
    shed_event_ns: int = 100


@dataclass
class ShedRecord:
    ts_ns: int
    event_index: int
    seq_no: int
    rho: int
    dropped: int
    n_before: int
    n_after: int
    l_q: int
    f: float
    g: float
    # event-level baseline only: drop budget and end of the queued range
    budget: int = 0
    queue_end: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunResult:
    complex_events: list[ComplexEvent] = field(default_factory=list)
    seq_nos: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))
    latencies: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))
    queue_lengths: list[tuple[int, int]] = field(default_factory=list)
    shed_log: list[ShedRecord] = field(default_factory=list)
    consumed: int = 0
    processed: int = 0
    dropped_events: int = 0
    dropped_pms: int = 0
    busy_ns: int = 0
    shed_ns: int = 0
    start_ns: int = 0
    end_ns: int = 0
    truncated: bool = False


class Runtime:
    """Runs event batches through an operator with one shedding strategy.

    ``tables`` fixes the utility tables; otherwise the builder's latest
    published snapshot is read on every shed.  Latency samples
    ``(n_pm, l_p)`` are taken every ``sample_every`` events and
    ``(n_pm, l_s)`` on every shed; with ``refit_every`` the latency model
    is refitted whenever that many new processing samples have arrived.
    """

    def __init__(
        self,
        op: Operator,
        *,
        strategy: str = NONE,
        cfg: ShedConfig | None = None,
        latency: LatencyModel | None = None,
        builder: ModelBuilder | None = None,
        tables: Sequence[UtilityTable | None] | None = None,
        clock: WallClock | SimClock | None = None,
        cost: CostModel | None = None,
        seed: int = 0,
        sample_every: int = SAMPLE_EVERY,
        ingest_every: int = 64,
        drift: bool = True,
        refit_every: int = 0,
        type_utility: TypeUtility | None = None,
        e_bl_rule: str = "excess",
    ):
        self.op = op
        self.strategy = normalize_strategy(strategy)
        self.cfg = cfg
        self.latency = latency
        self.builder = builder
        self.fixed_tables = tables
        self.clock = clock if clock is not None else (SimClock() if op.virtual else WallClock())
        if self.clock.virtual != op.virtual:
            raise ValueError("simulated clock needs a virtual operator and vice versa")
        self.cost = cost if cost is not None else CostModel()
        self.rng = np.random.default_rng(seed)
        self.sample_every = sample_every
        self.ingest_every = ingest_every
        self.drift = drift
        self.refit_every = refit_every
        self._fitted_at = 0
        self.f_samples: list[tuple[int, float]] = []
        self.g_samples: list[tuple[int, float]] = []
        if self.strategy == E_BL and type_utility is None:
            type_utility = TypeUtility.from_specs([q.spec for q in op.queries])
        self.type_utility = type_utility
        self.e_bl_rule = e_bl_rule

    # -- helpers -------------------------------------------------------------

    @property
    def tables(self) -> Sequence[UtilityTable | None] | None:
        if self.fixed_tables is not None:
            return self.fixed_tables
        return self.builder.tables if self.builder is not None else None

    def _check_ready(self) -> None:
        if self.strategy in (PSPICE, PSPICE_MM):
            tables = self.tables
            if tables is None or any(t is None for t in tables):
                raise ModelNotReady(
                    f"strategy {self.strategy} needs a trained model for every query; "
                    "run the training phase first or load a model dump"
                )

    def _feed_builder(self) -> None:
        b = self.builder
        if b is None:
            return
        b.ingest(self.op.drain_observations())
        if not b.ready:
            if all(st.seen >= eta for st, eta in zip(b.stats, b.eta)):
                b.build()
        elif self.drift:
            b.check_drift()

    def _maybe_refit(self) -> None:
        if not self.refit_every or len(self.f_samples) - self._fitted_at < self.refit_every:
            return
        try:
            self.latency = fit_latency_models(self.f_samples, self.g_samples)
            self._fitted_at = len(self.f_samples)
        except InsufficientSamples:
            pass

    def _shed(self, rho, i, events, dropped, now_key, budget=0, queue_end=0) -> tuple[int, int, float]:
        """Apply the strategy; returns ``(dropped PMs, dropped events, virtual cost)``."""
        op = self.op
        n = op.n_pm
        if self.strategy == PSPICE:
            ids = shed_pspice(rho, op, self.tables, now_key)
            return len(ids), 0, self.cost.shed_pm_ns * n
        if self.strategy == PSPICE_MM:
            ids = shed_pspice_minus_minus(rho, op, self.tables, now_key)
            return len(ids), 0, self.cost.shed_pm_ns * n
        if self.strategy == PM_BL:
            ids = shed_pm_bl(rho, op, self.rng)
            return len(ids), 0, self.cost.shed_pm_ns * len(ids)
        if self.strategy == E_BL:
            hi = max(queue_end, i + 1)
            cand = np.arange(i + 1, hi)[~dropped[i + 1 : hi]]
            picked = shed_e_bl(
                budget, cand, [events[k].event_type for k in cand], self.type_utility.table(), self.rng
            )
            dropped[picked] = True
            return 0, len(picked), self.cost.shed_event_ns * len(cand)
        return 0, 0, 0.0

    # -- main loop -----------------------------------------------------------

    def run(
        self,
        events: Sequence[Event],
        *,
        max_seconds: float | None = None,
        stop_when_ready: bool = False,
        replay_log: Sequence[ShedRecord] | None = None,
        queue_every: int = 0,
    ) -> RunResult:
        """Consume ``events`` (stamped with arrival instants) in order.

        With ``replay_log`` the detector is bypassed and the recorded drop
        counts are applied at the recorded event indices.  ``stop_when_ready``
        ends the run as soon as the builder has published a full model.
        """
        op, clock, cost = self.op, self.clock, self.cost
        has_model = self.cfg is not None and self.latency is not None
        shedding = self.strategy != NONE and (has_model or replay_log is not None)
        detecting = has_model and replay_log is None
        if shedding:
            self._check_ready()
        replay = {r.event_index: r for r in replay_log} if replay_log is not None else None
        n = len(events)
        arrivals = np.fromiter((e.arrival_ts for e in events), np.int64, n)
        dropped = np.zeros(n, bool)
        res = RunResult(start_ns=clock.now())
        seqs = np.empty(n, np.int64)
        lat = np.empty(n, np.int64)
        k = 0
        perf = time.perf_counter_ns
        virtual = clock.virtual
        deadline = None if max_seconds is None else perf() + int(max_seconds * 1e9)
        observe_every = op.observe_every
        type_util = self.type_utility
        i = 0
        for i in range(n):
            e = events[i]
            if type_util is not None:
                type_util.observe(e.event_type)
            if dropped[i]:
                op.skip(e)
                continue
            clock.wait_until(e.arrival_ts)
            t0 = perf()
            now = clock.now()
            l_q = now - e.arrival_ts
            if queue_every and i % queue_every == 0:
                res.queue_lengths.append((i, int(np.searchsorted(arrivals, now, side="right")) - i))
            if detecting or replay is not None:
                charge = cost.detect_ns
                budget = queue_end = 0
                if replay is not None:
                    rec = replay.get(i)
                    dec = None
                    rho = rec.rho if rec is not None else 0
                    if rec is not None:
                        budget, queue_end = rec.budget, rec.queue_end
                else:
                    dec = detect_overload(l_q, op.n_pm, self.latency, self.cfg)
                    rho = dec.rho if shedding else 0
                    if rho > 0 and self.strategy == E_BL:
                        budget = e_bl_budget(
                            dec, rule=self.e_bl_rule, mean_pm_lifetime=op.mean_pm_lifetime(), n_pm=op.n_pm
                        )
                        queue_end = int(np.searchsorted(arrivals, now, side="right"))
                if rho > 0:
                    n_before = op.n_pm
                    ts = perf()
                    d_pm, d_ev, v = self._shed(rho, i, events, dropped, (e.seq_no, e.source_ts), budget, queue_end)
                    g_real = perf() - ts
                    self.g_samples.append((n_before, v if virtual else g_real))
                    charge += v
                    res.dropped_pms += d_pm
                    res.dropped_events += d_ev
                    res.shed_log.append(
                        ShedRecord(
                            now, i, e.seq_no, rho, d_pm + d_ev, n_before, op.n_pm, l_q,
                            dec.l_p if dec else 0.0, dec.l_s if dec else 0.0, budget, queue_end,
                        )
                    )
                if virtual:
                    clock.advance(charge)
            t1 = perf()
            n_proc = op.n_pm
            c0 = op.cost_ns() if virtual else 0
            res.complex_events.extend(op.process(e))
            t2 = perf()
            if virtual:
                l_p = cost.event_ns + op.cost_ns() - c0
                clock.advance(l_p)
            else:
                l_p = t2 - t1
            res.shed_ns += t1 - t0
            res.busy_ns += t2 - t0
            seqs[k] = e.seq_no
            lat[k] = clock.now() - e.arrival_ts
            k += 1
            if i % self.sample_every == 0 and not (observe_every and e.seq_no % observe_every == 0):
                self.f_samples.append((n_proc, l_p))
                self._maybe_refit()
            if self.builder is not None and i % self.ingest_every == 0:
                self._feed_builder()
                if stop_when_ready and self.builder.ready:
                    break
            if deadline is not None and perf() > deadline:
                res.truncated = True
                break
        else:
            i = n - 1 if n else -1
        if self.builder is not None:
            self._feed_builder()
        res.consumed = i + 1
        res.processed = k
        res.seq_nos = seqs[:k]
        res.latencies = lat[:k]
        res.end_ns = clock.now()
        return res


# -- calibration -------------------------------------------------------------


class WorkloadTooShort(ValueError):
    pass


@dataclass
class Calibration:
    throughput_eps: float
    f_samples: list[tuple[int, float]]
    mean_n_pm: float


def measure_max_throughput(
    op: Operator,
    events: Sequence[Event],
    *,
    warmup: int,
    measure: int,
    cost: CostModel | None = None,
    sample_every: int = 10,
) -> Calibration:
    """Push events back to back with shedding off and time the steady state.

    All events are queued at the start, so the operator never idles; the
    throughput is ``measure`` events over the time between the completion
    of event ``warmup`` and event ``warmup + measure``.  Processing samples
    for the latency model are collected on the way.
    """
    if measure <= 0 or len(events) < warmup + measure:
        raise WorkloadTooShort(f"need {warmup + measure} events for calibration, got {len(events)}")
    clock = SimClock() if op.virtual else WallClock()
    start = clock.now()
    batch = [e.stamped(start) for e in events[: warmup + measure]]
    rt = Runtime(op, clock=clock, cost=cost, sample_every=sample_every)
    res = rt.run(batch)
    done = res.latencies + start
    span = done[warmup + measure - 1] - done[warmup - 1] if warmup > 0 else done[measure - 1] - start
    n_pm = [s[0] for s in rt.f_samples[len(rt.f_samples) * warmup // (warmup + measure) :]]
    return Calibration(measure / (span / 1e9), rt.f_samples, float(np.mean(n_pm)) if n_pm else 0.0)
