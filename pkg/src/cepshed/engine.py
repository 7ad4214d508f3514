"""The CEP operator: per-window partial matches, complex events, observations.

Every query owns a :class:`WindowManager`.  An event is routed through each
query's windows; inside every member window each live partial match (PM)
evaluates the guard of the step(s) it awaits.  The operator reports each
PM/event evaluation as an observation ``(query, from_state, to_state,
t_ns)`` for the model builder.

Live PMs are mirrored into numpy columns (:class:`PMTable`) so that the
load shedder can score and rank all of them without a Python-level loop.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

from .events import Event
from .patterns import SKIP_TILL_ANY, PatternStateMachine, QuerySpec, compile_query
from .windowing import Window, WindowManager


class UnknownPartialMatch(KeyError):
    """``remove_pm`` was asked for a PM that is not live."""


class Observation(NamedTuple):
    query: int
    from_state: int
    to_state: int
    t_ns: int


@dataclass(frozen=True)
class ComplexEvent:
    query_id: str
    window_id: int
    seq_nos: tuple[int, ...]
    detected_ns: int = field(default=0, compare=False, hash=False)

    @property
    def key(self) -> tuple[str, int, tuple[int, ...]]:
        return (self.query_id, self.window_id, self.seq_nos)


class PartialMatch:
    __slots__ = ("pm_id", "query", "window", "state", "bound", "created_at", "slot", "born")

    def __init__(self, pm_id, query, window, state, bound, created_at):
        self.pm_id = pm_id
        self.query = query
        self.window = window
        self.state = state
        self.bound = bound
        self.created_at = created_at
        self.slot = -1
        # window position at creation, for lifetime accounting
        self.born = window.consumed

    def __repr__(self) -> str:
        return f"PartialMatch(id={self.pm_id}, q={self.query}, w={self.window.window_id}, s={self.state})"


class PMTable:
    """Column store of live PMs, indexed by a recycled slot number."""

    def __init__(self, capacity: int = 4096):
        self.query = np.zeros(capacity, np.int32)
        self.state = np.zeros(capacity, np.int32)
        self.window = np.zeros(capacity, np.int32)
        self.created = np.zeros(capacity, np.int64)
        self.pm_id = np.zeros(capacity, np.int64)
        self.alive = np.zeros(capacity, bool)
        self.refs: list[PartialMatch | None] = [None] * capacity
        self._free: list[int] = []
        self._hi = 0
        self.count = 0

    def _grow(self) -> None:
        cap = len(self.alive) * 2
        for name in ("query", "state", "window", "created", "pm_id", "alive"):
            old = getattr(self, name)
            new = np.zeros(cap, old.dtype)
            new[: len(old)] = old
            setattr(self, name, new)
        self.refs.extend([None] * (cap - len(self.refs)))

    def add(self, pm: PartialMatch) -> None:
        if self._free:
            slot = self._free.pop()
        else:
            if self._hi == len(self.alive):
                self._grow()
            slot = self._hi
            self._hi += 1
        pm.slot = slot
        self.query[slot] = pm.query
        self.state[slot] = pm.state
        self.window[slot] = pm.window.slot
        self.created[slot] = pm.created_at
        self.pm_id[slot] = pm.pm_id
        self.alive[slot] = True
        self.refs[slot] = pm
        self.count += 1

    def discard(self, slot: int) -> None:
        self.alive[slot] = False
        self.refs[slot] = None
        self._free.append(slot)
        self.count -= 1

    def live_slots(self) -> np.ndarray:
        return np.flatnonzero(self.alive[: self._hi])


class _WindowSlots:
    """Recycled slots holding each open window's remaining-event count."""

    def __init__(self, capacity: int = 256):
        self.remaining = np.zeros(capacity, np.float64)
        self._free: list[int] = []
        self._hi = 0

    def acquire(self) -> int:
        if self._free:
            return self._free.pop()
        if self._hi == len(self.remaining):
            grown = np.zeros(len(self.remaining) * 2, np.float64)
            grown[: self._hi] = self.remaining
            self.remaining = grown
        self._hi += 1
        return self._hi - 1

    def release(self, slot: int) -> None:
        self._free.append(slot)


def _spin(ns: int, clock=time.perf_counter_ns) -> None:
    end = clock() + ns
    while clock() < end:
        pass


def _pad(q: "CompiledQuery", elapsed: int, t0: int) -> int:
    """Spin the injected cost for one evaluation that took ``elapsed``; return the padded time."""
    extra = q.extra_ns + int((q.scale - 1.0) * elapsed)
    if extra > 0:
        _spin(extra)
        return time.perf_counter_ns() - t0
    return elapsed


class CompiledQuery:
    def __init__(self, index: int, spec: QuerySpec, ids: Iterable[int]):
        self.index = index
        self.spec = spec
        self.query_id = spec.query_id
        self.weight = spec.weight
        self.machine: PatternStateMachine = compile_query(spec)
        self.windows = WindowManager(spec.window, iter(ids))
        self.fork = spec.selection == SKIP_TILL_ANY
        self.cap = spec.max_pms_per_window
        # processing-cost injection: a fixed extra per guard evaluation, and
        # on a real clock a spin of (scale - 1) times each evaluation's own time
        self.extra_ns = 0
        self.scale = 1.0
        # guard evaluations so far; virtual timing charges _unit(q) each
        self.evals = 0
        self.unit_ns = 0
        m = self.machine
        self.first = m.awaits[0]
        self.single = [len(a) == 1 and a[0] < m.prefix_len for a in m.awaits]


class Operator:
    """Single-threaded pattern matcher over a set of queries.

    ``observe_every`` controls observation sampling: observations (with
    timed guard evaluations) are produced for every ``observe_every``-th
    event; 0 disables them.

    With ``virtual=True`` nothing is timed or spun.  Every guard evaluation
    of query ``q`` costs ``scale * eval_ns + extra_ns`` and :meth:`cost_ns`
    returns the running total, which a simulated clock can charge.
    """

    def __init__(
        self,
        queries: Sequence[QuerySpec],
        *,
        clock: Callable[[], int] = time.perf_counter_ns,
        observe_every: int = 1,
        obs_capacity: int = 2_000_000,
        virtual: bool = False,
        eval_ns: int = 1_000,
    ):
        if not queries:
            raise ValueError("operator needs at least one query")
        ids = itertools.count()
        self.queries = [CompiledQuery(i, q, ids) for i, q in enumerate(queries)]
        self.virtual = virtual
        for q in self.queries:
            q.unit_ns = eval_ns
        self.clock = clock
        self.observe_every = observe_every
        self.obs_capacity = obs_capacity
        self.observations: list[tuple[int, int, int, int]] = []
        self.obs_dropped = 0
        self.pms: dict[int, PartialMatch] = {}
        self.table = PMTable()
        self.wslots = _WindowSlots()
        self._pm_ids = itertools.count()
        self.pms_created = 0
        self.pms_created_per_query = [0] * len(self.queries)
        self.events_processed = 0
        self.type_counts: dict[str, int] = {}
        # lifetimes (events processed) of PMs that ended by completion or window close
        self.pm_events_total = 0
        self.pm_ended = 0

    # -- public surface ------------------------------------------------------

    @property
    def n_pm(self) -> int:
        return len(self.pms)

    def query_index(self, query_id: str) -> int:
        for q in self.queries:
            if q.query_id == query_id:
                return q.index
        raise KeyError(query_id)

    def inject_processing_cost(self, query_id: str, extra_ns: int = 0, *, scale: float = 1.0) -> None:
        """Make each guard evaluation of ``query_id`` cost more.

        ``extra_ns`` is added to every evaluation.  ``scale`` multiplies it:
        virtually by charging ``scale * eval_ns``, on a real clock by spinning
        ``scale - 1`` times the evaluation's measured duration, which keeps
        the ratio stable when the machine speeds up or slows down.
        """
        if scale < 1:
            raise ValueError("scale must be >= 1")
        q = self.queries[self.query_index(query_id)]
        q.extra_ns = max(0, int(extra_ns))
        q.scale = float(scale)

    def _unit(self, q: CompiledQuery) -> int:
        return int(q.unit_ns * q.scale) + q.extra_ns

    def cost_ns(self) -> int:
        """Total virtual cost of all guard evaluations so far."""
        return sum(q.evals * self._unit(q) for q in self.queries)

    def remove_pm(self, pm_id: int) -> None:
        try:
            pm = self.pms.pop(pm_id)
        except KeyError:
            raise UnknownPartialMatch(pm_id) from None
        del pm.window.pms[pm_id]
        self.table.discard(pm.slot)

    def drain_observations(self) -> list[tuple[int, int, int, int]]:
        out, self.observations = self.observations, []
        return out

    def refresh_remaining(self, now: tuple[int, int] | None = None) -> np.ndarray:
        """Write every open window's remaining-event count into the slot array."""
        rem = self.wslots.remaining
        for q in self.queries:
            wm = q.windows
            for w in wm._open:
                rem[w.slot] = wm.remaining(w, now)
        return rem

    def mean_pm_lifetime(self) -> float:
        """Mean number of events a PM processed before it ended."""
        if self.pm_ended == 0:
            return 1.0
        return self.pm_events_total / self.pm_ended

    # -- processing ----------------------------------------------------------

    def process(self, event: Event) -> list[ComplexEvent]:
        """Process one event in every window of every query; return detections."""
        self.events_processed += 1
        et = event.event_type
        self.type_counts[et] = self.type_counts.get(et, 0) + 1
        observe = self.observe_every > 0 and event.seq_no % self.observe_every == 0
        now = self.clock()
        out: list[ComplexEvent] = []
        for q in self.queries:
            members, opened, closed = q.windows.route(event)
            for w in opened:
                w.slot = self.wslots.acquire()
            if members:
                q.evals += 1
                t0 = time.perf_counter_ns()
                starters = self._first_steps(q, event)
                if self.virtual:
                    t_first = self._unit(q)
                else:
                    t_first = _pad(q, time.perf_counter_ns() - t0, t0)
                for w in members:
                    if w.pms:
                        if observe:
                            self._advance_observed(q, w, event, out, now)
                        else:
                            self._advance(q, w, event, out, now)
                    if starters:
                        self._open_pms(q, w, event, starters, observe, out, now, t_first)
            for w in closed:
                self._close_window(w)
        return out

    def skip(self, event: Event) -> None:
        """Let a dropped event pass window boundaries without touching any PM."""
        self.events_processed += 1
        for q in self.queries:
            _, opened, closed = q.windows.route(event)
            for w in opened:
                w.slot = self.wslots.acquire()
            for w in closed:
                self._close_window(w)

    def _first_steps(self, q: CompiledQuery, event: Event) -> list[int]:
        steps = q.machine.steps
        empty: dict = {}
        hits = [i for i in q.first if steps[i].accepts(event, empty)]
        if hits and not q.fork:
            return hits[:1]
        return hits

    def _new_pm(self, q, w, state, bound, now) -> PartialMatch | None:
        if q.cap is not None and len(w.pms) >= q.cap:
            return None
        pm = PartialMatch(next(self._pm_ids), q.index, w, state, bound, now)
        self.pms[pm.pm_id] = pm
        w.pms[pm.pm_id] = pm
        self.table.add(pm)
        self.pms_created += 1
        self.pms_created_per_query[q.index] += 1
        return pm

    def _open_pms(self, q, w, event, starters, observe, out, now, t_first=0) -> None:
        for step in starters:
            pm = self._new_pm(q, w, 1, {step: event}, now)
            if pm is None:
                continue
            if observe:
                self._record(q.index, 0, 1, t_first)
            if q.machine.m == 2:
                self._complete(q, pm, out, now)

    def _record(self, qi, s, s2, t) -> None:
        if len(self.observations) < self.obs_capacity:
            self.observations.append((qi, s, s2, t))
        else:
            self.obs_dropped += 1

    def _candidates(self, q: CompiledQuery, pm: PartialMatch, event: Event) -> list[int]:
        steps = q.machine.steps
        bound = pm.bound
        hits = []
        for i in q.machine.awaits[pm.state]:
            if i not in bound and steps[i].accepts(event, bound):
                hits.append(i)
                if not q.fork:
                    break
        return hits

    def _advance(self, q, w, event, out, now) -> None:
        steps = q.machine.steps
        single = q.single
        q.evals += len(w.pms)
        pad = not self.virtual and (q.extra_ns or q.scale > 1.0)
        clock = time.perf_counter_ns
        for pm in list(w.pms.values()):
            k = pm.state
            if pad:
                t0 = clock()
            if single[k]:
                step = steps[k]
                ok = (step.event_type is None or step.event_type == event.event_type) and (
                    step.guard is None or step.guard(event, pm.bound)
                )
                if pad:
                    _pad(q, clock() - t0, t0)
                if ok:
                    self._step(q, pm, (k,), event, out, now)
            else:
                hits = self._candidates(q, pm, event)
                if pad:
                    _pad(q, clock() - t0, t0)
                if hits:
                    self._step(q, pm, hits, event, out, now)

    def _advance_observed(self, q, w, event, out, now) -> None:
        clock = time.perf_counter_ns
        qi = q.index
        q.evals += len(w.pms)
        virtual = self.virtual
        fixed = self._unit(q)
        for pm in list(w.pms.values()):
            k = pm.state
            t0 = clock()
            hits = self._candidates(q, pm, event)
            t = fixed if virtual else _pad(q, clock() - t0, t0)
            if hits:
                if q.fork:
                    self._record(qi, k, k, t)
                self._record(qi, k, k + 1, t)
                self._step(q, pm, hits, event, out, now)
            else:
                self._record(qi, k, k, t)

    def _step(self, q, pm, hits, event, out, now) -> None:
        """Advance ``pm`` on ``event``; under skip-till-any the original stays and branches advance."""
        if q.fork:
            for i in hits:
                bound = dict(pm.bound)
                bound[i] = event
                child = self._new_pm(q, pm.window, pm.state + 1, bound, now)
                if child is not None and child.state == q.machine.final:
                    self._complete(q, child, out, now)
            return
        pm.bound[hits[0]] = event
        pm.state += 1
        if pm.state == q.machine.final:
            self._complete(q, pm, out, now)
        else:
            self.table.state[pm.slot] = pm.state

    def _complete(self, q, pm, out, now) -> None:
        seqs = tuple(sorted(e.seq_no for e in pm.bound.values()))
        out.append(ComplexEvent(q.query_id, pm.window.window_id, seqs, now))
        self.pm_ended += 1
        self.pm_events_total += pm.window.consumed - pm.born
        self.remove_pm(pm.pm_id)

    def _close_window(self, w: Window) -> None:
        table = self.table
        for pm_id, pm in w.pms.items():
            del self.pms[pm_id]
            table.discard(pm.slot)
            self.pm_ended += 1
            self.pm_events_total += w.consumed - pm.born
        w.pms = {}
        self.wslots.release(w.slot)


# -- ground truth ------------------------------------------------------------


@dataclass
class GroundTruth:
    complex_events: set[ComplexEvent]
    total_pms: int
    pms_per_query: dict[str, int]

    @property
    def match_probability(self) -> float:
        return len(self.complex_events) / self.total_pms if self.total_pms else 0.0

    def by_query(self) -> dict[str, set[ComplexEvent]]:
        out: dict[str, set[ComplexEvent]] = {}
        for ce in self.complex_events:
            out.setdefault(ce.query_id, set()).add(ce)
        return out


def ground_truth(events: Iterable[Event], specs: Sequence[QuerySpec]) -> GroundTruth:
    """Run the full, unshed pattern matching and collect every detection."""
    op = Operator(specs, observe_every=0)
    found: set[ComplexEvent] = set()
    for e in events:
        found.update(op.process(e))
    return GroundTruth(
        found,
        op.pms_created,
        {q.query_id: op.pms_created_per_query[q.index] for q in op.queries},
    )
