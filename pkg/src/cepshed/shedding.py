"""Overload detection and the drop strategies.

:func:`detect_overload` turns the queueing latency of the event at the head
of the input queue and the fitted latency model into a drop count ``rho``
(in partial matches).  The strategies then pick which PMs (or, for the
event-level baseline, which queued events) to discard:

``pspice``     lowest ``w * P / tau`` first
``pspice--``   lowest ``w * P`` first (no cost term)
``pm_bl``      uniform random PMs
``e_bl``       queued events of the least useful event types
``none``       never drops anything

Ties in utility are broken by creation time (older first), then PM id.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .engine import Operator
from .latency import LatencyModel
from .model import UtilityTable, lookup_many
from .patterns import QuerySpec

PSPICE = "pspice"
PSPICE_MM = "pspice--"
PM_BL = "pm_bl"
E_BL = "e_bl"
NONE = "none"
STRATEGIES = (PSPICE, PSPICE_MM, PM_BL, E_BL, NONE)
PM_STRATEGIES = (PSPICE, PSPICE_MM, PM_BL, NONE)

_ALIASES = {
    "pspice_minus_minus": PSPICE_MM,
    "pspice-minus-minus": PSPICE_MM,
    "pm-bl": PM_BL,
    "e-bl": E_BL,
}


def normalize_strategy(name: str) -> str:
    name = _ALIASES.get(name.lower(), name.lower())
    if name not in STRATEGIES:
        raise ValueError(f"unknown strategy {name!r}; choose from {', '.join(STRATEGIES)}")
    return name


@dataclass
class ShedConfig:
    """Latency bound and safety buffer in nanoseconds; ``safety_buffer`` defaults to 5% of the bound."""

    latency_bound: int
    safety_buffer: int | None = None
    strategy: str = PSPICE

    def __post_init__(self) -> None:
        if self.latency_bound <= 0:
            raise ValueError("latency bound must be > 0")
        if self.safety_buffer is None:
            self.safety_buffer = int(0.05 * self.latency_bound)
        if self.safety_buffer < 0:
            raise ValueError("safety buffer must be >= 0")
        self.strategy = normalize_strategy(self.strategy)

    @classmethod
    def from_ms(cls, bound_ms: float, buffer_pct: float = 5.0, strategy: str = PSPICE) -> "ShedConfig":
        lb = int(bound_ms * 1_000_000)
        return cls(lb, int(lb * buffer_pct / 100.0), strategy)


@dataclass
class Decision:
    rho: int
    l_q: int
    l_p: float
    l_s: float
    target_l_p: float = 0.0
    target_n: float = 0.0
    # l_q + l_p + l_s + b_s - LB when positive
    excess: float = 0.0

    @property
    def action(self) -> str:
        return "drop" if self.rho > 0 else "no_action"


def detect_overload(l_q: int, n_pm: int, model: LatencyModel, cfg: ShedConfig) -> Decision:
    """Check ``l_q + f(n) + g(n) + b_s > LB`` and size the drop.

    The processing-latency budget left for the event is
    ``LB - b_s - l_q - g(n)`` (floored at 0); the largest PM count that fits
    it is ``f^-1`` of that budget, and everything above is to be dropped.
    Keeping the buffer in the target leaves ``b_s`` of headroom once the
    shedder is in steady state.
    """
    l_p = model.processing(n_pm)
    l_s = model.shedding(n_pm)
    excess = l_q + l_p + l_s + cfg.safety_buffer - cfg.latency_bound
    if excess <= 0:
        return Decision(0, l_q, l_p, l_s)
    target = max(0.0, cfg.latency_bound - cfg.safety_buffer - l_q - l_s)
    n_target = model.f_inverse(target) if target > 0 else 0.0
    if math.isinf(n_target):
        rho = 0
    else:
        rho = min(n_pm, max(0, n_pm - math.floor(n_target)))
    return Decision(rho, l_q, l_p, l_s, target, n_target, excess)


# -- PM ranking --------------------------------------------------------------


def pm_utilities(
    op: Operator,
    slots: np.ndarray,
    tables: Sequence[UtilityTable | None],
    *,
    probability_only: bool = False,
    now: tuple[int, int] | None = None,
) -> np.ndarray:
    """Utility of the PMs at ``slots`` of the operator's PM table."""
    table = op.table
    remaining = op.refresh_remaining(now)[table.window[slots]]
    queries = table.query[slots]
    states = table.state[slots]
    util = np.empty(len(slots))
    for qi, ut in enumerate(tables):
        sel = queries == qi
        if not sel.any():
            continue
        if ut is None:
            raise RuntimeError(f"no utility table for query {op.queries[qi].query_id}")
        util[sel] = lookup_many(ut, states[sel], remaining[sel], probability_only)
    return util


def lowest(util: np.ndarray, created: np.ndarray, pm_ids: np.ndarray, rho: int) -> np.ndarray:
    """Positions of the ``rho`` smallest utilities under the (utility, created, id) order."""
    if rho <= 0:
        return np.empty(0, np.intp)
    if rho >= len(util):
        return np.arange(len(util))
    order = np.lexsort((pm_ids, created, util))
    return order[:rho]


def _drop_slots(op: Operator, slots: np.ndarray) -> list[int]:
    ids = op.table.pm_id[slots].tolist()
    for pm_id in ids:
        op.remove_pm(pm_id)
    return ids


def _shed_ranked(op, rho, tables, probability_only, now) -> list[int]:
    if rho <= 0:
        return []
    slots = op.table.live_slots()
    if rho >= len(slots):
        return _drop_slots(op, slots)
    util = pm_utilities(op, slots, tables, probability_only=probability_only, now=now)
    pick = lowest(util, op.table.created[slots], op.table.pm_id[slots], rho)
    return _drop_slots(op, slots[pick])


def shed_pspice(rho: int, op: Operator, tables: Sequence[UtilityTable | None], now=None) -> list[int]:
    """Drop the ``rho`` live PMs with the lowest ``w * P / tau``; returns their ids."""
    return _shed_ranked(op, rho, tables, False, now)


def shed_pspice_minus_minus(rho: int, op: Operator, tables: Sequence[UtilityTable | None], now=None) -> list[int]:
    """Like :func:`shed_pspice` but ranks by ``w * P`` alone."""
    return _shed_ranked(op, rho, tables, True, now)


def shed_pm_bl(rho: int, op: Operator, rng: np.random.Generator) -> list[int]:
    """Drop ``min(rho, n_pm)`` PMs chosen uniformly at random."""
    if rho <= 0:
        return []
    slots = op.table.live_slots()
    if rho >= len(slots):
        return _drop_slots(op, slots)
    return _drop_slots(op, rng.choice(slots, size=rho, replace=False))


# -- event-level baseline ----------------------------------------------------


@dataclass
class TypeUtility:
    """Event-type utilities for the event-dropping baseline.

    A type's utility is its number of occurrences across all query
    patterns times its mean number of occurrences per window, the latter
    learned from the stream.  Steps without a type constraint count for
    every type.
    """

    pattern_occurrences: dict[str, float]
    wildcard: float
    window_sizes: list[float]
    seen: dict[str, int] = field(default_factory=dict)
    total: int = 0

    @classmethod
    def from_specs(cls, specs: Sequence[QuerySpec], window_sizes: Sequence[float] | None = None) -> "TypeUtility":
        occ: dict[str, float] = {}
        wildcard = 0.0
        for spec in specs:
            for step in list(spec.steps) + list(spec.any_steps):
                if step.event_type is None:
                    wildcard += 1
                else:
                    occ[step.event_type] = occ.get(step.event_type, 0.0) + 1
        sizes = list(window_sizes) if window_sizes is not None else [float(s.window.size) for s in specs]
        return cls(occ, wildcard, sizes)

    def observe(self, event_type: str) -> None:
        self.seen[event_type] = self.seen.get(event_type, 0) + 1
        self.total += 1

    def utility(self, event_type: str) -> float:
        occ = self.pattern_occurrences.get(event_type, 0.0) + self.wildcard
        if occ == 0 or self.total == 0:
            return 0.0
        per_window = self.seen.get(event_type, 0) / self.total * float(np.mean(self.window_sizes))
        return occ * per_window

    def table(self) -> dict[str, float]:
        types = set(self.seen) | set(self.pattern_occurrences)
        return {t: self.utility(t) for t in types}


def e_bl_budget(decision: Decision, *, rule: str = "excess", mean_pm_lifetime: float = 1.0, n_pm: int = 1) -> int:
    """Number of queued events to drop for one overload decision.

    ``excess`` (default): the latency overshoot ``l_q + l_p + l_s + b_s - LB``
    measured in event-processing times ``l_p``, i.e. how many queued events
    must vanish for the events behind them to meet the bound.

    ``lifetime``: ``rho`` times the mean PM lifetime in events, divided by
    the live PM count (guard evaluations saved by dropping ``rho`` PMs over
    their lifetime, per evaluation saved by dropping one event).
    """
    if decision.rho <= 0:
        return 0
    if rule == "excess":
        return max(1, int(math.ceil(decision.excess / max(decision.l_p, 1.0))))
    if rule == "lifetime":
        return int(math.ceil(decision.rho * max(mean_pm_lifetime, 1.0) / max(n_pm, 1)))
    raise ValueError(f"unknown budget rule {rule!r}")


def shed_e_bl(
    budget: int,
    pending: np.ndarray,
    pending_types: Sequence[str],
    utilities: Mapping[str, float],
    rng: np.random.Generator,
) -> np.ndarray:
    """Choose up to ``budget`` queued events to drop.

    ``pending`` holds the queue positions of undropped queued events and
    ``pending_types`` their types.  Types are taken in ascending utility
    (types of equal utility form one group); the group that exhausts the
    budget is sampled uniformly.
    """
    if budget <= 0 or len(pending) == 0:
        return np.empty(0, dtype=np.int64)
    util = np.fromiter((utilities.get(t, 0.0) for t in pending_types), float, len(pending_types))
    chosen = []
    left = budget
    for u in np.unique(util):
        group = pending[util == u]
        if len(group) <= left:
            chosen.append(group)
            left -= len(group)
        else:
            chosen.append(rng.choice(group, size=left, replace=False))
            left = 0
        if left == 0:
            break
    return np.sort(np.concatenate(chosen))
