"""Count-based and time-based sliding windows with remaining-event tracking."""

from __future__ import annotations

import itertools
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Iterator, Mapping

from .events import Event
from .predicates import event_predicate

COUNT_BASED = "count_based"
TIME_BASED = "time_based"

# smoothing factor of the inter-arrival estimator used by time-based windows
RATE_ALPHA = 0.1


@dataclass
class WindowSpec:
    """How windows are opened and how long they live.

    ``size`` is an event count for count-based windows and a duration in
    ``source_ts`` nanoseconds for time-based ones.  A window opens when
    ``every_k`` events have passed since the last count-based opening, or
    when ``open_when`` (a list of attribute conditions) holds for the
    arriving event.
    """

    mode: str
    size: int
    every_k: int | None = None
    open_when: list[dict[str, Any]] | None = None
    expected_size: int | None = None

    def __post_init__(self) -> None:
        if self.mode not in (COUNT_BASED, TIME_BASED):
            raise ValueError(f"unknown window mode {self.mode!r}")
        if self.size <= 0:
            raise ValueError("window size must be > 0")
        if self.every_k is not None and self.every_k <= 0:
            raise ValueError("every_k must be > 0")
        if self.every_k is None and not self.open_when:
            raise ValueError("window needs an open predicate (every_k or open_when)")

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "WindowSpec":
        kind = raw.get("kind", COUNT_BASED)
        kind = {"count": COUNT_BASED, "time": TIME_BASED}.get(kind, kind)
        opener = raw.get("open", {})
        size = raw["size"]
        if kind == TIME_BASED and isinstance(size, str):
            size = _parse_duration(size)
        return cls(
            mode=kind,
            size=int(size),
            every_k=opener.get("every_k"),
            open_when=opener.get("when"),
            expected_size=raw.get("expected_size"),
        )


def _parse_duration(text: str) -> int:
    units = {"ns": 1, "us": 1_000, "ms": 1_000_000, "s": 1_000_000_000, "min": 60_000_000_000}
    for suffix in sorted(units, key=len, reverse=True):
        if text.endswith(suffix):
            return int(float(text[: -len(suffix)]) * units[suffix])
    return int(text)


@dataclass(eq=False)
class Window:
    window_id: int
    opened_at: tuple[int, int]
    spec: WindowSpec
    consumed: int = 0
    closed: bool = False
    # partial matches living in this window, keyed by pm_id (owned by the engine)
    pms: dict = field(default_factory=dict)
    slot: int = -1


class WindowManager:
    """Opens, routes events into, and closes the windows of one query."""

    def __init__(self, spec: WindowSpec, ids: Iterator[int] | None = None):
        self.spec = spec
        self._ids = ids if ids is not None else itertools.count()
        self._open: deque[Window] = deque()
        self._routed = 0
        self._opener = event_predicate(spec.open_when) if spec.open_when else None
        self._gap_ns: float | None = None
        self._last_ts: int | None = None

    @property
    def open_windows(self) -> list[Window]:
        return list(self._open)

    def _should_open(self, event: Event) -> bool:
        k = self.spec.every_k
        if k is not None and self._routed % k == 0:
            return True
        return self._opener is not None and self._opener(event)

    def route(self, event: Event) -> tuple[list[Window], list[Window], list[Window]]:
        """Place ``event`` in every open window.

        Returns ``(members, opened, closed)``.  Count-based windows that
        reach their size with this event are returned in ``closed`` but are
        still members; time-based windows whose duration elapsed before this
        event are closed without it.
        """
        closed: list[Window] = []
        spec = self.spec
        self._observe_rate(event.source_ts)
        if spec.mode == TIME_BASED:
            while self._open and event.source_ts >= self._open[0].opened_at[1] + spec.size:
                w = self._open.popleft()
                w.closed = True
                closed.append(w)

        opened: list[Window] = []
        if self._should_open(event):
            w = Window(next(self._ids), (event.seq_no, event.source_ts), spec)
            self._open.append(w)
            opened.append(w)
        self._routed += 1

        members = list(self._open)
        for w in members:
            w.consumed += 1
        if spec.mode == COUNT_BASED:
            while self._open and self._open[0].consumed >= spec.size:
                w = self._open.popleft()
                w.closed = True
                closed.append(w)
        return members, opened, closed

    def _observe_rate(self, ts: int) -> None:
        if self._last_ts is not None:
            gap = max(ts - self._last_ts, 0)
            if self._gap_ns is None:
                self._gap_ns = float(gap)
            else:
                self._gap_ns = RATE_ALPHA * gap + (1 - RATE_ALPHA) * self._gap_ns
        self._last_ts = ts

    @property
    def rate_per_ns(self) -> float:
        """Smoothed arrival rate in events per nanosecond of dataset time."""
        if not self._gap_ns:
            return 0.0
        return 1.0 / self._gap_ns

    def expected_size(self) -> int:
        """Expected number of events per window."""
        if self.spec.mode == COUNT_BASED:
            return self.spec.size
        if self.spec.expected_size:
            return int(self.spec.expected_size)
        return max(1, int(round(self.rate_per_ns * self.spec.size)))

    def remaining(self, window: Window, now: tuple[int, int] | None = None) -> int:
        if self.spec.mode == COUNT_BASED:
            return max(self.spec.size - window.consumed, 0)
        ts = now[1] if now is not None else (self._last_ts or window.opened_at[1])
        return time_based_remaining(window.opened_at[1] + self.spec.size - ts, self.rate_per_ns, self.spec.size)


def time_based_remaining(time_left_ns: int, rate_per_ns: float, duration_ns: int) -> int:
    """Remaining-event estimate: time left times smoothed rate, clamped to the expected size."""
    ws_estimate = rate_per_ns * duration_ns
    est = round(max(time_left_ns, 0) * rate_per_ns)
    return int(min(max(est, 0), round(ws_estimate)))
