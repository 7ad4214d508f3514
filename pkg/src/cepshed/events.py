"""Primitive events, CSV ingestion, synthetic streams and paced replay.

Timestamps are integer nanoseconds.  ``source_ts`` is dataset time and is
only used by window predicates; ``arrival_ts`` is the wall-clock instant an
event entered the operator's input queue and is only used for latency math.
"""

from __future__ import annotations

import csv
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

Scalar = int | float | str | bool

SCALAR_KINDS = ("int", "float", "str", "bool")


class IngestError(ValueError):
    """A CSV row could not be turned into an event."""

    def __init__(self, message: str, row: int | None = None, column: str | None = None):
        super().__init__(message)
        self.row = row
        self.column = column


@dataclass(slots=True)
class Event:
    seq_no: int
    source_ts: int
    event_type: str
    attributes: dict[str, Scalar] = field(default_factory=dict)
    arrival_ts: int = 0

    def __getitem__(self, name: str) -> Scalar:
        return self.attributes[name]

    def stamped(self, arrival_ts: int) -> "Event":
        return Event(self.seq_no, self.source_ts, self.event_type, self.attributes, arrival_ts)

    def order_key(self) -> tuple[int, int]:
        return (self.source_ts, self.seq_no)


@dataclass
class Schema:
    """Column layout of a CSV dataset.

    ``columns`` lists ``(name, kind)`` pairs with kind in int/float/str/bool.
    ``timestamp_unit_ns`` converts the timestamp column to nanoseconds.
    """

    columns: list[tuple[str, str]]
    timestamp_column: str
    type_column: str
    timestamp_unit_ns: int = 1

    def __post_init__(self) -> None:
        names = [c for c, _ in self.columns]
        for name, kind in self.columns:
            if kind not in SCALAR_KINDS:
                raise ValueError(f"column {name!r}: unknown kind {kind!r}")
        for required in (self.timestamp_column, self.type_column):
            if required not in names:
                raise ValueError(f"schema lacks column {required!r}")

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "Schema":
        cols = raw["columns"]
        if isinstance(cols, Mapping):
            columns = [(str(k), str(v)) for k, v in cols.items()]
        else:
            columns = [(str(c["name"]), str(c["kind"])) for c in cols]
        return cls(
            columns=columns,
            timestamp_column=raw["timestamp_column"],
            type_column=raw["type_column"],
            timestamp_unit_ns=int(raw.get("timestamp_unit_ns", 1)),
        )


def _convert(value: str, kind: str) -> Scalar:
    if kind == "int":
        return int(value)
    if kind == "float":
        return float(value)
    if kind == "bool":
        low = value.strip().lower()
        if low in ("1", "true", "t", "yes"):
            return True
        if low in ("0", "false", "f", "no"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    return value


def ingest_csv(path: str | Path, schema: Schema) -> Iterator[Event]:
    """Yield events from a headered CSV file, numbering them 0, 1, 2, ...

    Row numbers in errors are 0-based data-row indices (the header is not
    counted).
    """
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return
        missing = [c for c, _ in schema.columns if c not in reader.fieldnames]
        if missing:
            raise IngestError(f"header lacks columns {missing}", row=None, column=missing[0])
        for row_no, row in enumerate(reader):
            attrs: dict[str, Scalar] = {}
            for name, kind in schema.columns:
                raw = row.get(name)
                if raw is None:
                    raise IngestError(f"row {row_no}: missing column {name!r}", row_no, name)
                try:
                    attrs[name] = _convert(raw, kind)
                except ValueError as exc:
                    raise IngestError(
                        f"row {row_no}: column {name!r} expects {kind}: {exc}", row_no, name
                    ) from None
            try:
                ts = int(float(attrs[schema.timestamp_column]) * schema.timestamp_unit_ns)
            except (TypeError, ValueError):
                raise IngestError(
                    f"row {row_no}: timestamp column is not numeric", row_no, schema.timestamp_column
                ) from None
            etype = sys.intern(str(attrs[schema.type_column]))
            yield Event(row_no, ts, etype, attrs)


# -- synthetic streams -------------------------------------------------------


def _sampler(spec: Mapping[str, Any]) -> Callable[[np.random.Generator, int], np.ndarray]:
    dist = spec.get("dist", "uniform")
    if dist == "bernoulli":
        p = float(spec["p"])
        return lambda rng, n: rng.random(n) < p
    if dist == "uniform":
        lo, hi = float(spec.get("low", 0.0)), float(spec.get("high", 1.0))
        return lambda rng, n: rng.uniform(lo, hi, n)
    if dist == "normal":
        mu, sd = float(spec.get("mean", 0.0)), float(spec.get("std", 1.0))
        return lambda rng, n: rng.normal(mu, sd, n)
    if dist == "randint":
        lo, hi = int(spec.get("low", 0)), int(spec["high"])
        return lambda rng, n: rng.integers(lo, hi, n)
    if dist == "choice":
        values = list(spec["values"])
        probs = spec.get("p")
        return lambda rng, n: np.asarray(values, dtype=object)[rng.choice(len(values), n, p=probs)]
    raise ValueError(f"unknown attribute distribution {dist!r}")


@dataclass
class SyntheticSpec:
    """Parameters of a generated stream.

    ``types`` maps event type to its probability.  ``attributes`` maps an
    attribute name to a distribution dict, e.g. ``{"dist": "bernoulli",
    "p": 0.3}``.  ``segments`` optionally switches parameters mid-stream:
    each entry has ``start`` (event index) plus ``types``/``attributes``
    overrides, which is how drift is injected.
    """

    n_events: int
    types: dict[str, float]
    attributes: dict[str, dict[str, Any]] = field(default_factory=dict)
    interval_ns: int = 1_000_000
    segments: list[dict[str, Any]] = field(default_factory=list)
    seed: int = 0

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "SyntheticSpec":
        known = {"n_events", "types", "attributes", "interval_ns", "segments", "seed"}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown synthetic keys {sorted(unknown)}")
        types = raw["types"]
        if isinstance(types, (list, tuple)):
            types = {str(t): 1.0 / len(types) for t in types}
        return cls(
            n_events=int(raw["n_events"]),
            types={str(k): float(v) for k, v in types.items()},
            attributes=dict(raw.get("attributes", {})),
            interval_ns=int(raw.get("interval_ns", 1_000_000)),
            segments=list(raw.get("segments", [])),
            seed=int(raw.get("seed", 0)),
        )


def generate(spec: SyntheticSpec) -> list[Event]:
    """Materialise a synthetic stream; identical spec and seed give identical events."""
    rng = np.random.default_rng(spec.seed)
    bounds = [(0, spec.types, spec.attributes)]
    for seg in sorted(spec.segments, key=lambda s: int(s["start"])):
        _, prev_types, prev_attrs = bounds[-1]
        attrs = dict(prev_attrs)
        attrs.update(seg.get("attributes", {}))
        bounds.append((int(seg["start"]), seg.get("types", prev_types), attrs))

    events: list[Event] = []
    for k, (start, types, attrs) in enumerate(bounds):
        stop = bounds[k + 1][0] if k + 1 < len(bounds) else spec.n_events
        n = max(0, min(stop, spec.n_events) - start)
        if n == 0:
            continue
        names = [sys.intern(t) for t in types]
        probs = np.asarray(list(types.values()), dtype=float)
        probs = probs / probs.sum()
        type_idx = rng.choice(len(names), n, p=probs)
        columns = {a: _sampler(d)(rng, n).tolist() for a, d in attrs.items()}
        for j in range(n):
            seq = start + j
            row = {a: col[j] for a, col in columns.items()}
            events.append(Event(seq, seq * spec.interval_ns, names[type_idx[j]], row))
    return events


@dataclass
class StreamSource:
    """Where a workload comes from and how hard it is pushed.

    ``rate_pct`` is the target input rate as a percentage of the operator's
    measured maximum throughput.
    """

    kind: str
    rate_pct: float = 100.0
    path: str | None = None
    schema: Schema | None = None
    synthetic: SyntheticSpec | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("csv_file", "synthetic"):
            raise ValueError(f"unknown source kind {self.kind!r}")
        if self.rate_pct <= 0:
            raise ValueError("rate_pct must be > 0")

    def events(self) -> list[Event]:
        if self.kind == "csv_file":
            if self.path is None or self.schema is None:
                raise ValueError("csv source needs path and schema")
            return list(ingest_csv(self.path, self.schema))
        if self.synthetic is None:
            raise ValueError("synthetic source needs a SyntheticSpec")
        return generate(self.synthetic)


# -- pacing ------------------------------------------------------------------


def wait_until(deadline_ns: int, clock: Callable[[], int] = time.perf_counter_ns) -> None:
    """Block until ``clock() >= deadline_ns``: coarse sleep, then spin."""
    while True:
        remaining = deadline_ns - clock()
        if remaining <= 0:
            return
        if remaining > 2_000_000:
            time.sleep((remaining - 1_000_000) / 1e9)


def schedule(events: Sequence[Event], rate_eps: float, start_ns: int) -> list[Event]:
    """Return copies of ``events`` stamped with evenly paced enqueue instants."""
    if rate_eps <= 0:
        raise ValueError("rate must be > 0")
    gap = 1e9 / rate_eps
    return [e.stamped(start_ns + int(round(i * gap))) for i, e in enumerate(events)]


def replay(
    events: Iterable[Event],
    max_throughput: float,
    rate_pct: float = 100.0,
    *,
    clock: Callable[[], int] = time.perf_counter_ns,
    start_ns: int | None = None,
    realtime: bool = True,
) -> Iterator[Event]:
    """Emit events at ``rate_pct`` percent of ``max_throughput`` events/s.

    Each event carries the instant it was scheduled to be enqueued.  A
    consumer that falls behind therefore sees the queueing delay it would
    have accumulated behind an unbounded input queue.  With ``realtime`` the
    generator sleeps until an event's instant before yielding it.
    """
    if max_throughput <= 0:
        raise ValueError("max_throughput must be > 0")
    if rate_pct <= 0:
        raise ValueError("rate_pct must be > 0")
    gap = 1e9 / (max_throughput * rate_pct / 100.0)
    t0 = clock() if start_ns is None else start_ns
    for i, e in enumerate(events):
        at = t0 + int(round(i * gap))
        if realtime:
            wait_until(at, clock)
        yield e.stamped(at)
