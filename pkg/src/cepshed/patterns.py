"""Query specifications and their compilation into state machines.

States are numbered from 0: state ``k`` means ``k`` steps have matched, so
state 0 is the empty initial state and ``m - 1`` is the final one.
Supported operator trees are a sequence, ``any(n, ...)`` and a sequence
prefix followed by ``any(n, ...)``.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from typing import Any, Mapping

from .predicates import Guard, compile_conditions
from .windowing import WindowSpec

SKIP_TILL_NEXT = "skip_till_next_match"
SKIP_TILL_ANY = "skip_till_any_match"
POLICIES = (SKIP_TILL_NEXT, SKIP_TILL_ANY)


class CompileError(ValueError):
    """The operator tree cannot be turned into a state machine."""


@dataclass
class Step:
    event_type: str | None = None
    guard: Guard | None = None
    conditions: list[dict[str, Any]] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.event_type is not None:
            self.event_type = sys.intern(self.event_type)
        if self.guard is None and self.conditions:
            self.guard = compile_conditions(self.conditions)

    def accepts(self, event, bound: Mapping[int, Any]) -> bool:
        if self.event_type is not None and event.event_type != self.event_type:
            return False
        return self.guard is None or self.guard(event, bound)

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any] | str) -> "Step":
        if isinstance(raw, str):
            return cls(event_type=raw)
        return cls(event_type=raw.get("type"), conditions=list(raw.get("where", [])))


@dataclass
class QuerySpec:
    """A weighted pattern over one window definition.

    ``operator`` is ``"seq"`` (all of ``steps`` in order), ``"any"`` (any
    ``n`` distinct steps of ``any_steps``) or ``"seq_any"`` (``steps`` in
    order, then any ``n`` of ``any_steps``).
    """

    query_id: str
    operator: str
    window: WindowSpec
    steps: list[Step] = field(default_factory=list)
    any_steps: list[Step] = field(default_factory=list)
    n: int = 0
    weight: float = 1.0
    selection: str = SKIP_TILL_NEXT
    max_pms_per_window: int | None = None

    def __post_init__(self) -> None:
        if self.weight <= 0:
            raise ValueError(f"query {self.query_id}: weight must be > 0")
        if self.selection not in POLICIES:
            raise ValueError(f"query {self.query_id}: unknown selection policy {self.selection!r}")

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "QuerySpec":
        op = raw.get("operator", "seq")
        return cls(
            query_id=str(raw["query_id"]),
            operator=op,
            window=WindowSpec.from_dict(raw["window"]),
            steps=[Step.from_dict(s) for s in raw.get("steps", [])],
            any_steps=[Step.from_dict(s) for s in raw.get("any_steps", [])],
            n=int(raw.get("n", 0)),
            weight=float(raw.get("weight", 1.0)),
            selection=raw.get("selection", SKIP_TILL_NEXT),
            max_pms_per_window=raw.get("max_pms_per_window"),
        )


@dataclass
class PatternStateMachine:
    """Compiled pattern.

    ``awaits[k]`` lists the step indices that can move a match out of
    state ``k``; for the any-part every unmatched any-step is a candidate.
    Step indices address ``steps`` (prefix first, then any-steps).
    """

    query_id: str
    m: int
    steps: list[Step]
    prefix_len: int
    awaits: list[tuple[int, ...]]

    @property
    def final(self) -> int:
        return self.m - 1

    @property
    def is_sequence(self) -> bool:
        return self.prefix_len == self.m - 1

    def event_types(self) -> list[str | None]:
        return [s.event_type for s in self.steps]


def compile_query(spec: QuerySpec) -> PatternStateMachine:
    op = spec.operator
    if op == "seq":
        if not spec.steps or spec.any_steps:
            raise CompileError(f"{spec.query_id}: seq needs steps and no any_steps")
        prefix, anys, n = spec.steps, [], 0
    elif op == "any":
        if spec.steps or not spec.any_steps:
            raise CompileError(f"{spec.query_id}: any needs any_steps only")
        prefix, anys, n = [], spec.any_steps, spec.n
    elif op == "seq_any":
        if not spec.steps or not spec.any_steps:
            raise CompileError(f"{spec.query_id}: seq_any needs steps and any_steps")
        prefix, anys, n = spec.steps, spec.any_steps, spec.n
    else:
        raise CompileError(f"{spec.query_id}: unsupported operator {op!r}")
    if anys and not 1 <= n <= len(anys):
        raise CompileError(f"{spec.query_id}: any needs 1 <= n <= {len(anys)}, got {n}")

    steps = list(prefix) + list(anys)
    lp = len(prefix)
    m = lp + n + 1
    any_idx = tuple(range(lp, lp + len(anys)))
    awaits: list[tuple[int, ...]] = []
    for k in range(m - 1):
        awaits.append((k,) if k < lp else any_idx)
    awaits.append(())
    return PatternStateMachine(spec.query_id, m, steps, lp, awaits)
