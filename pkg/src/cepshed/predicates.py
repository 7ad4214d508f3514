"""Attribute comparisons shared by window-open predicates and step guards.

A condition is a dict ``{"attr": name, "op": op, "value": v}`` or, for
guards that look back at already-bound events, ``{"attr": name, "op": op,
"ref": {"step": k, "attr": other}}``.  ``"ref": {"first": true, ...}``
refers to the first bound event of the partial match.  The pseudo
attribute ``event_type`` reads the event's type.
"""

from __future__ import annotations

import operator
from typing import Any, Callable, Mapping, Sequence

_OPS: dict[str, Callable[[Any, Any], bool]] = {
    "==": operator.eq,
    "!=": operator.ne,
    "<": operator.lt,
    "<=": operator.le,
    ">": operator.gt,
    ">=": operator.ge,
    "in": lambda a, b: a in b,
    "not in": lambda a, b: a not in b,
}

# (event, bound) -> bool, where bound maps step index -> Event
Guard = Callable[[Any, Mapping[int, Any]], bool]


def _reader(attr: str) -> Callable[[Any], Any]:
    if attr == "event_type":
        return lambda e: e.event_type
    return lambda e: e.attributes[attr]


def compile_condition(cond: Mapping[str, Any]) -> Guard:
    op_name = cond.get("op", "==")
    try:
        op = _OPS[op_name]
    except KeyError:
        raise ValueError(f"unsupported operator {op_name!r}") from None
    read = _reader(str(cond["attr"]))
    if "ref" in cond:
        ref = cond["ref"]
        read_ref = _reader(str(ref.get("attr", cond["attr"])))
        if ref.get("first"):
            def check(e, bound):
                first = bound[min(bound)]
                return op(read(e), read_ref(first))
        else:
            step = int(ref["step"])

            def check(e, bound):
                other = bound.get(step)
                return other is not None and op(read(e), read_ref(other))
        return check

    value = cond["value"]
    if op_name in ("in", "not in"):
        value = frozenset(value)
    return lambda e, bound: op(read(e), value)


def compile_conditions(conds: Sequence[Mapping[str, Any]] | None) -> Guard | None:
    """Conjunction of conditions; ``None`` when there is nothing to check."""
    if not conds:
        return None
    checks = [compile_condition(c) for c in conds]
    if len(checks) == 1:
        return checks[0]
    return lambda e, bound: all(c(e, bound) for c in checks)


def event_predicate(conds: Sequence[Mapping[str, Any]]) -> Callable[[Any], bool]:
    """Predicate over the arriving event alone (no bound events)."""
    guard = compile_conditions(conds)
    if guard is None:
        return lambda e: True
    empty: dict[int, Any] = {}
    return lambda e: guard(e, empty)
