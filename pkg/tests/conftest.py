from __future__ import annotations

import numpy as np
import pytest

from cepshed.events import Event
from cepshed.patterns import QuerySpec


def make_events(types, start=0, attrs=None):
    """Events numbered from ``start`` with 1 ms dataset spacing."""
    out = []
    for i, t in enumerate(types):
        a = dict(attrs[i]) if attrs is not None else {}
        out.append(Event(start + i, (start + i) * 1_000_000, t, a))
    return out


def seq_query(qid, types, *, ws=10, every_k=None, open_on=None, selection="skip_till_next_match", weight=1.0):
    window = {"kind": "count", "size": ws, "open": {}}
    if every_k is not None:
        window["open"]["every_k"] = every_k
    else:
        window["open"]["when"] = [{"attr": "event_type", "op": "in", "value": open_on or [types[0]]}]
    return QuerySpec.from_dict(
        {"query_id": qid, "operator": "seq", "steps": list(types), "window": window,
         "selection": selection, "weight": weight}
    )


def random_absorbing(rng: np.random.Generator, m: int, *, sparse: bool = True) -> np.ndarray:
    """Random row-stochastic matrix whose last state is absorbing."""
    T = rng.random((m, m))
    if sparse:
        T *= rng.random((m, m)) < 0.7
    for i in range(m - 1):
        if T[i].sum() == 0:
            T[i, rng.integers(m)] = 1.0
    T[m - 1] = 0.0
    T[m - 1, m - 1] = 1.0
    return T / T.sum(axis=1, keepdims=True)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance verdicts, echoed in the terminal summary
VERDICTS: list[str] = []


def verdict(label: str, ok: bool, detail: str = "") -> bool:
    line = f"{label}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
    VERDICTS.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance verdicts")
        for line in VERDICTS:
            terminalreporter.write_line(line)
