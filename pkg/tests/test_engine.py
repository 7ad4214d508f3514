import pytest

from cepshed.engine import Operator, UnknownPartialMatch, ground_truth
from cepshed.events import SyntheticSpec, generate
from cepshed.patterns import CompileError, QuerySpec, compile_query
from cepshed.bench.config import expand_chain

from conftest import make_events, seq_query


def spec(raw):
    raw.setdefault("window", {"kind": "count", "size": 10, "open": {"every_k": 100}})
    raw.setdefault("query_id", "q")
    return QuerySpec.from_dict(raw)


def test_compile_state_counts():
    assert compile_query(spec({"operator": "seq", "steps": ["A", "B", "C"]})).m == 4
    assert compile_query(spec({"operator": "any", "n": 2, "any_steps": ["B1", "B2", "B3"]})).m == 3
    sa = compile_query(spec({"operator": "seq_any", "n": 2, "steps": ["STR"], "any_steps": ["D1", "D2", "D3"]}))
    assert sa.m == 1 + (2 + 1)


def test_compile_rejects_bad_trees():
    with pytest.raises(CompileError):
        compile_query(spec({"operator": "any", "n": 4, "any_steps": ["a", "b"]}))
    with pytest.raises(CompileError):
        compile_query(spec({"operator": "nope", "steps": ["a"]}))


def bus_query():
    same_stop = [{"attr": "delayed", "op": "==", "value": True}, {"attr": "stop", "op": "==", "ref": {"step": 0}}]
    return spec(
        {
            "operator": "seq",
            "steps": [
                {"type": "A", "where": [{"attr": "delayed", "op": "==", "value": True}]},
                {"type": "B", "where": same_stop},
                {"type": "C", "where": same_stop},
            ],
            "window": {"kind": "count", "size": 10, "open": {"when": [{"attr": "event_type", "op": "==", "value": "A"}]}},
        }
    )


def test_bus_example_walks_to_final_state():
    op = Operator([bus_query()])
    ev = make_events(["A", "B", "C"], attrs=[{"delayed": True, "stop": 7}] * 3)
    assert op.process(ev[0]) == []
    (pm,) = op.pms.values()
    assert pm.state == 1
    op.process(ev[1])
    assert pm.state == 2
    out = op.process(ev[2])
    assert [c.seq_nos for c in out] == [(0, 1, 2)]
    assert op.n_pm == 0


def test_non_matching_event_self_loop():
    op = Operator([bus_query()])
    ev = make_events(["A", "B"], attrs=[{"delayed": True, "stop": 1}, {"delayed": True, "stop": 2}])
    op.process(ev[0])
    op.drain_observations()
    op.process(ev[1])
    (pm,) = op.pms.values()
    assert pm.state == 1
    assert [o[:3] for o in op.drain_observations()] == [(0, 1, 1)]


def test_skip_till_any_forks():
    q = seq_query("q", ["A", "B"], selection="skip_till_any_match")
    op = Operator([q])
    out = []
    for e in make_events(["A", "B", "B"]):
        out += op.process(e)
    assert sorted(c.seq_nos for c in out) == [(0, 1), (0, 2)]


def test_skip_till_next_takes_first():
    op = Operator([seq_query("q", ["A", "B"])])
    out = []
    for e in make_events(["A", "B", "B"]):
        out += op.process(e)
    assert [c.seq_nos for c in out] == [(0, 1)]


def test_any_operator():
    q = spec({"operator": "any", "n": 2, "any_steps": ["X", "Y", "Z"],
              "window": {"kind": "count", "size": 5, "open": {"every_k": 100}}})
    op = Operator([q])
    out = []
    for e in make_events(["X", "X", "Z"]):
        out += op.process(e)
    # each X starts its own match; a repeated X cannot fill a second any-slot
    assert sorted(c.seq_nos for c in out) == [(0, 2), (1, 2)]


def test_remove_pm_contract():
    op = Operator([seq_query("q", ["A", "B"], ws=5)])
    ev = make_events(["A", "C", "B"])
    op.process(ev[0])
    (pm_id,) = op.pms
    window = op.pms[pm_id].window
    op.remove_pm(pm_id)
    assert not window.closed and window in op.queries[0].windows.open_windows
    with pytest.raises(UnknownPartialMatch):
        op.remove_pm(pm_id)
    op.process(ev[1])
    assert op.process(ev[2]) == []


def test_skip_keeps_windows_aligned():
    q = seq_query("q", ["A", "B"], ws=3, every_k=2)
    a, b = Operator([q]), Operator([q])
    ev = make_events(["A", "B", "C", "A", "B", "C"])
    for i, e in enumerate(ev):
        a.process(e)
        if i == 2:
            b.skip(e)
        else:
            b.process(e)
    wa = [w.window_id for w in a.queries[0].windows.open_windows]
    wb = [w.window_id for w in b.queries[0].windows.open_windows]
    assert wa == wb


def test_ground_truth_edge_cases():
    q = seq_query("q", ["A", "B"], ws=5)
    empty = ground_truth(make_events(["C", "B", "C"]), [q])
    assert empty.complex_events == set() and empty.total_pms == 0
    one = ground_truth(make_events(["A", "C", "B"]), [q])
    assert len(one.complex_events) == 1 and one.match_probability == 1.0


def test_tuned_stream_match_probability():
    q = QuerySpec.from_dict(expand_chain({
        "query_id": "q", "chain": {"symbols": 20, "length": 10, "attr": "rise", "value": 1, "lead": 1},
        "window": {"kind": "count", "size": 476},
    }))
    ev = generate(SyntheticSpec.from_dict({
        "n_events": 20000, "types": [f"S{i}" for i in range(20)], "seed": 1,
        "attributes": {"rise": {"dist": "choice", "values": [0, 1], "p": [0.5, 0.5]}},
    }))
    assert abs(ground_truth(ev, [q]).match_probability - 0.30) <= 0.05
