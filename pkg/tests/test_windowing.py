import numpy as np

from cepshed.windowing import WindowManager, WindowSpec, time_based_remaining

from conftest import make_events


def route_all(wm, events):
    return [wm.route(e) for e in events]


def test_every_k_overlap():
    wm = WindowManager(WindowSpec("count_based", 8000, every_k=500))
    out = route_all(wm, make_events(["A"] * 1000))
    assert [w.window_id for w in out[500][1]] == [1]
    for members, _, _ in out[500:1000]:
        assert [w.window_id for w in members] == [0, 1]
    assert all([w.window_id for w in m] == [0] for m, _, _ in out[:500])


def test_logical_open_ignores_other_events():
    spec = WindowSpec.from_dict({"kind": "count", "size": 5, "open": {"when": [{"attr": "event_type", "op": "in", "value": ["L"]}]}})
    wm = WindowManager(spec)
    members, opened, closed = wm.route(make_events(["X"])[0])
    assert (members, opened, closed) == ([], [], [])


def test_count_window_closes_after_size():
    spec = WindowSpec.from_dict({"kind": "count", "size": 3, "open": {"when": [{"attr": "event_type", "op": "==", "value": "O"}]}})
    wm = WindowManager(spec)
    events = make_events(["x"] * 10 + ["O", "x", "x", "x"])
    res = route_all(wm, events)
    assert res[10][1][0].opened_at[0] == 10
    assert res[11][2] == []
    closed = res[12][2]
    assert len(closed) == 1 and closed[0] in res[12][0]
    assert res[13][0] == []


def test_remaining_count_based():
    spec = WindowSpec("count_based", 10, every_k=100)
    wm = WindowManager(spec)
    res = route_all(wm, make_events(["A"] * 4))
    w = res[0][1][0]
    assert wm.remaining(w) == 6
    route_all(wm, make_events(["A"] * 6, start=4))
    assert wm.remaining(w) == 0


def test_time_based_estimator():
    # 10 s window, half elapsed, 100 events/s => 500 events left
    assert time_based_remaining(5_000_000_000, 100 / 1e9, 10_000_000_000) == 500
    assert time_based_remaining(-1, 100 / 1e9, 10_000_000_000) == 0


def test_time_window_closes_on_duration():
    spec = WindowSpec.from_dict({"kind": "time", "size": "10ms", "open": {"every_k": 1000}})
    wm = WindowManager(spec)
    res = route_all(wm, make_events(["A"] * 12))  # 1 ms apart
    assert all(len(m) == 1 for m, _, _ in res[:10])
    assert len(res[10][2]) == 1 and res[10][0] == []
    w = res[0][1][0]
    assert w.closed


def test_membership_matches_brute_force(rng):
    n, size, k = 600, 37, 11
    events = make_events(["A"] * n)
    wm = WindowManager(WindowSpec("count_based", size, every_k=k))
    got = [sorted(w.window_id for w in m) for m, _, _ in route_all(wm, events)]
    for i in range(n):
        expected = [s // k for s in range(0, i + 1, k) if i < s + size]
        assert got[i] == expected
