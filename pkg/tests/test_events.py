import time

import pytest

from cepshed.engine import Operator
from cepshed.events import (
    IngestError,
    Schema,
    StreamSource,
    SyntheticSpec,
    generate,
    ingest_csv,
    replay,
    schedule,
)
from cepshed.runtime import Runtime, SimClock, WorkloadTooShort, measure_max_throughput

from conftest import make_events, seq_query

SCHEMA = Schema.from_dict(
    {"columns": {"symbol": "str", "price": "float", "ts": "int"}, "timestamp_column": "ts", "type_column": "symbol"}
)


def test_three_rows_number_from_zero(tmp_path):
    p = tmp_path / "q.csv"
    p.write_text("symbol,price,ts\nA,1.5,10\nB,2.0,11\nA,1.7,12\n")
    events = list(ingest_csv(p, SCHEMA))
    assert [e.seq_no for e in events] == [0, 1, 2]
    assert [e.event_type for e in events] == ["A", "B", "A"]
    assert events[2]["price"] == 1.7
    assert events[1].source_ts == 11


def test_empty_file_gives_empty_stream(tmp_path):
    p = tmp_path / "empty.csv"
    p.write_text("")
    assert list(ingest_csv(p, SCHEMA)) == []


def test_bad_float_reports_row(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("symbol,price,ts\nA,1.0,1\nB,oops,2\n")
    with pytest.raises(IngestError) as err:
        list(ingest_csv(p, SCHEMA))
    assert err.value.row == 1
    assert err.value.column == "price"


def test_missing_column_in_header(tmp_path):
    p = tmp_path / "h.csv"
    p.write_text("symbol,ts\nA,1\n")
    with pytest.raises(IngestError):
        list(ingest_csv(p, SCHEMA))


def test_generate_is_reproducible_and_drifts():
    spec = SyntheticSpec.from_dict(
        {
            "n_events": 2000,
            "types": {"A": 0.5, "B": 0.5},
            "attributes": {"x": {"dist": "bernoulli", "p": 0.1}},
            "segments": [{"start": 1000, "attributes": {"x": {"dist": "bernoulli", "p": 0.9}}}],
            "seed": 4,
        }
    )
    a, b = generate(spec), generate(spec)
    assert [(e.event_type, e["x"]) for e in a] == [(e.event_type, e["x"]) for e in b]
    first = sum(bool(e["x"]) for e in a[:1000]) / 1000
    second = sum(bool(e["x"]) for e in a[1000:]) / 1000
    assert first < 0.2 < 0.8 < second


def test_schedule_paces_evenly():
    ev = schedule(make_events(["A"] * 5), 1000.0, 7)
    assert [e.arrival_ts for e in ev] == [7, 1_000_007, 2_000_007, 3_000_007, 4_000_007]


@pytest.mark.parametrize("pct", [100, 200])
def test_replay_rate(pct):
    events = make_events(["A"] * 3000)
    t0 = time.perf_counter()
    n = 0
    for _ in replay(events, 1000.0, pct):
        n += 1
        if time.perf_counter() - t0 >= 1.0:
            break
    assert n == pytest.approx(10 * pct, rel=0.05)


def test_replay_virtual_stamps():
    out = list(replay(make_events(["A"] * 3), 1000.0, 200, start_ns=0, realtime=False))
    assert [e.arrival_ts for e in out] == [0, 500_000, 1_000_000]


def test_replay_rejects_bad_rate():
    with pytest.raises(ValueError):
        list(replay(make_events(["A"]), 0.0))
    with pytest.raises(ValueError):
        StreamSource("synthetic", rate_pct=0)


def _stream(n=6000):
    return generate(SyntheticSpec.from_dict({"n_events": n, "types": ["A", "B", "C", "D"], "seed": 1}))


def test_heavier_query_has_lower_throughput():
    ev = _stream()
    light = seq_query("light", ["Z", "B"], ws=50, open_on=["Z"])
    heavy = seq_query("heavy", ["A", "B", "C", "D", "A"], ws=200, open_on=["A"])
    t_light = measure_max_throughput(Operator([light], observe_every=0, virtual=True), ev, warmup=1000, measure=3000)
    t_heavy = measure_max_throughput(Operator([heavy], observe_every=0, virtual=True), ev, warmup=1000, measure=3000)
    assert t_heavy.throughput_eps < t_light.throughput_eps
    assert t_light.mean_n_pm == 0


def test_calibration_needs_events():
    with pytest.raises(WorkloadTooShort):
        measure_max_throughput(Operator([seq_query("q", ["A", "B"])]), [], warmup=0, measure=10)


def test_unshed_overload_grows_queue():
    ev = _stream(4000)
    q = seq_query("q", ["A", "B", "C"], ws=100, open_on=["A"])
    cal = measure_max_throughput(Operator([q], observe_every=0, virtual=True), ev, warmup=500, measure=2000)
    op = Operator([q], observe_every=0, virtual=True)
    res = Runtime(op, clock=SimClock()).run(schedule(ev, cal.throughput_eps * 1.2, 0), queue_every=200)
    lengths = [n for _, n in res.queue_lengths]
    assert lengths[-1] > lengths[len(lengths) // 4] > 0
