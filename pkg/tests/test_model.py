import numpy as np
import pytest

from cepshed.engine import Operator
from cepshed.events import SyntheticSpec, generate
from cepshed.model import (
    EPS,
    KEEP,
    RETRAIN,
    InsufficientStatistics,
    ModelBuilder,
    ObservationStats,
    accumulate,
    build_model,
    build_utility_table,
    completion_probabilities,
    default_bin_size,
    drift_check,
    estimate_matrix,
    load_tables,
    lookup_many,
    lookup_utility,
    value_iteration,
)

from conftest import seq_query


def chain(stay=2 / 3, m=4):
    T = np.zeros((m, m))
    for i in range(m - 1):
        T[i, i], T[i, i + 1] = stay, 1 - stay
    T[m - 1, m - 1] = 1.0
    return T


def stats_from(T, n=3000, seed=0):
    rng = np.random.default_rng(seed)
    st = ObservationStats(T.shape[0])
    for i in range(T.shape[0] - 1):
        to = rng.choice(T.shape[0], size=n, p=T[i])
        st.add_many(np.column_stack([np.full(n, i), to, np.full(n, 10)]))
    return st


def test_accumulate_counts_and_times():
    st = ObservationStats(4)
    for obs in [(1, 1, 10), (1, 2, 5), (1, 1, 20)]:
        before = st.seen
        accumulate(obs, st)
        assert st.seen == before + 1
    assert st.counts[1].tolist() == [0, 2, 1, 0]
    assert st.time_sum[1, 1] == 30 and st.counts[1, 1] == 2
    with pytest.raises(ValueError):
        accumulate((0, 9, 1), st)


def test_estimate_matrix_rows():
    st = ObservationStats(4)
    st.counts[0] = [0, 1, 0, 0]
    st.counts[1] = [0, 2, 1, 0]
    st.counts[2] = [0, 0, 5, 0]
    T = estimate_matrix(st)
    assert T[1].tolist() == pytest.approx([0, 2 / 3, 1 / 3, 0])
    assert T[2].tolist() == [0, 0, 1, 0]
    _, P = completion_probabilities(T, 50, 1)
    assert np.all(P[2] == 0)
    st.counts[2] = 0
    with pytest.raises(InsufficientStatistics):
        estimate_matrix(st)


def test_uniform_stream_gives_two_thirds_one_third():
    # short disjoint windows keep observations from piling onto few events
    q = seq_query("q", ["A", "B", "C"], ws=6, every_k=6)
    op = Operator([q], virtual=True)
    ev = generate(SyntheticSpec.from_dict({"n_events": 100000, "types": ["A", "B", "C"], "seed": 2}))
    st = ObservationStats(4)
    for e in ev:
        op.process(e)
        if len(op.observations) > 30000:
            break
    st.add_many(np.asarray(op.drain_observations())[:30000, 1:])
    T = estimate_matrix(st)
    for i in (1, 2):
        assert T[i, i] == pytest.approx(2 / 3, abs=0.02)
        assert T[i, i + 1] == pytest.approx(1 / 3, abs=0.02)


def test_completion_probability_examples():
    _, P = completion_probabilities(chain(), 8, 1)
    assert np.all(P[3] == 1)
    assert P[2, 1] == pytest.approx(1 / 3)
    assert P[1, 2] == pytest.approx(1 / 9)
    assert P[1, 0] == 0


def test_value_iteration_example():
    T = np.array([[2 / 3, 1 / 3], [0, 1]])
    R = np.full((2, 2), 30.0)
    _, tau = value_iteration(T, R, 4, 1)
    assert tau[0, 0] == 0
    assert tau[0, 1] == pytest.approx(30)
    assert tau[0, 2] == pytest.approx(50)
    assert np.all(tau[1] == 0)


def test_utility_orderings():
    P = np.array([[0.5, 0.5], [0.5, 0.5], [0.0, 0.0]])
    tau = np.array([[1.0, 1.0], [2.0, 2.0], [1.0, 1.0]])
    ut = build_utility_table(P, tau, 1.0)
    assert ut.utility[0, 1] > ut.utility[1, 1]
    assert ut.utility[2, 1] == pytest.approx(EPS / 0.5)
    assert ut.utility[2, 1] < ut.utility.min(axis=None, initial=1, where=P > 0)
    u2 = build_utility_table(P, tau, 2.0)
    assert u2.utility[0, 1] / ut.utility[0, 1] == pytest.approx(2.0)


def test_lookup_interpolation():
    ws, bs = 300, 100
    P = np.array([[0.0, 0.2, 0.4, 0.8]])
    tau = np.ones_like(P)
    ut = build_utility_table(P, tau, 1.0, points=np.array([0, 100, 200, 300]), ws=ws, bs=bs)
    mid = lookup_utility(ut, 0, 150)
    assert mid == pytest.approx((ut.utility[0, 1] + ut.utility[0, 2]) / 2)
    assert lookup_many(ut, np.array([0]), np.array([150.0]))[0] == pytest.approx(mid)
    assert lookup_utility(ut, 0, 0) == pytest.approx(EPS)
    direct = build_utility_table(P, tau, 1.0, bs=1)
    assert lookup_utility(direct, 0, 2) == direct.utility[0, 2]


def test_drift_examples():
    T = chain(2 / 3)
    same = drift_check(T, stats_from(T, 20000))
    assert same.decision == KEEP and same.mse < 1e-3
    moved = chain(2 / 3)
    moved[1, 1], moved[1, 2] = 1 / 3, 2 / 3
    # one row shifts by 1/3 in two cells: mse = 2 (1/3)^2 / 16
    res = drift_check(T, stats_from(moved, 20000), threshold=0.01)
    assert res.decision == RETRAIN and res.mse >= 2 * (1 / 3) ** 2 / 16 * 0.8
    empty = ObservationStats(4)
    empty.counts[0, 1] = 5
    empty.seen = 5
    assert drift_check(T, empty).reason.startswith("deferred")


def test_build_model_and_partial_builder(tmp_path):
    T = chain()
    tables, errors = build_model([stats_from(T), stats_from(T, seed=1)], ["a", "b"], [100, 100], [1.0, 2.0])
    assert errors == {} and all(t is not None for t in tables)
    b = ModelBuilder([4, 4], ["a", "b"], [1.0, 1.0], [100, 100], eta=5000)
    obs_a = stats_from(T, 2000)
    b.stats[0] = obs_a
    b.build()
    assert b.tables[0] is not None and b.tables[1] is None
    assert default_bin_size(32_000) == 32
    path = tmp_path / "m.json"
    b.dump(path)
    loaded = load_tables(path)
    assert loaded[1] is None
    np.testing.assert_allclose(loaded[0].utility, b.tables[0].utility)
