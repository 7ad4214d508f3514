"""Learned PM utility: Markov chain completion probability over a Markov
reward process for remaining processing time.

Per query, observations ``(from_state, to_state, t_ns)`` are counted into a
row-stochastic transition matrix ``T`` (one step = one event in a window)
and a reward matrix ``R`` of mean matching times.  For a PM in state ``i``
with ``r`` events left in its window:

* completion probability ``P(i, r) = (T^r)[i, final]``
* remaining time ``tau(i, r)`` from the finite-horizon recursion
  ``tau_j = sum_k T[i,k] * (R[i,k] + tau_{j-1}[k])`` with the final state
  pinned to zero,
* utility ``U = weight * P_scaled / tau_scaled``.

Grids are kept only every ``bs`` remaining events and read back by linear
interpolation.
"""

from __future__ import annotations

import json
import logging
import math
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

EPS = 1e-6
ROW_TOL = 1e-12
MAX_BINS = 1024
DEFAULT_THETA = 0.01

KEEP = "keep"
RETRAIN = "retrain"


class InsufficientStatistics(ValueError):
    def __init__(self, state: int, query: str | int | None = None):
        where = f" of query {query}" if query is not None else ""
        super().__init__(f"insufficient statistics: state {state}{where} has no observations")
        self.state = state
        self.query = query


def default_bin_size(ws: int) -> int:
    return max(1, math.ceil(ws / MAX_BINS))


@dataclass
class ObservationStats:
    """Transition counts and matching-time sums of one query."""

    m: int
    counts: np.ndarray = field(default=None)  # type: ignore[assignment]
    time_sum: np.ndarray = field(default=None)  # type: ignore[assignment]
    seen: int = 0

    def __post_init__(self) -> None:
        if self.counts is None:
            self.counts = np.zeros((self.m, self.m), np.int64)
        if self.time_sum is None:
            self.time_sum = np.zeros((self.m, self.m), np.float64)

    def add_many(self, obs: np.ndarray) -> None:
        """Accumulate an ``(n, 3)`` array of ``from, to, t_ns`` rows."""
        if len(obs) == 0:
            return
        s = obs[:, 0].astype(np.intp)
        s2 = obs[:, 1].astype(np.intp)
        np.add.at(self.counts, (s, s2), 1)
        np.add.at(self.time_sum, (s, s2), obs[:, 2].astype(np.float64))
        self.seen += len(obs)

    def copy(self) -> "ObservationStats":
        return ObservationStats(self.m, self.counts.copy(), self.time_sum.copy(), self.seen)


def accumulate(obs, stats: ObservationStats) -> ObservationStats:
    """Fold one observation ``(from_state, to_state, t_ns)`` into ``stats``."""
    s, s2, t = obs[-3], obs[-2], obs[-1]
    if not (0 <= s < stats.m and 0 <= s2 < stats.m):
        raise ValueError(f"observation states {s}->{s2} outside 0..{stats.m - 1}")
    if t < 0:
        raise ValueError("negative processing time")
    stats.counts[s, s2] += 1
    stats.time_sum[s, s2] += t
    stats.seen += 1
    return stats


def estimate_matrix(stats: ObservationStats, query: str | int | None = None) -> np.ndarray:
    """Row-normalised transition counts with an absorbing final state."""
    m = stats.m
    counts = stats.counts.astype(np.float64)
    T = np.zeros((m, m))
    for i in range(m - 1):
        total = counts[i].sum()
        if total <= 0:
            raise InsufficientStatistics(i, query)
        T[i] = counts[i] / total
    T[m - 1, m - 1] = 1.0
    T /= T.sum(axis=1, keepdims=True)
    return T


def reward_matrix(stats: ObservationStats) -> np.ndarray:
    """Mean observed time per transition; unobserved cells take the mean of observed cells."""
    observed = stats.counts > 0
    R = np.zeros_like(stats.time_sum)
    R[observed] = stats.time_sum[observed] / stats.counts[observed]
    fill = R[observed].mean() if observed.any() else 0.0
    R[~observed] = fill
    return R


def bin_points(ws: int, bs: int) -> np.ndarray:
    """Remaining-event counts at which grids are stored: 0, bs, 2bs, ..., ws."""
    if ws <= 0 or bs <= 0:
        raise ValueError("ws and bs must be > 0")
    pts = list(range(0, ws + 1, bs))
    if pts[-1] != ws:
        pts.append(ws)
    return np.asarray(pts, dtype=np.int64)


def completion_probabilities(T: np.ndarray, ws: int, bs: int) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(points, P)`` with ``P[i, j] = (T^points[j])[i, final]``."""
    m = T.shape[0]
    points = bin_points(ws, bs)
    P = np.empty((m, len(points)))
    v = np.zeros(m)
    v[m - 1] = 1.0
    P[:, 0] = v
    Tb = np.linalg.matrix_power(T, bs)
    for j in range(1, len(points)):
        step = int(points[j] - points[j - 1])
        v = (Tb if step == bs else np.linalg.matrix_power(T, step)) @ v
        P[:, j] = v
    np.clip(P, 0.0, 1.0, out=P)
    return points, P


def value_iteration(T: np.ndarray, R: np.ndarray, ws: int, bs: int) -> tuple[np.ndarray, np.ndarray]:
    """Expected remaining processing time ``tau[i, j]`` with ``points[j]`` events left."""
    m = T.shape[0]
    points = bin_points(ws, bs)
    tau = np.zeros((m, len(points)))
    expected_cost = (T * R).sum(axis=1)
    v = np.zeros(m)
    j = 1
    for r in range(1, ws + 1):
        v = expected_cost + T @ v
        v[m - 1] = 0.0
        if r == points[j]:
            tau[:, j] = v
            j += 1
    return points, tau


@dataclass
class UtilityTable:
    """Utility grid of one query, indexed ``[state, bin]``.

    ``utility`` is ``w * P_scaled / tau_scaled``; ``utility_p`` drops the
    time denominator (probability-only ranking).
    """

    query_id: str
    weight: float
    ws: int
    bs: int
    points: np.ndarray
    P: np.ndarray
    tau: np.ndarray
    utility: np.ndarray
    utility_p: np.ndarray
    p_scale: float
    tau_scale: float
    T: np.ndarray | None = None
    R: np.ndarray | None = None
    _warned: bool = field(default=False, repr=False, compare=False)

    @property
    def m(self) -> int:
        return self.utility.shape[0]

    def grid(self, probability_only: bool = False) -> np.ndarray:
        return self.utility_p if probability_only else self.utility

    def to_dict(self) -> dict:
        out = {
            "query_id": self.query_id,
            "weight": self.weight,
            "ws": self.ws,
            "bs": self.bs,
            "p_scale": self.p_scale,
            "tau_scale": self.tau_scale,
        }
        for name in ("points", "P", "tau", "utility", "utility_p", "T", "R"):
            val = getattr(self, name)
            out[name] = None if val is None else np.asarray(val).tolist()
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "UtilityTable":
        arrays = {
            k: (None if raw.get(k) is None else np.asarray(raw[k], dtype=np.float64))
            for k in ("P", "tau", "utility", "utility_p", "T", "R")
        }
        return cls(
            query_id=raw["query_id"],
            weight=float(raw["weight"]),
            ws=int(raw["ws"]),
            bs=int(raw["bs"]),
            points=np.asarray(raw["points"], dtype=np.int64),
            p_scale=float(raw["p_scale"]),
            tau_scale=float(raw["tau_scale"]),
            **arrays,
        )


def scale_factors(P_grids: Iterable[np.ndarray], tau_grids: Iterable[np.ndarray]) -> tuple[float, float]:
    p_max = max((float(g.max()) for g in P_grids), default=0.0)
    tau_max = max((float(g.max()) for g in tau_grids), default=0.0)
    return p_max, tau_max


def build_utility_table(
    P: np.ndarray,
    tau: np.ndarray,
    weight: float,
    *,
    points: np.ndarray | None = None,
    query_id: str = "",
    ws: int | None = None,
    bs: int = 1,
    p_scale: float | None = None,
    tau_scale: float | None = None,
) -> UtilityTable:
    """Combine completion probabilities and remaining times into utilities.

    Both grids are divided by their maxima (``p_scale``/``tau_scale``; pass
    shared values to put several queries on one scale) and floored at
    ``EPS``.  Cells with zero remaining time carry no cost signal and use a
    denominator of 1.
    """
    if P.shape != tau.shape:
        raise ValueError("P and tau grids differ in shape")
    if weight <= 0:
        raise ValueError("weight must be > 0")
    if p_scale is None or tau_scale is None:
        ps, ts = scale_factors([P], [tau])
        p_scale = ps if p_scale is None else p_scale
        tau_scale = ts if tau_scale is None else tau_scale
    p_scaled = np.maximum(P / p_scale, EPS) if p_scale > 0 else np.full_like(P, EPS)
    if tau_scale > 0:
        tau_scaled = np.where(tau > 0, np.maximum(tau / tau_scale, EPS), 1.0)
    else:
        log.info("remaining-time grid of %s is all zero; ranking by probability alone", query_id)
        tau_scaled = np.ones_like(tau)
    if points is None:
        points = np.arange(P.shape[1], dtype=np.int64) * bs
    return UtilityTable(
        query_id=query_id,
        weight=float(weight),
        ws=int(points[-1] if ws is None else ws),
        bs=bs,
        points=np.asarray(points),
        P=P,
        tau=tau,
        utility=weight * p_scaled / tau_scaled,
        utility_p=weight * p_scaled,
        p_scale=float(p_scale),
        tau_scale=float(tau_scale),
    )


def lookup_utility(table: UtilityTable, state: int, remaining: float, probability_only: bool = False) -> float:
    """Utility of a PM in ``state`` with ``remaining`` events left, interpolated between bins."""
    grid = table.utility_p if probability_only else table.utility
    last = len(table.points) - 1
    idx = int(remaining // table.bs)
    if idx >= last:
        if remaining > table.ws and not table._warned:
            log.warning("remaining events %s exceed window size %s; clamping", remaining, table.ws)
            table._warned = True
        return float(grid[state, last])
    lo = table.points[idx]
    frac = (remaining - lo) / (table.points[idx + 1] - lo)
    a = grid[state, idx]
    return float(a + frac * (grid[state, idx + 1] - a))


def lookup_many(
    table: UtilityTable, states: np.ndarray, remaining: np.ndarray, probability_only: bool = False
) -> np.ndarray:
    """Vectorised :func:`lookup_utility`."""
    grid = table.utility_p if probability_only else table.utility
    last = len(table.points) - 1
    rem = np.clip(remaining, 0, table.ws)
    idx = np.minimum((rem // table.bs).astype(np.intp), last)
    nxt = np.minimum(idx + 1, last)
    lo = table.points[idx]
    span = table.points[nxt] - lo
    frac = np.where(span > 0, (rem - lo) / np.where(span > 0, span, 1), 0.0)
    a = grid[states, idx]
    return a + frac * (grid[states, nxt] - a)


def mse(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean((np.asarray(a) - np.asarray(b)) ** 2))


@dataclass
class DriftResult:
    decision: str
    mse: float | None
    reason: str = ""


def drift_check(
    current_T: np.ndarray, fresh: ObservationStats, *, threshold: float = DEFAULT_THETA, min_obs: int = 1
) -> DriftResult:
    """Compare the model's matrix with one estimated from fresh observations.

    Too few fresh observations, or a state never visited in them, defers
    the decision (``keep``).
    """
    if fresh.seen < min_obs:
        return DriftResult(KEEP, None, "deferred: too few observations")
    try:
        candidate = estimate_matrix(fresh)
    except InsufficientStatistics as exc:
        return DriftResult(KEEP, None, f"deferred: {exc}")
    err = mse(current_T, candidate)
    return DriftResult(RETRAIN if err > threshold else KEEP, err)


@dataclass
class QueryModel:
    query_id: str
    m: int
    weight: float
    ws: int
    bs: int
    T: np.ndarray
    R: np.ndarray
    points: np.ndarray
    P: np.ndarray
    tau: np.ndarray


def fit_query(stats: ObservationStats, query_id: str, weight: float, ws: int, bs: int) -> QueryModel:
    T = estimate_matrix(stats, query_id)
    R = reward_matrix(stats)
    points, P = completion_probabilities(T, ws, bs)
    _, tau = value_iteration(T, R, ws, bs)
    return QueryModel(query_id, stats.m, weight, ws, bs, T, R, points, P, tau)


def tables_from_models(models: Sequence[QueryModel]) -> list[UtilityTable]:
    """Utility tables for several queries on one shared scale."""
    p_scale, tau_scale = scale_factors([qm.P for qm in models], [qm.tau for qm in models])
    out = []
    for qm in models:
        ut = build_utility_table(
            qm.P, qm.tau, qm.weight, points=qm.points, query_id=qm.query_id,
            ws=qm.ws, bs=qm.bs, p_scale=p_scale, tau_scale=tau_scale,
        )
        ut.T, ut.R = qm.T, qm.R
        out.append(ut)
    return out


def build_model(
    stats: Sequence[ObservationStats],
    query_ids: Sequence[str],
    ws: Sequence[int],
    weights: Sequence[float],
    bs: Sequence[int] | None = None,
) -> tuple[list[UtilityTable], dict[int, Exception]]:
    """Fit every query and return its utility table (``None`` where fitting failed)."""
    models: list[QueryModel | None] = []
    errors: dict[int, Exception] = {}
    for i, st in enumerate(stats):
        b = bs[i] if bs is not None else default_bin_size(ws[i])
        try:
            models.append(fit_query(st, query_ids[i], weights[i], ws[i], b))
        except InsufficientStatistics as exc:
            errors[i] = exc
            models.append(None)
    ok = [qm for qm in models if qm is not None]
    tables = iter(tables_from_models(ok))
    return [next(tables) if qm is not None else None for qm in models], errors


class ModelBuilder:
    """Accumulates observations, builds utility tables and watches for drift.

    The published table set (``tables``) is replaced by a single reference
    assignment, so readers always see a complete snapshot.  Before the
    first build observations feed the training statistics; afterwards they
    feed a fresh window that is compared with the model every ``eta``
    observations per query.
    """

    def __init__(
        self,
        machines_m: Sequence[int],
        query_ids: Sequence[str],
        weights: Sequence[float],
        ws: Sequence[int],
        *,
        bs: Sequence[int] | int | None = None,
        eta: Sequence[int] | int | None = None,
        theta: float = DEFAULT_THETA,
    ):
        n = len(machines_m)
        self.query_ids = list(query_ids)
        self.weights = list(weights)
        self.ws = list(ws)
        if bs is None:
            self.bs = [default_bin_size(w) for w in self.ws]
        elif isinstance(bs, int):
            self.bs = [bs] * n
        else:
            self.bs = list(bs)
        if eta is None:
            self.eta = [10 * w for w in self.ws]
        elif isinstance(eta, int):
            self.eta = [eta] * n
        else:
            self.eta = list(eta)
        self.theta = theta
        self.stats = [ObservationStats(m) for m in machines_m]
        self.fresh = [ObservationStats(m) for m in machines_m]
        self.models: list[QueryModel | None] = [None] * n
        self.tables: tuple[UtilityTable | None, ...] = (None,) * n
        self.retrains = [0] * n
        self.drift_log: list[tuple[int, int, DriftResult]] = []
        self.build_seconds: list[float] = []
        self._lock = threading.Lock()

    @property
    def ready(self) -> bool:
        return all(t is not None for t in self.tables)

    def ingest(self, observations: Sequence[tuple[int, int, int, int]]) -> None:
        if not observations:
            return
        arr = np.asarray(observations, dtype=np.int64)
        with self._lock:
            for qi in range(len(self.stats)):
                sel = arr[arr[:, 0] == qi][:, 1:]
                if len(sel) == 0:
                    continue
                target = self.fresh[qi] if self.models[qi] is not None else self.stats[qi]
                target.add_many(sel)

    def build(self, *, force: bool = False) -> dict[int, Exception]:
        """Fit every query that has ``eta`` observations (all of them with ``force``)."""
        t0 = time.perf_counter()
        errors: dict[int, Exception] = {}
        with self._lock:
            models = list(self.models)
            for qi, st in enumerate(self.stats):
                if not force and st.seen < self.eta[qi]:
                    errors[qi] = InsufficientStatistics(-1, self.query_ids[qi])
                    continue
                try:
                    models[qi] = fit_query(st, self.query_ids[qi], self.weights[qi], self.ws[qi], self.bs[qi])
                except InsufficientStatistics as exc:
                    errors[qi] = exc
            self._publish(models)
        self.build_seconds.append(time.perf_counter() - t0)
        return errors

    def _publish(self, models: list[QueryModel | None]) -> None:
        ok = [qm for qm in models if qm is not None]
        fresh_tables = iter(tables_from_models(ok))
        self.models = models
        self.tables = tuple(next(fresh_tables) if qm is not None else None for qm in models)

    def check_drift(self) -> list[int]:
        """Run the drift test for queries with ``eta`` fresh observations; return retrained ones."""
        retrained = []
        with self._lock:
            models = list(self.models)
            for qi, fresh in enumerate(self.fresh):
                qm = models[qi]
                if qm is None or fresh.seen < self.eta[qi]:
                    continue
                result = drift_check(qm.T, fresh, threshold=self.theta, min_obs=self.eta[qi])
                self.drift_log.append((qi, fresh.seen, result))
                if result.decision == RETRAIN:
                    models[qi] = fit_query(fresh, self.query_ids[qi], self.weights[qi], self.ws[qi], self.bs[qi])
                    self.stats[qi] = fresh
                    self.retrains[qi] += 1
                    retrained.append(qi)
                if result.mse is not None or result.decision == RETRAIN:
                    self.fresh[qi] = ObservationStats(fresh.m)
            if retrained:
                self._publish(models)
        return retrained

    def dump(self, path: str | Path) -> None:
        payload = {
            "format": "cepshed-model/1",
            "queries": [t.to_dict() if t is not None else None for t in self.tables],
        }
        Path(path).write_text(json.dumps(payload))


def load_tables(path: str | Path) -> tuple[UtilityTable | None, ...]:
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != "cepshed-model/1":
        raise ValueError(f"{path}: not a model dump")
    return tuple(UtilityTable.from_dict(q) if q is not None else None for q in payload["queries"])
