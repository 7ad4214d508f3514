"""Regression models mapping the number of live PMs to latencies.

``f(n)`` predicts the processing latency of one event with ``n`` live PMs,
``g(n)`` the latency of one shedding pass.  Candidate families (linear,
quadratic, power law) are fitted by least squares and the one with the
lowest mean squared error wins.  ``f`` must be invertible, so only
non-decreasing fits are eligible for it; if none is, the best fit is
replaced by its running maximum on a grid.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

FAMILIES = ("linear", "quadratic", "power")
MIN_SAMPLES = 30


class InsufficientSamples(ValueError):
    pass


@dataclass
class Curve:
    family: str
    coef: tuple[float, ...]
    mse: float
    n_hi: float
    grid_x: np.ndarray | None = None
    grid_y: np.ndarray | None = None

    def __call__(self, n: float) -> float:
        if self.family == "linear":
            a, b = self.coef
            y = a + b * n
        elif self.family == "quadratic":
            a, b, c = self.coef
            y = a + (b + c * n) * n
        elif self.family == "power":
            a, b = self.coef
            y = a * n**b if n > 0 else 0.0
        elif self.family == "constant":
            y = self.coef[0]
        else:  # isotonic grid
            y = float(np.interp(n, self.grid_x, self.grid_y))
            if n > self.grid_x[-1]:
                slope = (self.grid_y[-1] - self.grid_y[0]) / max(self.grid_x[-1] - self.grid_x[0], 1.0)
                y = self.grid_y[-1] + slope * (n - self.grid_x[-1])
        return y if y > 0.0 else 0.0

    def predict(self, n: np.ndarray) -> np.ndarray:
        return np.array([self(float(v)) for v in np.asarray(n, dtype=float)])

    def is_monotone(self, hi: float | None = None) -> bool:
        xs = np.linspace(0.0, hi if hi is not None else self.n_hi, 257)
        ys = self.predict(xs)
        return bool(np.all(np.diff(ys) >= -1e-9 * max(1.0, float(np.abs(ys).max()))))

    def inverse(self, y: float) -> float:
        """Largest ``n >= 0`` with ``f(n) <= y`` (0 when even ``f(0) > y``)."""
        if y <= self(0.0):
            return 0.0
        if self.family == "linear":
            a, b = self.coef
            return float("inf") if b <= 0 else (y - a) / b
        if self.family == "power":
            a, b = self.coef
            if a <= 0 or b <= 0:
                return float("inf")
            return (y / a) ** (1.0 / b)
        if self.family == "constant":
            return float("inf")
        # monotone bisection (quadratic and grid curves)
        lo, hi = 0.0, max(self.n_hi, 1.0)
        for _ in range(64):
            if self(hi) > y:
                break
            lo, hi = hi, hi * 2
        else:
            return float("inf")
        for _ in range(100):
            mid = 0.5 * (lo + hi)
            if self(mid) <= y:
                lo = mid
            else:
                hi = mid
            if hi - lo < 1e-6 * max(1.0, hi):
                break
        return lo


def _fit_family(family: str, n: np.ndarray, y: np.ndarray, n_hi: float) -> Curve | None:
    if family == "linear":
        A = np.column_stack([np.ones_like(n), n])
    elif family == "quadratic":
        if len(np.unique(n)) < 3:
            return None
        A = np.column_stack([np.ones_like(n), n, n * n])
    elif family == "power":
        pos = (n > 0) & (y > 0)
        if pos.sum() < 2 or len(np.unique(n[pos])) < 2:
            return None
        slope, intercept = np.polyfit(np.log(n[pos]), np.log(y[pos]), 1)
        curve = Curve("power", (float(np.exp(intercept)), float(slope)), 0.0, n_hi)
        curve.mse = float(np.mean((curve.predict(n) - y) ** 2))
        return curve
    else:
        raise ValueError(family)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = A @ coef - y
    return Curve(family, tuple(float(c) for c in coef), float(np.mean(resid**2)), n_hi)


def fit_curve(samples: Sequence[tuple[float, float]], *, monotone: bool = False) -> Curve:
    """Best-MSE curve through ``(n_pm, latency_ns)`` samples."""
    arr = np.asarray(samples, dtype=float)
    if arr.ndim != 2 or len(arr) == 0:
        raise InsufficientSamples("no samples")
    n, y = arr[:, 0], arr[:, 1]
    n_hi = float(n.max()) if n.max() > 0 else 1.0
    if len(np.unique(n)) < 2:
        return Curve("constant", (float(y.mean()),), float(np.var(y)), n_hi)
    fits = [c for c in (_fit_family(f, n, y, n_hi) for f in FAMILIES) if c is not None]
    fits.sort(key=lambda c: c.mse)
    if not monotone:
        return fits[0]
    check_hi = 2.0 * n_hi
    for c in fits:
        if c.is_monotone(check_hi):
            return c
    best = fits[0]
    xs = np.linspace(0.0, check_hi, 513)
    ys = np.maximum.accumulate(best.predict(xs))
    log.info("no monotone family fits; using isotonic adjustment of %s", best.family)
    return Curve("isotonic", best.coef, best.mse, n_hi, xs, ys)


@dataclass
class LatencyModel:
    f: Curve
    g: Curve

    def processing(self, n_pm: float) -> float:
        return self.f(n_pm)

    def shedding(self, n_pm: float) -> float:
        return self.g(n_pm)

    def f_inverse(self, latency_ns: float) -> float:
        return self.f.inverse(latency_ns)

    def to_dict(self) -> dict:
        def one(c: Curve) -> dict:
            out = {"family": c.family, "coef": list(c.coef), "mse": c.mse, "n_hi": c.n_hi}
            if c.grid_x is not None:
                out["grid_x"] = c.grid_x.tolist()
                out["grid_y"] = c.grid_y.tolist()
            return out

        return {"f": one(self.f), "g": one(self.g)}

    @classmethod
    def from_dict(cls, raw: dict) -> "LatencyModel":
        def one(d: dict) -> Curve:
            gx = np.asarray(d["grid_x"]) if "grid_x" in d else None
            gy = np.asarray(d["grid_y"]) if "grid_y" in d else None
            return Curve(d["family"], tuple(d["coef"]), d["mse"], d["n_hi"], gx, gy)

        return cls(one(raw["f"]), one(raw["g"]))


def fit_latency_models(
    processing: Sequence[tuple[float, float]],
    shedding: Sequence[tuple[float, float]] = (),
    *,
    min_samples: int = MIN_SAMPLES,
) -> LatencyModel:
    """Fit ``f`` (monotone) from processing samples and ``g`` from shedding samples.

    Raises :class:`InsufficientSamples` with fewer than ``min_samples``
    processing samples.  Without shedding samples ``g`` is the zero curve.
    """
    if len(processing) < min_samples:
        raise InsufficientSamples(f"need {min_samples} processing samples, got {len(processing)}")
    f = fit_curve(processing, monotone=True)
    if len(shedding) >= 3:
        g = fit_curve(shedding)
    else:
        g = Curve("constant", (float(np.mean([s[1] for s in shedding])) if shedding else 0.0,), 0.0, 1.0)
    return LatencyModel(f, g)
