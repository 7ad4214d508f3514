"""Experiment configuration, read from YAML or JSON.

A config names a workload (synthetic spec or CSV dataset), a query set,
the input rates as percentages of the calibrated throughput, the
strategies, the latency bound and the seeds.  An optional sweep varies one
axis: ``window_size``, ``pattern_size``, ``rate`` or ``tau_ratio``.

Queries may use the ``chain`` shorthand, which expands to a sequence over
symbols ``S{offset}``, ``S{offset+1}``, ... each guarded by
``attr == value``::

    {query_id: q1, chain: {symbols: 20, length: 10, offset: 0,
                           attr: rise, value: 1, lead: 1},
     window: {kind: count, size: 476}}

``lead`` makes the window open on the first ``lead`` symbols.
"""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from ..events import Schema, SyntheticSpec
from ..patterns import QuerySpec, compile_query
from ..runtime import CostModel
from ..shedding import normalize_strategy

AXES = ("window_size", "pattern_size", "rate", "tau_ratio")


class ConfigError(ValueError):
    pass


def expand_chain(raw: Mapping[str, Any]) -> dict[str, Any]:
    """Turn a ``chain`` shorthand query into a plain ``seq`` query dict."""
    raw = copy.deepcopy(dict(raw))
    chain = raw.pop("chain", None)
    if chain is None:
        return raw
    k = int(chain["symbols"])
    length = int(chain["length"])
    offset = int(chain.get("offset", 0))
    attr = chain.get("attr")
    prefix = chain.get("prefix", "S")
    steps = []
    for i in range(length):
        step: dict[str, Any] = {"type": f"{prefix}{(offset + i) % k}"}
        if attr is not None:
            step["where"] = [{"attr": attr, "op": "==", "value": chain.get("value", 1)}]
        steps.append(step)
    raw["operator"] = "seq"
    raw["steps"] = steps
    lead = chain.get("lead")
    if lead:
        window = raw.setdefault("window", {})
        opens = [f"{prefix}{(offset + i) % k}" for i in range(int(lead))]
        window["open"] = {"when": [{"attr": "event_type", "op": "in", "value": opens}]}
    return raw


@dataclass
class SweepSpec:
    axis: str
    values: list[float]
    query: str | None = None

    def __post_init__(self) -> None:
        if self.axis not in AXES:
            raise ConfigError(f"unknown sweep axis {self.axis!r}; choose from {', '.join(AXES)}")
        if not self.values:
            raise ConfigError("sweep needs at least one value")


@dataclass
class ExperimentConfig:
    name: str
    queries: list[dict[str, Any]]
    synthetic: dict[str, Any] | None = None
    dataset: str | None = None
    schema: dict[str, Any] | None = None
    derive_rising: dict[str, str] | None = None
    rates: list[float] = field(default_factory=lambda: [120.0])
    strategies: list[str] = field(default_factory=lambda: ["pspice", "pm_bl", "e_bl"])
    latency_bound_ms: float = 1000.0
    safety_buffer_pct: float = 5.0
    seeds: list[int] = field(default_factory=lambda: [0])
    repetitions: int = 1
    vary_stream: bool = True
    sweep: SweepSpec | None = None
    clock: str = "wall"
    cost: dict[str, float] = field(default_factory=dict)
    cost_multipliers: dict[str, float] = field(default_factory=dict)
    eta: int | None = None
    bin_size: int | None = None
    drift_threshold: float = 0.01
    drift: bool = True
    train_rate_pct: float = 50.0
    train_events: int | None = None
    overload_events: int | None = None
    calibration_warmup: int | None = None
    calibration_events: int = 2000
    max_seconds: float | None = None
    refit_every: int = 50
    e_bl_rule: str = "excess"
    observe_during_overload: int = 0

    def __post_init__(self) -> None:
        if not self.queries:
            raise ConfigError("config has no queries")
        if (self.synthetic is None) == (self.dataset is None):
            raise ConfigError("give exactly one of synthetic or dataset")
        if self.dataset is not None and self.schema is None:
            raise ConfigError("a dataset needs a schema")
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        if self.clock not in ("wall", "virtual"):
            raise ConfigError("clock must be 'wall' or 'virtual'")
        if any(r <= 0 for r in self.rates):
            raise ConfigError("rates must be > 0")
        if self.latency_bound_ms <= 0:
            raise ConfigError("latency bound must be > 0")
        self.strategies = [normalize_strategy(s) for s in self.strategies]
        if isinstance(self.sweep, Mapping):
            self.sweep = SweepSpec(**self.sweep)
        for name, mult in self.cost_multipliers.items():
            if mult < 1:
                raise ConfigError(f"cost multiplier for {name} must be >= 1")
        for spec in self.query_specs():
            compile_query(spec)

    # -- derived views -------------------------------------------------------

    @property
    def virtual(self) -> bool:
        return self.clock == "virtual"

    def query_specs(self) -> list[QuerySpec]:
        return [QuerySpec.from_dict(expand_chain(q)) for q in self.queries]

    def cost_model(self) -> CostModel:
        return CostModel(**{k: int(v) for k, v in self.cost.items()})

    def synthetic_spec(self, seed_offset: int = 0) -> SyntheticSpec:
        raw = dict(self.synthetic)
        raw["seed"] = int(raw.get("seed", 0)) + seed_offset
        return SyntheticSpec.from_dict(raw)

    def schema_obj(self) -> Schema:
        return Schema.from_dict(self.schema)

    def run_seeds(self) -> list[int]:
        """Explicit seeds, extended with consecutive ones up to ``repetitions``."""
        seeds = list(self.seeds)
        nxt = max(seeds) + 1 if seeds else 0
        while len(seeds) < self.repetitions:
            seeds.append(nxt)
            nxt += 1
        return seeds

    def at(self, value: float) -> "ExperimentConfig":
        """Copy of this config with the sweep axis set to ``value``."""
        if self.sweep is None:
            return self
        out = dataclasses.replace(self, queries=copy.deepcopy(self.queries), sweep=None)
        out.cost_multipliers = dict(self.cost_multipliers)
        axis, target = self.sweep.axis, self.sweep.query
        chosen = [q for q in out.queries if target is None or q["query_id"] == target]
        if not chosen:
            raise ConfigError(f"sweep query {target!r} not in config")
        if axis == "rate":
            out.rates = [float(value)]
        elif axis == "window_size":
            for q in chosen:
                q["window"]["size"] = int(value)
        elif axis == "pattern_size":
            for q in chosen:
                if "chain" in q:
                    q["chain"]["length"] = int(value)
                elif len(q.get("steps", [])) >= int(value):
                    q["steps"] = q["steps"][: int(value)]
                else:
                    raise ConfigError(f"query {q['query_id']} has fewer than {int(value)} steps")
        elif axis == "tau_ratio":
            if target is None:
                raise ConfigError("a tau_ratio sweep needs sweep.query")
            out.cost_multipliers[target] = float(value)
        out.__post_init__()
        return out

    def points(self) -> list[tuple[float | None, "ExperimentConfig"]]:
        if self.sweep is None:
            return [(None, self)]
        return [(v, self.at(v)) for v in self.sweep.values]


_FIELDS = {f.name for f in dataclasses.fields(ExperimentConfig)}


def config_from_dict(raw: Mapping[str, Any]) -> ExperimentConfig:
    unknown = set(raw) - _FIELDS
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    if "queries" not in raw or "name" not in raw:
        raise ConfigError("config needs 'name' and 'queries'")
    return ExperimentConfig(**dict(raw))


def load_config(path: str | Path, overrides: Mapping[str, Any] | None = None) -> ExperimentConfig:
    """Read a YAML or JSON config (JSON is valid YAML) and apply flag overrides."""
    raw = yaml.safe_load(Path(path).read_text())
    if not isinstance(raw, Mapping):
        raise ConfigError(f"{path}: expected a mapping at top level")
    raw = dict(raw)
    for key, value in (overrides or {}).items():
        if value is not None:
            raw[key] = value
            # a dataset and a synthetic spec exclude each other
            if key in ("dataset", "synthetic"):
                raw.pop("synthetic" if key == "dataset" else "dataset", None)
    return config_from_dict(raw)


def dump_config(cfg: ExperimentConfig) -> dict[str, Any]:
    out = dataclasses.asdict(cfg)
    return {k: v for k, v in out.items() if v is not None}
