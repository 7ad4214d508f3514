"""Load shedding for complex event processing driven by learned partial-match utility."""

from .engine import ComplexEvent, GroundTruth, Operator, ground_truth
from .events import Event, Schema, StreamSource, SyntheticSpec, generate, ingest_csv
from .latency import LatencyModel, fit_latency_models
from .model import ModelBuilder, UtilityTable, build_model, lookup_utility
from .patterns import QuerySpec, compile_query
from .shedding import ShedConfig, detect_overload
from .windowing import WindowSpec

__all__ = [
    "ComplexEvent",
    "Event",
    "GroundTruth",
    "LatencyModel",
    "ModelBuilder",
    "Operator",
    "QuerySpec",
    "Schema",
    "ShedConfig",
    "StreamSource",
    "SyntheticSpec",
    "UtilityTable",
    "WindowSpec",
    "build_model",
    "compile_query",
    "detect_overload",
    "fit_latency_models",
    "generate",
    "ground_truth",
    "ingest_csv",
    "lookup_utility",
]
__version__ = "0.1.0"
