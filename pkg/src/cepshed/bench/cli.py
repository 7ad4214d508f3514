"""``cepshed`` command line: calibrate, train, run, sweep, report."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

import yaml

from ..metrics import read_report, write_report
from ..model import load_tables
from ..runtime import ModelNotReady, ShedRecord, SimClock, WallClock
from ..shedding import STRATEGIES, normalize_strategy
from .config import ConfigError, ExperimentConfig, dump_config, load_config
from .experiment import (
    apply_costs,
    format_table,
    make_operator,
    new_builder,
    prepare,
    run_cell,
    run_experiment,
    summarize,
    train,
    write_outputs,
)

log = logging.getLogger("cepshed")


def _structured(value: str) -> Any:
    """A path to a YAML/JSON file, or inline YAML/JSON."""
    p = Path(value)
    if p.exists():
        return yaml.safe_load(p.read_text())
    return yaml.safe_load(value)


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    out: dict[str, Any] = {}
    if args.dataset:
        out["dataset"] = args.dataset
    if args.schema:
        out["schema"] = _structured(args.schema)
    if args.synthetic:
        out["synthetic"] = _structured(args.synthetic)
    if args.rate_pct:
        out["rates"] = list(args.rate_pct)
    if args.strategy:
        out["strategies"] = [normalize_strategy(s) for s in args.strategy]
    if args.seed is not None:
        out["seeds"] = list(args.seed)
    for flag, key in (
        ("eta", "eta"),
        ("bin_size", "bin_size"),
        ("drift_threshold", "drift_threshold"),
        ("latency_bound_ms", "latency_bound_ms"),
        ("safety_buffer_pct", "safety_buffer_pct"),
        ("clock", "clock"),
    ):
        value = getattr(args, flag)
        if value is not None:
            out[key] = value
    return out


def _config(args: argparse.Namespace) -> ExperimentConfig:
    return load_config(args.config, _overrides(args))


def _out(args: argparse.Namespace) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_calibrate(args: argparse.Namespace) -> int:
    cfg = _config(args)
    prep = prepare(cfg, cfg.run_seeds()[0])
    payload = {
        "throughput_eps": prep.throughput,
        "mean_n_pm": prep.calibration.mean_n_pm,
        "latency_model": prep.latency.to_dict(),
        "match_probability": prep.gt.match_probability,
        "injected_ns": prep.extra_ns,
    }
    (_out(args) / "calibration.json").write_text(json.dumps(payload, indent=2))
    print(f"max throughput {prep.throughput:.0f} events/s (mean {prep.calibration.mean_n_pm:.0f} PMs)")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _config(args)
    prep = prepare(cfg, cfg.run_seeds()[0])
    clock = SimClock() if cfg.virtual else WallClock()
    op = make_operator(cfg, prep.specs, observe_every=1)
    apply_costs(cfg, op)
    builder = new_builder(cfg, prep)
    res = train(cfg, prep, op, builder, clock, cfg.cost_model())
    if not builder.ready:
        print(f"model not ready after {res.consumed} events; raise the stream length or lower --eta", file=sys.stderr)
        return 2
    path = Path(args.dump_model) if args.dump_model else _out(args) / "model.json"
    builder.dump(path)
    print(f"trained on {res.consumed} events in {sum(builder.build_seconds):.3f}s of model building; wrote {path}")
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _config(args)
    out = _out(args)
    seed = cfg.run_seeds()[0]
    prep = prepare(cfg, seed if cfg.vary_stream else 0)
    tables = load_tables(args.load_model) if args.load_model else None
    replay = None
    if args.replay_log:
        replay = [ShedRecord(**r) for r in json.loads(Path(args.replay_log).read_text())]
    reports = []
    for rate in cfg.rates:
        for strategy in cfg.strategies:
            try:
                cell = run_cell(cfg, prep, strategy, rate, seed, tables=tables, replay_log=replay)
            except ModelNotReady as exc:
                print(f"{strategy} at {rate:g}%: {exc}", file=sys.stderr)
                return 2
            reports.append(cell.report)
            log_path = out / f"shed_log_{strategy}_{rate:g}.json"
            log_path.write_text(json.dumps([r.to_dict() for r in cell.shed_log]))
            if args.dump_model and cell.builder is not None and cell.builder.ready:
                cell.builder.dump(args.dump_model)
            r = cell.report
            print(
                f"{strategy:>9} {rate:>5g}%  FN% {r.fn_pct:6.2f}  violations {r.latency['violation_fraction']:.4f}  "
                f"shed% {r.overhead['shed_pct']:.2f}  sheds {r.sheds['count']}"
            )
    write_report(out / "reports.json", reports)
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = _config(args)
    out = _out(args)
    (out / "config.json").write_text(json.dumps(dump_config(cfg), indent=2, default=str))
    reports = run_experiment(cfg, out, progress=lambda r: log.info("%s %s done", r.strategy, r.params))
    print(format_table(summarize(reports)))
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    src = Path(args.reports)
    path = src / "reports.json" if src.is_dir() else src
    reports = read_report(path)
    rows = summarize(reports)
    print(format_table(rows))
    if args.out:
        write_outputs(_out(args), reports)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cepshed", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("config", help="experiment config (YAML or JSON)")
        p.add_argument("--out", default="runs/latest", help="run directory")
        p.add_argument("--dataset", help="CSV file to stream instead of the synthetic spec")
        p.add_argument("--schema", help="CSV schema (file or inline YAML/JSON)")
        p.add_argument("--synthetic", help="synthetic stream spec (file or inline YAML/JSON)")
        p.add_argument("--rate-pct", type=float, nargs="+", help="input rates, percent of max throughput")
        p.add_argument("--strategy", nargs="+", choices=list(STRATEGIES) + ["pm-bl", "e-bl"])
        p.add_argument("--latency-bound-ms", type=float)
        p.add_argument("--safety-buffer-pct", type=float)
        p.add_argument("--eta", type=int, help="observations per query before the model is built")
        p.add_argument("--bin-size", type=int)
        p.add_argument("--drift-threshold", type=float)
        p.add_argument("--clock", choices=("wall", "virtual"))
        p.add_argument("--seed", type=int, nargs="+")
        p.add_argument("--dump-model", help="write the trained utility tables here")
        p.add_argument("--load-model", help="use these utility tables and skip training")

    for name, fn, help_ in (
        ("calibrate", cmd_calibrate, "measure max throughput and fit the latency model"),
        ("train", cmd_train, "train utility tables and dump them"),
        ("run", cmd_run, "run the overload phase for each rate and strategy"),
        ("sweep", cmd_sweep, "run the config's sweep over all seeds"),
    ):
        p = sub.add_parser(name, help=help_)
        common(p)
        if name == "run":
            p.add_argument("--replay-log", help="apply the drops recorded in this shed log")
        p.set_defaults(func=fn)

    p = sub.add_parser("report", help="summarise a reports.json")
    p.add_argument("reports", help="reports.json or a run directory")
    p.add_argument("--out", help="write summary.csv and plot_data.csv here")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
