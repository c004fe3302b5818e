"""Command-line experiment runner.

Examples::

    partialfl --config exp.ini --seed 3 --out results/exp
    partialfl --config exp.ini --grid tau=0.05,0.1,0.2 --grid algorithm=partialfl,fedavg --out results/sweep
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .config import ConfigError, ExperimentConfig, FIELD_TYPES, convert_value, dump_config, parse_config, resolve_key
from .data import generate_synthetic, partition
from .federation import RoundReport, SeedStreams, run_experiment

logger = logging.getLogger("partialfl")

FORMATS = ("json_lines", "csv", "both")
CSV_FIXED_COLUMNS = ["round", "algorithm", "alpha", "q", "tau", "beta", "seed", "loss_glob", "loss_loc", "loss_server"]


@dataclass
class ReportDocument:
    config: ExperimentConfig
    rounds: list[RoundReport]
    final_metrics: dict[str, float]
    wall_clock_seconds: float = 0.0
    version: str = __version__
    grid_point: dict[str, Any] = field(default_factory=dict)
    best: bool | None = None

    @property
    def primary_metric(self) -> str:
        return self.config.metrics[0]

    def header(self) -> dict[str, Any]:
        return {
            "kind": "config",
            "config": self.config.to_dict(),
            "grid_point": self.grid_point,
            "final_metrics": self.final_metrics,
            "best": self.best,
            "version": self.version,
            "wall_clock_seconds": self.wall_clock_seconds,
        }


def run(config: ExperimentConfig, seed: int | None = None) -> ReportDocument:
    """Generate data, partition it, train, and collect per-round reports."""
    if seed is not None and seed != config.seed:
        config = config.with_overrides({"experiment.seed": seed})
    start = time.perf_counter()
    streams = SeedStreams(config.seed)
    data = generate_synthetic(config.data, streams.rng("data"))
    shards = [] if config.federation.algorithm == "centralized" else partition(data, config.partition, streams.rng("partition"))
    result = run_experiment(
        config.federation, shards, data.train(), data.test(), config.model, streams, config.metrics
    )
    return ReportDocument(config, result.reports, result.final_metrics, time.perf_counter() - start)


def _json_default(obj: Any) -> Any:
    if hasattr(obj, "tolist"):
        return obj.tolist()
    raise TypeError(f"not serialisable: {type(obj).__name__}")


def report_lines(doc: ReportDocument) -> list[str]:
    lines = [json.dumps(doc.header(), sort_keys=False, default=_json_default)]
    for r in doc.rounds:
        lines.append(json.dumps({"kind": "round", **r.to_dict()}, default=_json_default))
    return lines


def report_body(doc: ReportDocument) -> str:
    """JSON-lines text with the wall-clock field zeroed, for determinism checks."""
    header = doc.header()
    header["wall_clock_seconds"] = 0.0
    rows = [json.dumps(header, default=_json_default)] + report_lines(doc)[1:]
    return "\n".join(rows) + "\n"


def _cell(value: float | None) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return ""
    return repr(float(value))


def csv_rows(doc: ReportDocument) -> list[list[str]]:
    cfg = doc.config
    fed = cfg.federation
    header = CSV_FIXED_COLUMNS + list(cfg.metrics)
    rows = [header]
    for r in doc.rounds:
        row = [
            str(r.round),
            fed.algorithm,
            repr(cfg.partition.alpha),
            repr(cfg.partition.q),
            repr(fed.tau),
            repr(fed.beta),
            str(cfg.seed),
            _cell(r.loss_glob),
            _cell(r.loss_loc),
            _cell(r.loss_server),
        ]
        row += [_cell(r.metrics.get(m)) if r.metrics else "" for m in cfg.metrics]
        rows.append(row)
    return rows


def emit_report(doc: ReportDocument, fmt: str, path: str | Path) -> list[Path]:
    """Write ``<path>.jsonl`` and/or ``<path>.csv``; returns the files written."""
    if fmt not in FORMATS:
        raise ValueError(f"format must be one of {FORMATS}")
    base = Path(path)
    base.parent.mkdir(parents=True, exist_ok=True)
    written = []
    if fmt in ("json_lines", "both"):
        p = base.with_name(base.name + ".jsonl")
        with open(p, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(report_lines(doc)) + "\n")
        written.append(p)
    if fmt in ("csv", "both"):
        p = base.with_name(base.name + ".csv")
        with open(p, "w", encoding="utf-8", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(csv_rows(doc))
        written.append(p)
    return written


def load_report(path: str | Path) -> tuple[ExperimentConfig, list[dict[str, Any]]]:
    """Read a JSON-lines report back into its config and round records."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = json.loads(lines[0])
    return ExperimentConfig.from_dict(header["config"]), [json.loads(l) for l in lines[1:]]


def parse_grid(specs: Sequence[str]) -> list[tuple[str, list[Any]]]:
    """``["tau=0.05,0.1"]`` -> ``[("federation.tau", [0.05, 0.1])]`` with typed values."""
    axes = []
    for spec in specs:
        if "=" not in spec:
            raise ConfigError(f"grid entry {spec!r} must look like key=v1,v2")
        key, values = spec.split("=", 1)
        section, name = resolve_key(key.strip())
        if FIELD_TYPES[(section, name)] is tuple:
            raise ConfigError("list-valued keys cannot be swept", name)
        try:
            typed = [convert_value(section, name, v) for v in values.split(",") if v.strip()]
        except ValueError as exc:
            raise ConfigError(f"type error in grid: {exc}", name) from None
        if not typed:
            raise ConfigError("grid axis has no values", name)
        axes.append((f"{section}.{name}", typed))
    return axes


def expand_grid(config: ExperimentConfig, axes: list[tuple[str, list[Any]]]) -> list[tuple[dict[str, Any], ExperimentConfig]]:
    if not axes:
        return [({}, config)]
    points = []
    for combo in itertools.product(*(values for _, values in axes)):
        point = {key: value for (key, _), value in zip(axes, combo)}
        try:
            points.append((point, config.with_overrides(point)))
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"grid point {point} is invalid: {exc}") from None
    return points


def mark_best(docs: list[ReportDocument]) -> None:
    """Flag the grid point with the highest final primary metric (first wins ties)."""
    if len(docs) < 2:
        return
    scores = [d.final_metrics[d.primary_metric] for d in docs]
    top = max(range(len(docs)), key=lambda i: (scores[i], -i))
    for i, d in enumerate(docs):
        d.best = i == top


def _run_point(args: tuple[dict[str, Any], ExperimentConfig]) -> ReportDocument:
    point, cfg = args
    doc = run(cfg)
    doc.grid_point = point
    return doc


def _point_suffix(point: dict[str, Any]) -> str:
    return "__".join(f"{k.split('.')[-1]}={v}" for k, v in point.items())


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="partialfl", description="Simulate PartialFL and baseline FL training runs.")
    p.add_argument("--config", help="experiment config file (INI style); defaults apply when omitted")
    p.add_argument("--seed", type=int, help="master seed, overrides the config")
    p.add_argument("--grid", action="append", default=[], metavar="KEY=V1,V2", help="sweep a key; repeatable")
    p.add_argument("--out", help="output path prefix; overrides the config's output")
    p.add_argument("--format", choices=FORMATS, default="json_lines")
    p.add_argument("--jobs", type=int, default=1, help="grid points run in parallel processes")
    p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        config = parse_config(Path(args.config)) if args.config else ExperimentConfig()
        if args.seed is not None:
            config = config.with_overrides({"experiment.seed": args.seed})
        if args.print_config:
            sys.stdout.write(dump_config(config))
            return 0
        points = expand_grid(config, parse_grid(args.grid))
        if args.jobs > 1 and len(points) > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                docs = list(pool.map(_run_point, points))
        else:
            docs = [_run_point(p) for p in points]
        mark_best(docs)

        out = args.out or config.output
        for doc in docs:
            suffix = _point_suffix(doc.grid_point)
            if out:
                target = f"{out}__{suffix}" if suffix else out
                for f in emit_report(doc, args.format, target):
                    logger.info("wrote %s", f)
            flag = " *best*" if doc.best else ""
            metrics = " ".join(f"{k}={v:.4f}" for k, v in doc.final_metrics.items())
            print(f"{suffix or 'run'}: {metrics}{flag}")
        incomplete = [d for d in docs if len(d.rounds) != d.config.federation.rounds]
        return 1 if incomplete else 0
    except (ConfigError, ValueError, OSError, RuntimeError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
