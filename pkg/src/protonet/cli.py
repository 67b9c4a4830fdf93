"""Command-line entry point: benchmarks, topology/registry dumps, health
checks, and a small demo run.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional

from .errors import ProtocolError
from .runtime import RuntimeConfig
from .topology import (
    ConfigError,
    demo_specs,
    load_config,
    random_tree_specs,
    bring_up,
    registry_dump,
    registry_text,
    tick_all,
    topology_dump,
    topology_text,
)

MODEL_CHOICES = ("all", "monotone", "sequence", "pipeline", "super")


def _add_common(sub: argparse.ArgumentParser, *, random_tree: bool = False) -> None:
    sub.add_argument("--seed", type=int, default=0, help="seed for randomized topologies")
    sub.add_argument("--config", type=Path, default=None, help="topology config (JSON)")
    sub.add_argument("--timeout-ms", type=int, default=None, help="protocol timeout override")
    sub.add_argument("--out", type=Path, default=None, help="write output here instead of stdout")
    sub.add_argument("--format", choices=("csv", "json", "text"), default=None)
    if random_tree:
        sub.add_argument(
            "--random-nodes", type=int, default=None, help="build a seeded random tree of N nodes"
        )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protonet",
        description="Tree-connected protocol runtime: benchmarks and inspection",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    bench = sub.add_parser("bench", help="run the pipeline benchmark models")
    _add_common(bench)
    bench.add_argument("--model", choices=MODEL_CHOICES, default="all")
    bench.add_argument("--fmi", type=str, default=None, help="per-service burn counts a,b,c")
    bench.add_argument("--items", type=int, default=100)
    bench.add_argument("--repeats", type=int, default=5)

    topo = sub.add_parser("topo", help="print the topology tree")
    _add_common(topo, random_tree=True)

    registry = sub.add_parser("registry", help="print every node's service registry")
    _add_common(registry, random_tree=True)

    tick = sub.add_parser("tick", help="health-check every node")
    _add_common(tick, random_tree=True)

    demo = sub.add_parser("demo", help="run one item through each model and print traces")
    _add_common(demo)

    return parser


def _runtime_config(args) -> Optional[RuntimeConfig]:
    if args.timeout_ms is None:
        return None
    seconds = args.timeout_ms / 1000.0
    return RuntimeConfig(
        config_timeout=seconds,
        sweep_timeout=seconds,
        tick_timeout=seconds,
        teardown_timeout=seconds,
        registration_timeout=seconds,
        request_timeout=seconds,
    )


def _specs(args):
    if args.config is not None:
        return load_config(args.config)
    if getattr(args, "random_nodes", None):
        return random_tree_specs(args.seed, args.random_nodes)
    return demo_specs()


def _emit(args, text: str) -> None:
    if args.out is not None:
        args.out.write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _meta(args, **extra) -> dict:
    meta = {"command": args.command, "seed": args.seed}
    meta.update(extra)
    return meta


def _parse_fmi(raw: Optional[str]) -> Optional[tuple[int, int, int]]:
    if raw is None:
        return None
    parts = raw.split(",")
    if len(parts) != 3:
        raise ConfigError(f"--fmi wants three comma-separated counts, got {raw!r}")
    try:
        counts = tuple(int(p) for p in parts)
    except ValueError:
        raise ConfigError(f"--fmi counts must be integers: {raw!r}") from None
    return counts  # type: ignore[return-value]


def _cmd_bench(args) -> int:
    from .benchmark import BenchmarkConfig, PipelineModel, run_benchmark, rows_to_json, write_csv
    import io

    if args.config is not None:
        raise ConfigError("bench uses the built-in evaluation topology; --config is not accepted")
    cfg = BenchmarkConfig(items=args.items, repeats=args.repeats)
    fmi = _parse_fmi(args.fmi)
    if fmi is not None:
        cfg = replace(cfg, fmi=fmi)
    if args.timeout_ms is not None:
        cfg = replace(cfg, request_timeout=args.timeout_ms / 1000.0)
    models = list(PipelineModel) if args.model == "all" else [PipelineModel(args.model)]
    if args.model != "all" and args.model != "monotone":
        models.insert(0, PipelineModel.MONOTONE)  # speedup baseline
    result = run_benchmark(cfg, models)
    rows = result.rows()
    fmt = args.format or "csv"
    if fmt == "json":
        _emit(args, rows_to_json(rows, _meta(args, model=args.model, fmi=list(cfg.fmi))))
    else:
        buffer = io.StringIO()
        write_csv(rows, buffer)
        _emit(args, buffer.getvalue())
    return 0


def _cmd_topo(args) -> int:
    with bring_up(_specs(args), _runtime_config(args)) as net:
        dump = topology_dump(net)
        if (args.format or "text") == "json":
            _emit(args, json.dumps({"meta": _meta(args), **dump}, sort_keys=True, indent=2) + "\n")
        else:
            _emit(args, topology_text(dump) + "\n")
    return 0


def _cmd_registry(args) -> int:
    with bring_up(_specs(args), _runtime_config(args)) as net:
        dump = registry_dump(net)
        if (args.format or "text") == "json":
            _emit(args, json.dumps({"meta": _meta(args), **dump}, sort_keys=True, indent=2) + "\n")
        else:
            _emit(args, registry_text(dump) + "\n")
    return 0


def _cmd_tick(args) -> int:
    with bring_up(_specs(args), _runtime_config(args)) as net:
        reports = tick_all(net)
    failures = [r for r in reports if not r["ok"]]
    if (args.format or "text") == "json":
        _emit(
            args,
            json.dumps({"meta": _meta(args), "reports": reports}, sort_keys=True, indent=2) + "\n",
        )
    else:
        lines = []
        for report in reports:
            if report["ok"]:
                lines.append(
                    f"OK {report['address']} state={report['state']}"
                    f" hops={report['round_trip_hops']}"
                )
            else:
                lines.append(f"FAIL {report['address']} error={report['error']}")
        _emit(args, "\n".join(lines) + "\n")
    return 1 if failures else 0


def _cmd_demo(args) -> int:
    from .benchmark import BenchmarkConfig, PipelineModel, run_model_detailed

    cfg = BenchmarkConfig(items=1, repeats=1)
    if args.timeout_ms is not None:
        cfg = replace(cfg, request_timeout=args.timeout_ms / 1000.0)
    lines = ["demo: one item through each model", ""]
    trace_tail: list[str] = []
    for model in PipelineModel:
        timing, artifacts = run_model_detailed(model, cfg)
        item, value = artifacts.sink[0]
        lines.append(f"{model.value:<10} {timing.median_ms:9.3f} ms   sink item={item} value={value!r}")
        if artifacts.trace_tail:
            trace_tail = artifacts.trace_tail
    lines.append("")
    lines.append("trace (last model, tail):")
    lines.extend(trace_tail[-40:])
    _emit(args, "\n".join(lines) + "\n")
    return 0


_COMMANDS = {
    "bench": _cmd_bench,
    "topo": _cmd_topo,
    "registry": _cmd_registry,
    "tick": _cmd_tick,
    "demo": _cmd_demo,
}


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ProtocolError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
