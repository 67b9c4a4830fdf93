"""Benchmark domain: three floating-multiply burn services chained as
Service1 -> Service2 -> Service3, executed under four models (monotone,
sequence, pipeline, super pipeline) and timed against each other.
"""
from __future__ import annotations

import json
import statistics
import sys
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Optional, Sequence, TextIO

import numba

from .errors import ProtocolError
from .runtime import Runtime, RuntimeConfig
from .service import (
    ExecutionMode,
    Forward,
    RequestMode,
    ServiceDescription,
    ServiceNode,
    ServiceRequest,
)
from .transmission import NodeRole

DEFAULT_FMI = (1_000_000, 2_000_000, 1_000_000)

STAGE_SERVICES = ("Service1", "Service2", "Service3")


@numba.njit("float64(float64, int64)", nogil=True, cache=True)
def _multiply_chain(x: float, n: int) -> float:
    c = 1.0000001
    for _ in range(n):
        x = x * c
    return x


def fmi_burn(n: int, start: float = 1.0) -> float:
    """Run a chain of n dependent floating multiplies from `start`.

    The chain is dependent so a single call cannot be parallelized away;
    runtime scales linearly in n. The result is returned (and shipped in ACK
    payloads) so the work cannot be elided.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    return _multiply_chain(start, n)


@dataclass(frozen=True)
class FmiWorkload:
    """Synthetic work unit: a count of floating multiply iterations."""

    fmi_count: int

    def __post_init__(self) -> None:
        if self.fmi_count < 1:
            raise ValueError("fmi_count must be >= 1")


class PipelineModel(Enum):
    MONOTONE = "monotone"
    SEQUENCE = "sequence"
    PIPELINE = "pipeline"
    SUPER_PIPELINE = "super"


@dataclass(frozen=True)
class BenchmarkConfig:
    fmi: tuple[int, int, int] = DEFAULT_FMI
    items: int = 100
    repeats: int = 5
    request_timeout: float = 120.0

    def __post_init__(self) -> None:
        if len(self.fmi) != 3 or any(f < 1 for f in self.fmi):
            raise ValueError("fmi must be three positive counts")
        if self.items < 1 or self.repeats < 1:
            raise ValueError("items and repeats must be positive")


@dataclass(frozen=True)
class ModelTiming:
    model: PipelineModel
    times_ms: tuple[float, ...]
    median_ms: float


@dataclass
class RunArtifacts:
    """Details of the last timed repeat, for correctness checks."""

    sink: list[tuple[int, float]]
    intervals: list[tuple[str, int, int, int]]  # (service, correlation, start_ns, end_ns)
    corr_to_item: dict[int, int]
    trace_tail: list[str] = field(default_factory=list)


@dataclass
class BenchmarkResult:
    config: BenchmarkConfig
    timings: dict[PipelineModel, ModelTiming] = field(default_factory=dict)

    @property
    def speedup(self) -> Optional[float]:
        mono = self.timings.get(PipelineModel.MONOTONE)
        sup = self.timings.get(PipelineModel.SUPER_PIPELINE)
        if mono is None or sup is None:
            return None
        return mono.median_ms / sup.median_ms

    def rows(self) -> list[dict]:
        mono = self.timings.get(PipelineModel.MONOTONE)
        rows = []
        for model in PipelineModel:
            timing = self.timings.get(model)
            if timing is None:
                continue
            rows.append(
                {
                    "model": model.value,
                    "fmi1": self.config.fmi[0],
                    "fmi2": self.config.fmi[1],
                    "fmi3": self.config.fmi[2],
                    "items": self.config.items,
                    "repeats": self.config.repeats,
                    "median_ms": round(timing.median_ms, 3),
                    "speedup": (
                        round(mono.median_ms / timing.median_ms, 4) if mono is not None else ""
                    ),
                    "times_ms": [round(t, 3) for t in timing.times_ms],
                }
            )
        return rows


def compute_speedup(timings: dict[PipelineModel, ModelTiming]) -> float:
    """Monotone median over super-pipeline median."""
    try:
        mono = timings[PipelineModel.MONOTONE]
        sup = timings[PipelineModel.SUPER_PIPELINE]
    except KeyError as missing:
        raise ValueError(f"speedup needs both monotone and super timings: {missing}") from None
    return mono.median_ms / sup.median_ms


def _stage_handler(
    workload: FmiWorkload, forward_to: Optional[str]
) -> Callable[[ServiceRequest], object]:
    def handle(call: ServiceRequest):
        value = fmi_burn(workload.fmi_count, start=float(call.args[0]))
        out = (repr(value), call.args[1])
        if forward_to is None:
            return out
        return Forward(forward_to, out)

    return handle


def build_eval_network(model: PipelineModel, cfg: BenchmarkConfig) -> tuple[Runtime, ServiceNode]:
    """Master plus the three stage providers (four in the super pipeline)."""
    chained = model in (PipelineModel.PIPELINE, PipelineModel.SUPER_PIPELINE)
    providers = [("s1", "Service1", 0), ("s2", "Service2", 1), ("s3", "Service3", 2)]
    if model is PipelineModel.SUPER_PIPELINE:
        providers.append(("s2b", "Service2", 1))
    runtime = Runtime(RuntimeConfig(request_timeout=cfg.request_timeout))
    master = ServiceNode.spawn(runtime, NodeRole.MASTER, address="master")
    next_stage = {"Service1": "Service2", "Service2": "Service3", "Service3": None}
    for address, service, idx in providers:
        node = ServiceNode.spawn(runtime, NodeRole.SERVER, master.endpoint, address=address)
        node.register_local(
            ServiceDescription(name=service, provider=address, mode=ExecutionMode.FUNCTION),
            _stage_handler(
                FmiWorkload(cfg.fmi[idx]), next_stage[service] if chained else None
            ),
        )
    master.start_connect()
    master.run_registration()
    return runtime, master


def _drive_monotone(cfg: BenchmarkConfig, items: int, record: bool) -> RunArtifacts:
    sink: list[tuple[int, float]] = []
    intervals: list[tuple[str, int, int, int]] = []
    for item in range(items):
        value = 1.0
        for service, count in zip(STAGE_SERVICES, cfg.fmi):
            start = time.monotonic_ns()
            value = fmi_burn(count, start=value)
            if record:
                intervals.append((service, item, start, time.monotonic_ns()))
        sink.append((item, value))
    return RunArtifacts(sink=sink, intervals=intervals, corr_to_item={i: i for i in range(items)})


def _drive_sequence(master: ServiceNode, cfg: BenchmarkConfig, items: int) -> RunArtifacts:
    sink: list[tuple[int, float]] = []
    for item in range(items):
        value = repr(1.0)
        for service in STAGE_SERVICES:
            payload = master.request(
                service, (value, str(item)), RequestMode.SYNC, cfg.request_timeout
            )
            value = payload[0]
        sink.append((item, float(value)))
    return RunArtifacts(sink=sink, intervals=[], corr_to_item={})


def _drive_pipeline(master: ServiceNode, cfg: BenchmarkConfig, items: int) -> RunArtifacts:
    handles = []
    for item in range(items):
        handle = master.request(
            "Service1", (repr(1.0), str(item)), RequestMode.ASYNC, need_echo=True
        )
        handles.append((item, handle))
    sink: list[tuple[int, float]] = []
    corr_to_item: dict[int, int] = {}
    for item, handle in handles:
        payload = handle.wait(cfg.request_timeout)
        corr_to_item[handle.correlation_id] = item
        sink.append((item, float(payload[0])))
    return RunArtifacts(sink=sink, intervals=[], corr_to_item=corr_to_item)


def _collect_intervals(runtime: Runtime, since_ns: int) -> list[tuple[str, int, int, int]]:
    starts: dict[tuple[str, str, int], int] = {}
    intervals: list[tuple[str, int, int, int]] = []
    for ev in runtime.trace.events():
        if ev.t_ns < since_ns:
            continue
        if ev.event == "exec-start":
            starts[(ev.node, ev.data["service"], ev.data["corr"])] = ev.t_ns
        elif ev.event == "exec-end":
            key = (ev.node, ev.data["service"], ev.data["corr"])
            begin = starts.pop(key, None)
            if begin is not None:
                intervals.append((ev.data["service"], ev.data["corr"], begin, ev.t_ns))
    return intervals


@contextmanager
def _snappy_thread_switching():
    # message handoffs between node activities dominate latency; a shorter
    # switch interval keeps them from stalling behind burning threads
    previous = sys.getswitchinterval()
    sys.setswitchinterval(0.001)
    try:
        yield
    finally:
        sys.setswitchinterval(previous)


def run_model_detailed(
    model: PipelineModel, cfg: BenchmarkConfig
) -> tuple[ModelTiming, RunArtifacts]:
    """Time one model over cfg.repeats; artifacts describe the last repeat."""
    with _snappy_thread_switching():
        return _run_model_inner(model, cfg)


def _run_model_inner(
    model: PipelineModel, cfg: BenchmarkConfig
) -> tuple[ModelTiming, RunArtifacts]:
    fmi_burn(1)  # ensure the burn kernel is compiled before timing
    if model is PipelineModel.MONOTONE:
        _drive_monotone(cfg, 1, record=False)
        times = []
        artifacts = None
        for _ in range(cfg.repeats):
            t0 = time.perf_counter()
            artifacts = _drive_monotone(cfg, cfg.items, record=True)
            times.append((time.perf_counter() - t0) * 1e3)
        _check_conservation(artifacts, cfg)
        return _timing(model, times), artifacts

    runtime, master = build_eval_network(model, cfg)
    try:
        drive = _drive_sequence if model is PipelineModel.SEQUENCE else _drive_pipeline
        drive(master, cfg, 1)  # warm the path end to end
        times = []
        artifacts = None
        for _ in range(cfg.repeats):
            mark = time.monotonic_ns()
            t0 = time.perf_counter()
            artifacts = drive(master, cfg, cfg.items)
            times.append((time.perf_counter() - t0) * 1e3)
            artifacts.intervals = _collect_intervals(runtime, mark)
        _check_conservation(artifacts, cfg)
        artifacts.trace_tail = runtime.trace.render_lines()[-200:]
        master.shutdown()
    finally:
        runtime.close()
    return _timing(model, times), artifacts


def run_model(model: PipelineModel, cfg: BenchmarkConfig) -> ModelTiming:
    return run_model_detailed(model, cfg)[0]


def _timing(model: PipelineModel, times: list[float]) -> ModelTiming:
    return ModelTiming(model=model, times_ms=tuple(times), median_ms=statistics.median(times))


def _check_conservation(artifacts: RunArtifacts, cfg: BenchmarkConfig) -> None:
    if len(artifacts.sink) != cfg.items:
        raise ProtocolError(
            f"work not conserved: sink saw {len(artifacts.sink)} of {cfg.items} items"
        )


def run_benchmark(
    cfg: BenchmarkConfig, models: Optional[Sequence[PipelineModel]] = None
) -> BenchmarkResult:
    chosen = list(models) if models is not None else list(PipelineModel)
    result = BenchmarkResult(config=cfg)
    for model in PipelineModel:  # canonical order, monotone first
        if model in chosen:
            result.timings[model] = run_model(model, cfg)
    return result


@dataclass(frozen=True)
class SweepPoint:
    fmi: int
    monotone_ms: float
    super_ms: float
    speedup: float


def speedup_sweep(fmi_values: Sequence[int], cfg: BenchmarkConfig) -> list[SweepPoint]:
    """Speedup at several per-service FMI counts, Service2 doubled throughout."""
    points = []
    for f in fmi_values:
        swept = replace(cfg, fmi=(f, 2 * f, f))
        mono = run_model(PipelineModel.MONOTONE, swept)
        sup = run_model(PipelineModel.SUPER_PIPELINE, swept)
        points.append(
            SweepPoint(
                fmi=f,
                monotone_ms=mono.median_ms,
                super_ms=sup.median_ms,
                speedup=mono.median_ms / sup.median_ms,
            )
        )
    return points


CSV_COLUMNS = ("model", "fmi1", "fmi2", "fmi3", "items", "repeats", "median_ms", "speedup")


def write_csv(rows: list[dict], out: TextIO) -> None:
    out.write(",".join(CSV_COLUMNS) + "\n")
    for row in rows:
        out.write(",".join(str(row[col]) for col in CSV_COLUMNS) + "\n")


def rows_to_json(rows: list[dict], meta: dict) -> str:
    return json.dumps({"meta": meta, "rows": rows}, sort_keys=True, indent=2) + "\n"
