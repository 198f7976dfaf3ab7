"""Deterministic replay of deployment plans and the exclusive-allocation baselines."""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from tsmux.errors import InfeasibleBaseline, OutOfRange, ValidationError
from tsmux.model import (
    Assignment,
    ClusterSpec,
    DeploymentPlan,
    ModelGraph,
    StageAllocation,
    topological_order,
    validate_plan,
)
from tsmux.perf import InterferenceModel, ScalingSurface, stage_latencies

POOLED_OVERHEAD = 0.013e-3
ON_DEMAND_OVERHEAD = 37e-3
STREAM_MODES = ("pooled", "on_demand")
BASELINES = ("megatron", "distmm")
EXHAUSTIVE_WAVE_LIMIT = 8
TIMELINE_COLUMNS = ("iteration", "stage", "gpu", "module", "start", "end", "quota")


@dataclass(frozen=True)
class SimConfig:
    iterations: int = 1
    stream_mode: str = "pooled"
    pooled_overhead: float = POOLED_OVERHEAD
    on_demand_overhead: float = ON_DEMAND_OVERHEAD
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if int(self.iterations) != self.iterations or self.iterations < 1:
            raise ValidationError("iterations must be a positive integer")
        if self.stream_mode not in STREAM_MODES:
            raise ValidationError(f"stream_mode must be one of {STREAM_MODES}, got {self.stream_mode!r}")
        if self.pooled_overhead < 0 or self.on_demand_overhead < 0:
            raise ValidationError("overheads must be >= 0")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be >= 0")


@dataclass(frozen=True)
class Interval:
    iteration: int
    stage: int
    gpu: int
    module: str
    start: float
    end: float
    quota: float


@dataclass
class SimulationReport:
    iteration_time: float
    iteration_times: list[float]
    per_stage_times: list[float]
    per_gpu_busy_fraction: list[float]
    overhead_per_iteration: float
    timeline: list[Interval] = field(default_factory=list)

    @property
    def mean_utilization(self) -> float:
        return float(np.mean(self.per_gpu_busy_fraction))

    def to_dict(self, with_timeline: bool = False) -> dict:
        out = {
            "iteration_time": self.iteration_time,
            "iteration_times": list(self.iteration_times),
            "per_stage_times": list(self.per_stage_times),
            "per_gpu_busy_fraction": list(self.per_gpu_busy_fraction),
            "mean_utilization": self.mean_utilization,
            "overhead_per_iteration": self.overhead_per_iteration,
        }
        if with_timeline:
            out["timeline"] = [list(timeline_row(iv)) for iv in self.timeline]
        return out

    def write_timeline_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TIMELINE_COLUMNS)
            for iv in self.timeline:
                w.writerow(timeline_row(iv))


def timeline_row(iv: Interval) -> tuple:
    return (iv.iteration, iv.stage, iv.gpu, iv.module, repr(iv.start), repr(iv.end), repr(iv.quota))


def streams_per_gpu(stage: StageAllocation) -> int:
    """Streams created on the busiest GPU: one per distinct (module, quota) resident.

    GPUs create their streams independently, so the transition waits on the
    GPU with the most streams to build.
    """
    res = stage.residents()
    return max(len({(x.module, x.a) for x in xs}) for xs in res.values())


def transition_overhead(stage: StageAllocation, config: SimConfig) -> float:
    if config.stream_mode == "pooled":
        return config.pooled_overhead
    return config.on_demand_overhead * streams_per_gpu(stage)


def simulate(
    plan: DeploymentPlan,
    surfaces: Mapping[str, ScalingSurface],
    model: InterferenceModel,
    config: SimConfig = SimConfig(),
    graph: ModelGraph | None = None,
    cluster: ClusterSpec | None = None,
) -> SimulationReport:
    """Replay `plan` for config.iterations iterations.

    Each stage pays its transition overhead, then runs its modules concurrently
    for their (optionally perturbed) rectified latencies.
    """
    if graph is not None and cluster is not None:
        validate_plan(plan, graph, cluster)
    if not plan.stages:
        raise ValidationError("cannot simulate an empty plan")
    if cluster is not None:
        gpu_count = cluster.gpu_count
    else:
        gpu_count = 1 + max(g for s in plan.stages for x in s.assignments for g in x.gpus)
    rng = np.random.default_rng(config.seed)
    base = [stage_latencies(s, surfaces, model) for s in plan.stages]
    overheads = [transition_overhead(s, config) for s in plan.stages]

    timeline: list[Interval] = []
    iter_times = []
    stage_sums = np.zeros(len(plan.stages))
    busy = np.zeros(gpu_count)
    t = 0.0
    for it in range(config.iterations):
        t_iter = t
        for si, stage in enumerate(plan.stages):
            durations = dict(base[si])
            if config.noise_sigma > 0:
                for m in stage.modules:
                    durations[m] *= math.exp(config.noise_sigma * rng.standard_normal())
            start = t + overheads[si]
            span = max(durations.values())
            for x in stage.assignments:
                for g in x.gpus:
                    timeline.append(Interval(it, si, g, x.module, start, start + durations[x.module], x.a))
                    busy[g] += x.a * durations[x.module]
            stage_sums[si] += span
            t = start + span
        iter_times.append(t - t_iter)
    total = math.fsum(iter_times)
    return SimulationReport(
        iteration_time=total / config.iterations,
        iteration_times=iter_times,
        per_stage_times=[float(v) / config.iterations for v in stage_sums],
        per_gpu_busy_fraction=[float(min(1.0, b / total)) for b in busy],
        overhead_per_iteration=math.fsum(overheads),
        timeline=timeline,
    )


# ------------------------------------------------------------------ baselines


def _exclusive(
    module: str,
    d: int,
    gpus: Sequence[int],
    surfaces: Mapping[str, ScalingSurface],
    cluster: ClusterSpec,
    memory_base: float,
) -> Assignment:
    surf = surfaces[module]
    try:
        _, _, mem = surf.lookup(d, 1.0)
    except OutOfRange as exc:
        raise InfeasibleBaseline(f"module {module}: no profile at d={d}, a=1.0") from exc
    mem += memory_base
    if mem > cluster.memory_capacity:
        raise InfeasibleBaseline(
            f"module {module}: {mem:.4g} B at d={d} exceeds GPU memory {cluster.memory_capacity:.4g} B"
        )
    return Assignment(module, d, 1.0, tuple(gpus), mem)


def _solo_latency(module: str, d: int, surfaces, model: InterferenceModel) -> float:
    lat, bw, _ = surfaces[module].lookup(d, 1.0)
    return lat + model.delay([bw] if model.include_self else [])


def longest_path_waves(graph: ModelGraph) -> list[list[str]]:
    """Modules grouped by longest-path depth from the sources."""
    depth: dict[str, int] = {}
    for m in topological_order(graph):
        depth[m] = 1 + max((depth[p] for p in graph.predecessors[m]), default=-1)
    waves: dict[int, list[str]] = {}
    for m, k in depth.items():
        waves.setdefault(k, []).append(m)
    return [sorted(waves[k]) for k in sorted(waves)]


def _split_wave(wave: list[str], gpu_count: int, surfaces, model) -> list[list[str]]:
    if len(wave) <= gpu_count:
        return [wave]
    order = sorted(wave, key=lambda m: (-_solo_latency(m, 1, surfaces, model), m))
    return [sorted(order[i : i + gpu_count]) for i in range(0, len(order), gpu_count)]


def distmm_split(
    wave: Sequence[str],
    cluster: ClusterSpec,
    surfaces: Mapping[str, ScalingSurface],
    model: InterferenceModel,
    memory_base: Mapping[str, float],
) -> tuple[int, ...]:
    """GPU counts (in wave order) minimizing the wave's slowest module."""
    G = cluster.gpu_count
    k = len(wave)

    def allowed(m, d):
        surf = surfaces[m]
        if not surf.contains(d, 1.0):
            return False
        return surf.lookup(d, 1.0)[2] + memory_base.get(m, 0.0) <= cluster.memory_capacity

    lat = {(m, d): _solo_latency(m, d, surfaces, model) for m in wave for d in range(1, G + 1) if allowed(m, d)}
    for m in wave:
        if not any((m, d) in lat for d in range(1, G + 1)):
            raise InfeasibleBaseline(f"module {m}: no GPU count fits in memory at a=1.0")

    if k <= EXHAUSTIVE_WAVE_LIMIT:
        best = None
        for ds in itertools.product(range(1, G - k + 2), repeat=k):
            if sum(ds) > G or any((m, d) not in lat for m, d in zip(wave, ds)):
                continue
            key = (max(lat[m, d] for m, d in zip(wave, ds)), sum(ds), ds)
            if best is None or key < best:
                best = key
        if best is None:
            raise InfeasibleBaseline(f"wave {list(wave)} cannot be split over {G} GPUs")
        return best[2]

    ds = [min(d for d in range(1, G + 1) if (m, d) in lat) for m in wave]
    if sum(ds) > G:
        raise InfeasibleBaseline(f"wave {list(wave)} cannot be split over {G} GPUs")
    while True:
        slowest = max(range(k), key=lambda i: (lat[wave[i], ds[i]], -i))
        nxt = ds[slowest] + 1
        if sum(ds) + 1 > G or (wave[slowest], nxt) not in lat:
            break
        if lat[wave[slowest], nxt] >= lat[wave[slowest], ds[slowest]]:
            break
        ds[slowest] = nxt
    return tuple(ds)


def baseline_plan(
    graph: ModelGraph,
    cluster: ClusterSpec,
    surfaces: Mapping[str, ScalingSurface],
    model: InterferenceModel,
    policy: str,
    granularity: float = 0.1,
) -> DeploymentPlan:
    memory_base = {m.id: m.memory_base for m in graph.modules}
    G = cluster.gpu_count
    stages = []
    if policy == "megatron":
        for m in topological_order(graph):
            stages.append(StageAllocation((_exclusive(m, G, range(G), surfaces, cluster, memory_base[m]),)))
    elif policy == "distmm":
        for wave in longest_path_waves(graph):
            for chunk in _split_wave(wave, G, surfaces, model):
                ds = distmm_split(chunk, cluster, surfaces, model, memory_base)
                nxt = 0
                xs = []
                for m, d in zip(chunk, ds):
                    xs.append(_exclusive(m, d, range(nxt, nxt + d), surfaces, cluster, memory_base[m]))
                    nxt += d
                stages.append(StageAllocation(tuple(xs)))
    else:
        raise ValidationError(f"unknown baseline {policy!r}; choose from {BASELINES}")
    times = [max(stage_latencies(s, surfaces, model).values()) for s in stages]
    return DeploymentPlan(tuple(stages), tuple(times), granularity)


def simulate_baseline(
    graph: ModelGraph,
    cluster: ClusterSpec,
    surfaces: Mapping[str, ScalingSurface],
    model: InterferenceModel,
    policy: str,
    granularity: float = 0.1,
    config: SimConfig = SimConfig(),
) -> tuple[DeploymentPlan, SimulationReport]:
    plan = baseline_plan(graph, cluster, surfaces, model, policy, granularity)
    return plan, simulate(plan, surfaces, model, config, graph, cluster)
