"""Synthetic profiler: roofline-style scaling surfaces and colocation samples.

Stands in for on-GPU profiling so every experiment runs deterministically on a
laptop. Presets carry per-module FLOPs and compute intensities for the model
families used in the benchmarks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from tsmux.errors import UnknownPreset, ValidationError
from tsmux.model import ClusterSpec, ModelGraph, ModuleSpec, make_graph, quota_levels
from tsmux.perf import ColocationSample, InterferenceModel, ScalingSurface

EFFICIENCY_FLOOR = 0.85
DECILES = tuple(round(0.1 * i, 1) for i in range(1, 11))

# forward FLOPs per sample batch, times three for forward + backward
TRAIN_FLOP_FACTOR = 3.0
BATCH_SIZE = 32
BYTES_PER_PARAM_STATE = 6.0
BYTES_PER_GRAD = 2.0

DEFAULT_GROUND_TRUTH = InterferenceModel(e1=0.002, e2=0.01, e3=0.06)


@dataclass(frozen=True)
class ModuleWorkload:
    module_id: str
    flops: float
    bytes: float
    gradient_bytes: float
    knee: float = 0.5
    memory_base: float = 1e9
    memory_per_quota: float = 1e9
    state_bytes: float = 0.0
    name: str = ""
    tags: tuple[str, ...] = ()

    def __post_init__(self):
        for attr in ("flops", "bytes", "gradient_bytes"):
            if not getattr(self, attr) > 0:
                raise ValidationError(f"workload {self.module_id}: {attr} must be > 0")
        if not 0 < self.knee <= 1:
            raise ValidationError(f"workload {self.module_id}: knee must be in (0, 1]")
        if self.memory_base < 0 or self.memory_per_quota < 0 or self.state_bytes < 0:
            raise ValidationError(f"workload {self.module_id}: memory terms must be >= 0")

    @property
    def compute_intensity(self) -> float:
        return self.flops / self.bytes

    @classmethod
    def from_table(
        cls,
        module_id: str,
        tflops: float,
        ci: float,
        params: float,
        knee: float = 0.5,
        activation_bytes: float = 2e9,
        name: str = "",
        tags: tuple[str, ...] = (),
    ) -> "ModuleWorkload":
        """Build from forward TFLOPs per sample, compute intensity and parameter count."""
        if not (tflops > 0 and ci > 0 and params > 0):
            raise ValidationError(f"workload {module_id}: tflops, ci and params must be > 0")
        flops = tflops * 1e12 * BATCH_SIZE * TRAIN_FLOP_FACTOR
        return cls(
            module_id=module_id,
            flops=flops,
            bytes=flops / ci,
            gradient_bytes=params * BYTES_PER_GRAD,
            knee=knee,
            memory_base=activation_bytes,
            memory_per_quota=0.25 * activation_bytes,
            state_bytes=params * BYTES_PER_PARAM_STATE,
            name=name or module_id,
            tags=tags,
        )

    def spec(self) -> ModuleSpec:
        return ModuleSpec(self.module_id, self.name or self.module_id, self.state_bytes, self.tags)


def efficiency(a: float, knee: float) -> float:
    return min(1.0, a / knee + (1.0 - a / knee) * EFFICIENCY_FLOOR)


def default_d_set(gpu_count: int) -> tuple[int, ...]:
    ds = []
    d = 1
    while d <= gpu_count:
        ds.append(d)
        d *= 2
    if ds[-1] != gpu_count:
        ds.append(gpu_count)
    return tuple(ds)


def point_values(
    w: ModuleWorkload, cluster: ClusterSpec, d: int, a: float, demand_scale: float = 1.0
) -> tuple[float, float, float]:
    compute = (w.flops / d) / (a * cluster.peak_compute * efficiency(a, w.knee))
    io = (w.bytes / d) / cluster.peak_bandwidth
    if d > 1:
        sync = cluster.interconnect_alpha * math.ceil(math.log2(d)) + cluster.interconnect_beta * w.gradient_bytes
    else:
        sync = 0.0
    busy = max(compute, io)
    latency = busy + sync
    bw = min(1.0, io / busy * demand_scale)
    memory = w.memory_base + w.memory_per_quota * a + w.gradient_bytes / d
    return latency, bw, memory


def generate_surface(
    workload: ModuleWorkload,
    cluster: ClusterSpec,
    d_set: Sequence[int] | None = None,
    a_set: Sequence[float] | None = None,
    demand_scale: float = 1.0,
) -> ScalingSurface:
    d_set = tuple(sorted(d_set or default_d_set(cluster.gpu_count)))
    a_set = tuple(sorted(a_set or DECILES))
    if d_set[0] < 1 or d_set[-1] > cluster.gpu_count:
        raise ValidationError("d_set must lie within [1, gpu_count]")
    if a_set[0] <= 0 or a_set[-1] > 1:
        raise ValidationError("a_set must lie within (0, 1]")
    shape = (len(d_set), len(a_set))
    lat, bw, mem = np.empty(shape), np.empty(shape), np.empty(shape)
    for i, d in enumerate(d_set):
        for j, a in enumerate(a_set):
            lat[i, j], bw[i, j], mem[i, j] = point_values(workload, cluster, d, a, demand_scale)
    return ScalingSurface(workload.module_id, d_set, a_set, lat, bw, mem)


def generate_surfaces(workloads: Sequence[ModuleWorkload], cluster: ClusterSpec, **kw) -> dict[str, ScalingSurface]:
    return {w.module_id: generate_surface(w, cluster, **kw) for w in workloads}


def _composition(rng: np.random.Generator, total: int, parts: int) -> list[int]:
    cuts = sorted(rng.choice(np.arange(1, total), size=parts - 1, replace=False).tolist()) if parts > 1 else []
    bounds = [0] + cuts + [total]
    return [bounds[i + 1] - bounds[i] for i in range(parts)]


def generate_colocation_samples(
    workloads: Sequence[ModuleWorkload],
    cluster: ClusterSpec,
    ground_truth: InterferenceModel,
    noise_seed: int,
    n: int,
    noise_sigma: float = 0.0,
    max_members: int = 4,
    granularity: float = 0.1,
    demand_scale: float = 1.0,
) -> list[ColocationSample]:
    """Random single-GPU colocations with observed = base + delay * lognormal noise.

    Cardinalities cycle through 1..max_members so every batch spans several of them.
    """
    if n < 9:
        raise ValidationError("need n >= 9 samples")
    rng = np.random.default_rng(noise_seed)
    surfaces = generate_surfaces(workloads, cluster, d_set=(1,), demand_scale=demand_scale)
    levels = quota_levels(granularity)
    max_members = max(1, min(max_members, len(workloads), levels))
    out = []
    for i in range(n):
        k = 1 + i % max_members
        picks = rng.choice(len(workloads), size=k, replace=False)
        total = int(rng.integers(k, levels + 1))
        units = _composition(rng, total, k)
        members = []
        for idx, u in zip(picks, units):
            w = workloads[int(idx)]
            a = u * granularity
            members.append((w.module_id, a, surfaces[w.module_id].lookup(1, a)[1]))
        victim = members[0][0]
        base = surfaces[victim].lookup(1, members[0][1])[0]
        bws = [b for mid, _, b in sorted(members) if ground_truth.include_self or mid != victim]
        delay = ground_truth.delay(bws)
        if noise_sigma:
            delay *= math.exp(noise_sigma * rng.standard_normal())
        out.append(ColocationSample(victim, tuple(sorted(members)), base + delay, base))
    return out


# ---------------------------------------------------------------- presets


@dataclass(frozen=True)
class Preset:
    name: str
    graph: ModelGraph
    workloads: tuple[ModuleWorkload, ...]
    cluster: ClusterSpec
    ground_truth: InterferenceModel = field(default=DEFAULT_GROUND_TRUTH)

    def surfaces(self, **kw) -> dict[str, ScalingSurface]:
        return generate_surfaces(self.workloads, self.cluster, **kw)


def make_cluster(gpus: int = 8, **overrides) -> ClusterSpec:
    kw = dict(
        gpu_count=gpus,
        memory_capacity=80e9,
        peak_compute=400e12,
        peak_bandwidth=8e12,
        interconnect_alpha=20e-6,
        interconnect_beta=1.0 / 50e9,
    )
    kw.update(overrides)
    return ClusterSpec(**kw)


# (id, forward TFLOPs, compute intensity FLOPs/B, params, knee)
_CLIP = [
    ("vision", 2.90, 60.0, 0.30e9, 0.6),
    ("text", 0.60, 9.0, 0.12e9, 0.3),
    ("align", 0.02, 4.0, 0.002e9, 0.2),
]
_QWEN3VL = [
    ("llm", 22.27, 145.2, 7.6e9, 0.8),
    ("vision", 2.58, 82.4, 0.41e9, 0.6),
    ("text", 0.15, 2.1, 0.62e9, 0.2),
]
_UNIFIEDIO2 = [
    ("llm", 16.70, 110.5, 3.2e9, 0.8),
    ("vision", 1.48, 24.6, 0.22e9, 0.5),
    ("audio", 1.06, 21.8, 0.20e9, 0.5),
    ("text", 0.10, 4.5, 0.20e9, 0.2),
]
_IMAGEBIND = [
    ("vision", 4.17, 35.2, 0.63e9, 0.6),
    ("audio", 2.09, 22.8, 0.09e9, 0.5),
    ("text", 1.04, 20.5, 0.35e9, 0.5),
    ("depth", 0.90, 19.0, 0.09e9, 0.4),
    ("thermal", 0.80, 18.0, 0.09e9, 0.4),
    ("imu", 0.12, 5.0, 0.02e9, 0.2),
]
_OFASYS = [
    ("vision", 1.35, 18.2, 0.30e9, 0.5),
    ("text", 0.72, 12.5, 0.25e9, 0.4),
    ("audio", 0.95, 14.8, 0.30e9, 0.4),
    ("video", 2.60, 30.0, 0.40e9, 0.6),
    ("depth", 0.50, 16.0, 0.10e9, 0.4),
    ("thermal", 0.45, 15.0, 0.10e9, 0.4),
    ("imu", 0.05, 3.0, 0.02e9, 0.2),
    ("action", 0.08, 4.0, 0.03e9, 0.2),
    ("box", 0.03, 2.5, 0.02e9, 0.2),
]
_OFASYS_LLM = ("llm", 4.80, 41.6, 4.4e9, 0.7)

PRESET_NAMES = ("clip", "qwen3vl", "unifiedio2", "imagebind", "ofasys")


def _workloads(rows) -> list[ModuleWorkload]:
    return [
        ModuleWorkload.from_table(mid, tf, ci, params, knee, activation_bytes=1e9 + params * 2.0)
        for mid, tf, ci, params, knee in rows
    ]


def _fan_in(rows, sink) -> tuple[list, list[tuple[str, str]]]:
    return rows + [sink], [(r[0], sink[0]) for r in rows]


OFASYS_ENCODERS = tuple(_OFASYS)


def fan_in_workloads(encoder_rows, sink=_OFASYS_LLM) -> tuple[list[ModuleWorkload], list[tuple[str, str]]]:
    """Workloads for encoder rows feeding a single backbone row."""
    rows, edges = _fan_in(list(encoder_rows), sink)
    return _workloads(rows), edges


def preset(name: str, gpus: int = 8, modules: int | None = None) -> Preset:
    """Workload preset by name.

    `modules` limits the number of encoders for the families that allow it
    (imagebind up to 6, ofasys up to 9, unifiedio2 up to 3).
    """
    key = name.lower().replace("-", "").replace("_", "")
    if key == "clip":
        rows, edges = _CLIP, [("vision", "align"), ("text", "align")]
    elif key == "qwen3vl":
        rows, edges = _QWEN3VL, [("vision", "llm"), ("text", "llm")]
    elif key == "unifiedio2":
        enc = _UNIFIEDIO2[1:][: modules or 3]
        rows, edges = _fan_in(list(enc), _UNIFIEDIO2[0])
    elif key == "imagebind":
        enc = _IMAGEBIND[: modules or 6]
        rows, edges = _fan_in(list(enc), ("align", 0.02, 4.0, 0.002e9, 0.2))
    elif key == "ofasys":
        enc = _OFASYS[: modules or 9]
        rows, edges = _fan_in(list(enc), _OFASYS_LLM)
    else:
        raise UnknownPreset(f"unknown preset {name!r}; choose from {', '.join(PRESET_NAMES)}")
    if modules is not None and not 1 <= modules:
        raise ValidationError("modules must be >= 1")
    wl = _workloads(rows)
    graph = make_graph([w.spec() for w in wl], edges)
    return Preset(key, graph, tuple(wl), make_cluster(gpus))


def random_workloads(rng: np.random.Generator, n: int) -> list[ModuleWorkload]:
    """Heterogeneous random modules spanning two orders of magnitude of compute intensity."""
    out = []
    for i in range(n):
        tflops = float(10 ** rng.uniform(-1.3, 0.7))
        ci = float(10 ** rng.uniform(0.4, 2.1))
        params = float(10 ** rng.uniform(7.5, 9.0))
        knee = float(rng.uniform(0.2, 0.8))
        out.append(
            ModuleWorkload.from_table(f"m{i}", tflops, ci, params, knee, activation_bytes=1e9 + params * 2.0)
        )
    return out


def random_dag_edges(rng: np.random.Generator, ids: Sequence[str], density: float = 0.3) -> list[tuple[str, str]]:
    edges = []
    for j in range(len(ids)):
        for i in range(j):
            if rng.random() < density:
                edges.append((ids[i], ids[j]))
    return edges


def workloads_by_id(workloads: Sequence[ModuleWorkload]) -> Mapping[str, ModuleWorkload]:
    return {w.module_id: w for w in workloads}
