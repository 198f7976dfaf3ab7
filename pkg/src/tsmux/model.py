"""Domain types: the model DAG, the cluster, per-stage allocations and plans."""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping, Sequence

from tsmux.errors import (
    CycleDetected,
    DanglingEdge,
    DependencyViolated,
    EmptyPlan,
    MemoryOvercommit,
    ModuleDuplicated,
    ModuleMissing,
    SmOvercommit,
    ValidationError,
)

QUOTA_EPS = 1e-9
GRID_EPS = 1e-12


@dataclass(frozen=True)
class ModuleSpec:
    id: str
    name: str = ""
    memory_base: float = 0.0
    tags: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.id:
            raise ValidationError("module id must be non-empty")
        if self.memory_base < 0:
            raise ValidationError(f"module {self.id}: memory_base must be >= 0")


@dataclass(frozen=True)
class ModelGraph:
    """A multimodal model as a DAG of modules.

    Bit positions used for stage bitmasks follow lexicographic module-id order.
    """

    modules: tuple[ModuleSpec, ...]
    edges: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "modules", tuple(self.modules))
        object.__setattr__(self, "edges", tuple((str(u), str(v)) for u, v in self.edges))

    @cached_property
    def ids(self) -> tuple[str, ...]:
        return tuple(sorted(m.id for m in self.modules))

    @cached_property
    def by_id(self) -> dict[str, ModuleSpec]:
        return {m.id: m for m in self.modules}

    @cached_property
    def bit(self) -> dict[str, int]:
        return {mid: i for i, mid in enumerate(self.ids)}

    def mask(self, module_ids: Iterable[str]) -> int:
        out = 0
        for mid in module_ids:
            out |= 1 << self.bit[mid]
        return out

    def members(self, mask: int) -> tuple[str, ...]:
        return tuple(mid for i, mid in enumerate(self.ids) if mask >> i & 1)

    @cached_property
    def successors(self) -> dict[str, tuple[str, ...]]:
        out: dict[str, list[str]] = {mid: [] for mid in self.by_id}
        for u, v in self.edges:
            out.setdefault(u, []).append(v)
        return {k: tuple(sorted(v)) for k, v in out.items()}

    @cached_property
    def predecessors(self) -> dict[str, tuple[str, ...]]:
        out: dict[str, list[str]] = {mid: [] for mid in self.by_id}
        for u, v in self.edges:
            out.setdefault(v, []).append(u)
        return {k: tuple(sorted(v)) for k, v in out.items()}

    @cached_property
    def reach_mask(self) -> dict[str, int]:
        """Bitmask of modules reachable from each module by a non-empty path."""
        order = topological_order(self)
        reach: dict[str, int] = {}
        for mid in reversed(order):
            acc = 0
            for s in self.successors[mid]:
                acc |= (1 << self.bit[s]) | reach[s]
            reach[mid] = acc
        return reach

    def reaches(self, src_mask: int, dst_mask: int) -> bool:
        """True if some module in src_mask has a path to some module in dst_mask."""
        for mid in self.members(src_mask):
            if self.reach_mask[mid] & dst_mask:
                return True
        return False


@dataclass(frozen=True)
class ClusterSpec:
    gpu_count: int
    memory_capacity: float
    peak_compute: float
    peak_bandwidth: float
    interconnect_alpha: float
    interconnect_beta: float
    sm_capacity_per_gpu: float = 1.0

    def __post_init__(self):
        if int(self.gpu_count) != self.gpu_count or self.gpu_count < 1:
            raise ValidationError("gpu_count must be a positive integer")
        for name in ("memory_capacity", "peak_compute", "peak_bandwidth"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be > 0")
        if self.interconnect_alpha < 0 or self.interconnect_beta < 0:
            raise ValidationError("interconnect terms must be >= 0")
        if self.sm_capacity_per_gpu != 1.0:
            raise ValidationError("sm_capacity_per_gpu is normalized and fixed at 1.0")


def quota_levels(granularity: float) -> int:
    """Number of quota units that fit on one GPU at this granularity."""
    if not 0 < granularity <= 1:
        raise ValidationError(f"granularity must be in (0, 1], got {granularity}")
    return int(math.floor(1.0 / granularity + QUOTA_EPS))


@dataclass(frozen=True)
class DeploymentOption:
    d: int
    a: float

    def __post_init__(self):
        if self.d < 1:
            raise ValidationError("dp degree must be >= 1")
        if not 0 < self.a <= 1 + QUOTA_EPS:
            raise ValidationError(f"sm quota must be in (0, 1], got {self.a}")

    @classmethod
    def from_units(cls, d: int, units: int, granularity: float) -> "DeploymentOption":
        return cls(d, units * granularity)

    def units(self, granularity: float) -> int:
        u = round(self.a / granularity)
        if abs(u * granularity - self.a) > GRID_EPS:
            raise ValidationError(f"quota {self.a} is not a multiple of {granularity}")
        return u


@dataclass(frozen=True)
class Assignment:
    """One module's deployment inside a stage: (d, a), its GPUs and per-GPU memory."""

    module: str
    d: int
    a: float
    gpus: tuple[int, ...]
    memory: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "gpus", tuple(sorted(int(g) for g in self.gpus)))
        if len(set(self.gpus)) != len(self.gpus):
            raise ValidationError(f"module {self.module} placed twice on one GPU")
        if len(self.gpus) != self.d:
            raise ValidationError(
                f"module {self.module}: placement size {len(self.gpus)} != d={self.d}"
            )

    @property
    def option(self) -> DeploymentOption:
        return DeploymentOption(self.d, self.a)


@dataclass(frozen=True)
class StageAllocation:
    assignments: tuple[Assignment, ...]

    def __post_init__(self):
        object.__setattr__(
            self, "assignments", tuple(sorted(self.assignments, key=lambda x: x.module))
        )

    @property
    def modules(self) -> tuple[str, ...]:
        return tuple(x.module for x in self.assignments)

    def __getitem__(self, module: str) -> Assignment:
        for x in self.assignments:
            if x.module == module:
                return x
        raise KeyError(module)

    def residents(self) -> dict[int, list[Assignment]]:
        """GPU index -> assignments placed on it, in module-id order."""
        out: dict[int, list[Assignment]] = {}
        for x in self.assignments:
            for g in x.gpus:
                out.setdefault(g, []).append(x)
        return out


@dataclass(frozen=True)
class DeploymentPlan:
    stages: tuple[StageAllocation, ...]
    predicted_stage_times: tuple[float, ...]
    granularity: float = 0.1
    predicted_iteration_time: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        object.__setattr__(self, "predicted_stage_times", tuple(self.predicted_stage_times))
        if len(self.stages) != len(self.predicted_stage_times):
            raise ValidationError("one predicted time per stage is required")
        object.__setattr__(self, "predicted_iteration_time", math.fsum(self.predicted_stage_times))

    def stage_sets(self) -> list[tuple[str, ...]]:
        return [s.modules for s in self.stages]


def iteration_time(plan: DeploymentPlan) -> float:
    if not plan.stages:
        raise EmptyPlan("plan has no stages")
    return math.fsum(plan.predicted_stage_times)


def topological_order(graph: ModelGraph) -> list[str]:
    """Kahn's algorithm with lexicographic tie-breaking. Raises CycleDetected."""
    indeg = {mid: 0 for mid in graph.by_id}
    for _, v in graph.edges:
        indeg[v] += 1
    heap = [mid for mid, k in indeg.items() if k == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        u = heapq.heappop(heap)
        order.append(u)
        for v in graph.successors.get(u, ()):
            indeg[v] -= 1
            if indeg[v] == 0:
                heapq.heappush(heap, v)
    if len(order) != len(indeg):
        raise CycleDetected(_find_cycle(graph, set(indeg) - set(order)))
    return order


def _find_cycle(graph: ModelGraph, candidates: set[str]) -> list[str]:
    # every node left over by Kahn's algorithm has a predecessor that is also left over
    start = min(candidates)
    seen: dict[str, int] = {}
    path = []
    node = start
    while node not in seen:
        seen[node] = len(path)
        path.append(node)
        node = next(p for p in graph.predecessors[node] if p in candidates)
    cycle = path[seen[node]:]
    cycle.reverse()
    return cycle + [cycle[0]]


def validate_graph(graph: ModelGraph) -> None:
    """Raise DanglingEdge/CycleDetected/ValidationError if the graph is not a valid DAG."""
    seen = set()
    for m in graph.modules:
        if m.id in seen:
            raise ValidationError(f"duplicate module id {m.id!r}")
        seen.add(m.id)
    edge_seen = set()
    for u, v in graph.edges:
        for end in (u, v):
            if end not in seen:
                raise DanglingEdge(end, (u, v))
        if u == v:
            raise CycleDetected([u, u])
        if (u, v) in edge_seen:
            raise ValidationError(f"duplicate edge {u}->{v}")
        edge_seen.add((u, v))
    topological_order(graph)


def topological_singleton_stages(graph: ModelGraph) -> list[frozenset[str]]:
    return [frozenset([mid]) for mid in topological_order(graph)]


def validate_plan(plan: DeploymentPlan, graph: ModelGraph, cluster: ClusterSpec) -> None:
    """Check partition, dependency order, per-GPU SM quota and memory for every stage."""
    where: dict[str, int] = {}
    for i, stage in enumerate(plan.stages):
        if not stage.assignments:
            raise ValidationError(f"stage {i} is empty")
        for x in stage.assignments:
            if x.module not in graph.by_id:
                raise ValidationError(f"plan references unknown module {x.module!r}")
            if x.module in where:
                raise ModuleDuplicated(x.module)
            where[x.module] = i
    for mid in graph.ids:
        if mid not in where:
            raise ModuleMissing(mid)
    for u, v in graph.edges:
        if not where[u] < where[v]:
            raise DependencyViolated(u, v)
    for i, stage in enumerate(plan.stages):
        check_stage_capacity(stage, cluster, stage_index=i)


def check_stage_capacity(stage: StageAllocation, cluster: ClusterSpec, stage_index=None) -> None:
    for x in stage.assignments:
        if x.d > cluster.gpu_count:
            raise ValidationError(f"module {x.module}: d={x.d} exceeds gpu_count")
        if not 0 < x.a <= 1 + QUOTA_EPS:
            raise ValidationError(f"module {x.module}: quota {x.a} outside (0, 1]")
        for g in x.gpus:
            if not 0 <= g < cluster.gpu_count:
                raise ValidationError(f"module {x.module}: GPU {g} does not exist")
    for g, xs in sorted(stage.residents().items()):
        quota = math.fsum(x.a for x in xs)
        if quota > cluster.sm_capacity_per_gpu + QUOTA_EPS:
            raise SmOvercommit(g, quota, stage_index)
        mem = math.fsum(x.memory for x in xs)
        if mem > cluster.memory_capacity:
            raise MemoryOvercommit(g, mem, cluster.memory_capacity, stage_index)


def make_graph(modules: Sequence[ModuleSpec | str], edges: Sequence[tuple[str, str]] = ()) -> ModelGraph:
    """Convenience constructor; bare strings become ModuleSpecs with zero base memory."""
    specs = tuple(m if isinstance(m, ModuleSpec) else ModuleSpec(m, m) for m in modules)
    g = ModelGraph(specs, tuple(edges))
    validate_graph(g)
    return g


def stage_masks(plan: DeploymentPlan, graph: ModelGraph) -> list[int]:
    return [graph.mask(s.modules) for s in plan.stages]


def residents_mapping(stage: StageAllocation) -> Mapping[int, list[Assignment]]:
    return stage.residents()
