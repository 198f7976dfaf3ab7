"""Exhaustive ground truth for small instances.

Enumerates every dependency-legal ordered stage partition and, per stage, every
quantized (d, a) choice and GPU placement. Shares only the performance model
with the heuristic solver; the search code is independent.
"""

from __future__ import annotations

import itertools
import math
from functools import lru_cache
from typing import Iterator, Mapping

from tsmux.errors import StageInfeasible, TooLarge
from tsmux.model import (
    Assignment,
    ClusterSpec,
    DeploymentPlan,
    ModelGraph,
    StageAllocation,
    quota_levels,
)
from tsmux.perf import InterferenceModel, ScalingSurface

MAX_MODULES = 8


def enumerate_partitions(graph: ModelGraph) -> Iterator[tuple[frozenset[str], ...]]:
    """Every ordered set partition whose edges all point to strictly later stages."""
    n = len(graph.ids)
    if n > MAX_MODULES:
        raise TooLarge(n, MAX_MODULES)
    preds = {m: frozenset(graph.predecessors[m]) for m in graph.ids}
    everything = frozenset(graph.ids)

    def rec(placed: frozenset[str], acc: tuple):
        if placed == everything:
            yield acc
            return
        ready = sorted(m for m in everything - placed if preds[m] <= placed)
        for r in range(1, len(ready) + 1):
            for subset in itertools.combinations(ready, r):
                s = frozenset(subset)
                yield from rec(placed | s, acc + (s,))

    yield from rec(frozenset(), ())


def ordered_bell(n: int) -> int:
    """Number of ordered set partitions of n labelled elements (Fubini numbers)."""
    a = [1]
    for k in range(1, n + 1):
        a.append(sum(math.comb(k, j) * a[k - j] for j in range(1, k + 1)))
    return a[n]


def _options(surface: ScalingSurface, cluster: ClusterSpec, granularity: float, memory_base: float):
    out = []
    for d in surface.d_values:
        if d > cluster.gpu_count:
            continue
        for u in range(1, quota_levels(granularity) + 1):
            a = round(u * granularity, 12)
            if not surface.contains(d, a):
                continue
            lat, bw, mem = surface.lookup(d, a)
            if mem + memory_base <= cluster.memory_capacity:
                out.append((lat, d, u, a, bw, mem + memory_base))
    out.sort()
    return out


def exhaustive_stage(
    modules,
    cluster: ClusterSpec,
    surfaces: Mapping[str, ScalingSurface],
    model: InterferenceModel,
    granularity: float,
    memory_base: Mapping[str, float] | None = None,
) -> tuple[float, StageAllocation]:
    """Minimum over all allocations of the slowest module's rectified latency."""
    modules = sorted(modules)
    memory_base = memory_base or {}
    opts = [_options(surfaces[m], cluster, granularity, memory_base.get(m, 0.0)) for m in modules]
    if any(not o for o in opts):
        raise StageInfeasible(modules, "a module has no option within GPU memory")
    levels = quota_levels(granularity)
    G = cluster.gpu_count
    used = [0] * G
    mem = [0.0] * G
    on_gpu: list[list[int]] = [[] for _ in range(G)]
    pick: list = [None] * len(modules)
    best = [math.inf, None]
    bound_ok = model.nonnegative

    def exact() -> float:
        worst = -math.inf
        for i, (o, gpus) in enumerate(pick):
            delays = []
            for r in gpus:
                bws = [pick[j][0][4] for j in sorted(on_gpu[r]) if model.include_self or j != i]
                delays.append(model.delay(bws))
            worst = max(worst, o[0] + max(delays))
        return worst

    def partial_bound() -> float:
        # sum(B) only grows and the product term is non-negative
        lb = -math.inf
        for i, p in enumerate(pick):
            if p is None:
                continue
            o, gpus = p
            w = max(
                model.e1 + model.e2 * sum(pick[j][0][4] for j in on_gpu[r] if model.include_self or j != i)
                for r in gpus
            )
            lb = max(lb, o[0] + w)
        return lb

    def rec(i: int):
        if i == len(modules):
            t = exact()
            if t < best[0]:
                best[0] = t
                best[1] = [(modules[j], pick[j][0], pick[j][1]) for j in range(len(modules))]
            return
        for o in opts[i]:
            lat, d, u, a, bw, m = o
            ok = [r for r in range(G) if used[r] + u <= levels and mem[r] + m <= cluster.memory_capacity]
            busy = [r for r in ok if on_gpu[r]]
            empty = [r for r in ok if not on_gpu[r]]
            # empty GPUs are interchangeable: always take the lowest-indexed ones
            for k in range(0, min(d, len(busy)) + 1):
                if d - k > len(empty):
                    continue
                for chosen in itertools.combinations(busy, k):
                    gpus = tuple(sorted(chosen + tuple(empty[: d - k])))
                    for r in gpus:
                        used[r] += u
                        mem[r] += m
                        on_gpu[r].append(i)
                    pick[i] = (o, gpus)
                    if not bound_ok or partial_bound() < best[0]:
                        rec(i + 1)
                    pick[i] = None
                    for r in gpus:
                        used[r] -= u
                        mem[r] -= m
                        on_gpu[r].remove(i)

    rec(0)
    if best[1] is None:
        raise StageInfeasible(modules, "quota or memory capacity exhausted")
    alloc = StageAllocation(
        tuple(Assignment(mid, o[1], o[3], gpus, o[5]) for mid, o, gpus in best[1])
    )
    return best[0], alloc


def brute_force_optimum(
    graph: ModelGraph,
    cluster: ClusterSpec,
    surfaces: Mapping[str, ScalingSurface],
    model: InterferenceModel,
    granularity: float = 0.25,
) -> DeploymentPlan:
    """Globally optimal plan; ties prefer fewer stages, then smaller stage bitmasks."""
    n = len(graph.ids)
    if n > MAX_MODULES:
        raise TooLarge(n, MAX_MODULES)
    memory_base = {m.id: m.memory_base for m in graph.modules}

    @lru_cache(maxsize=None)
    def stage(mods: frozenset[str]):
        try:
            return exhaustive_stage(mods, cluster, surfaces, model, granularity, memory_base)
        except StageInfeasible:
            if len(mods) == 1:
                raise
            return None

    best_key = None
    best = None
    for part in enumerate_partitions(graph):
        solved = []
        for s in part:
            r = stage(s)
            if r is None:
                break
            solved.append(r)
        else:
            total = math.fsum(t for t, _ in solved)
            key = (total, len(part), tuple(graph.mask(s) for s in part))
            if best_key is None or key < best_key:
                best_key, best = key, solved
    return DeploymentPlan(tuple(a for _, a in best), tuple(t for t, _ in best), granularity)
