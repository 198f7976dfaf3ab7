"""Greedy agglomerative stage merging with early pruning and result caching."""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

from tsmux.errors import StageInfeasible, ValidationError
from tsmux.model import ClusterSpec, DeploymentPlan, ModelGraph, topological_order
from tsmux.perf import InterferenceModel, ScalingSurface
from tsmux.stage_eval import SolverStats, StageEvalResult, StageEvaluator

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolverConfig:
    prune: bool = True
    cache: bool = True
    check_invariants: bool = False


@dataclass(frozen=True)
class MergeCandidate:
    stage_x: int
    stage_y: int
    merged_modules: int
    gain: float | None = None
    status: str = "evaluated"  # illegal | pruned | infeasible | evaluated
    merged_time: float | None = None
    cache_hit: bool = False


@dataclass
class RoundRecord:
    index: int
    stages: list[int]
    iteration_time: float
    candidates: list[MergeCandidate] = field(default_factory=list)
    chosen: tuple[int, int] | None = None
    gain: float = 0.0


@dataclass
class SolveTrace:
    rounds: list[RoundRecord] = field(default_factory=list)
    stats: SolverStats = field(default_factory=SolverStats)
    stage_evals: int = 0
    cache_hits: int = 0
    cache_misses: int = 0
    pruned: int = 0
    elapsed: float = 0.0

    def to_dict(self, with_counters: bool = True, graph: ModelGraph | None = None) -> dict:
        """Plain-data trace; with a graph, module masks become sorted module-id lists."""

        def names(mask):
            return mask if graph is None else sorted(graph.members(mask))

        def cand(c):
            d = {k: v for k, v in asdict(c).items() if with_counters or k != "cache_hit"}
            d["merged_modules"] = names(c.merged_modules)
            return d

        out = {
            "rounds": [
                {
                    "index": r.index,
                    "stages": [names(m) for m in r.stages],
                    "iteration_time": r.iteration_time,
                    "chosen": list(r.chosen) if r.chosen else None,
                    "gain": r.gain,
                    "candidates": [cand(c) for c in r.candidates],
                }
                for r in self.rounds
            ]
        }
        if with_counters:
            out["stats"] = {
                "feasibility_calls": self.stats.feasibility_calls,
                "backtracks": self.stats.backtracks,
                "nodes": self.stats.nodes,
                "stage_evals": self.stage_evals,
                "cache_hits": self.cache_hits,
                "cache_misses": self.cache_misses,
                "pruned": self.pruned,
                "elapsed": self.elapsed,
            }
        return out


class EvalCache:
    """Stage results keyed by (module bitmask, granularity, interference fingerprint)."""

    def __init__(self):
        self._data: dict[tuple, StageEvalResult | StageInfeasible] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def get(self, key):
        with self._lock:
            v = self._data.get(key)
            if v is None:
                self.misses += 1
            else:
                self.hits += 1
            return v

    def put(self, key, value):
        """Insert if absent; the first stored result wins."""
        with self._lock:
            return self._data.setdefault(key, value)

    def __len__(self):
        return len(self._data)


def _stage_edges(stages: Sequence[int], graph: ModelGraph) -> dict[int, set[int]]:
    owner = {}
    for i, mask in enumerate(stages):
        for m in graph.members(mask):
            owner[m] = i
    out: dict[int, set[int]] = {i: set() for i in range(len(stages))}
    for u, v in graph.edges:
        if owner[u] != owner[v]:
            out[owner[u]].add(owner[v])
    return out


def merged_order(stages: Sequence[int], x: int, y: int, graph: ModelGraph) -> list[int] | None:
    """Stage list after merging y into x, or None if no dependency-respecting order exists.

    The merged stage takes position x; remaining stages keep their relative order
    unless an edge forces a stage to move after the merged one.
    """
    if not x < y:
        raise ValueError("merge expects x < y")
    merged = stages[x] | stages[y]
    if any(graph.reach_mask[m] & merged for m in graph.members(merged)):
        return None
    nodes = [merged if i == x else s for i, s in enumerate(stages) if i != y]
    succ = _stage_edges(nodes, graph)
    indeg = {i: 0 for i in range(len(nodes))}
    for i, vs in succ.items():
        for j in vs:
            indeg[j] += 1
    ready = sorted(i for i, k in indeg.items() if k == 0)
    order = []
    while ready:
        i = ready.pop(0)
        order.append(nodes[i])
        for j in succ[i]:
            indeg[j] -= 1
            if indeg[j] == 0:
                ready.append(j)
                ready.sort()
    if len(order) != len(nodes):
        return None
    return order


def legal_merge(stages: Sequence[int], x: int, y: int, graph: ModelGraph) -> bool:
    """Whether stages x and y can be merged with every edge still pointing forward."""
    return merged_order(stages, x, y, graph) is not None


def early_prune(t_x: float, t_y: float, t_lb: float, delta_best: float, wins_ties: bool = False) -> bool:
    """True when the merge gain upper bound t_x + t_y - t_lb cannot beat delta_best.

    With wins_ties the candidate would win an exact tie, so only a strictly
    smaller bound is pruned.
    """
    bound = t_x + t_y - t_lb
    return bound < delta_best or (bound == delta_best and not wins_ties)


def _tie_key(mask: int) -> tuple[int, int]:
    return bin(mask).count("1"), mask


def solve(
    graph: ModelGraph,
    cluster: ClusterSpec,
    surfaces: Mapping[str, ScalingSurface],
    model: InterferenceModel,
    granularity: float = 0.1,
    config: SolverConfig = SolverConfig(),
    cache: EvalCache | None = None,
) -> tuple[DeploymentPlan, SolveTrace]:
    t0 = time.perf_counter()
    evaluator = StageEvaluator(
        cluster, surfaces, model, granularity, {m.id: m.memory_base for m in graph.modules}
    )
    cache = cache if cache is not None else EvalCache()
    trace = SolveTrace()
    prune = config.prune and model.nonnegative
    min_base = {m: evaluator.min_base(m) for m in graph.ids}

    def evaluate(mask: int) -> tuple[StageEvalResult | StageInfeasible, bool]:
        key = (mask, granularity, model.fingerprint)
        if config.cache:
            hit = cache.get(key)
            if hit is not None:
                trace.cache_hits += 1
                return hit, True
            trace.cache_misses += 1
        trace.stage_evals += 1
        try:
            res: StageEvalResult | StageInfeasible = evaluator.evaluate(graph.members(mask))
            trace.stats.add(res.stats)
        except StageInfeasible as exc:
            res = exc
        if config.cache:
            res = cache.put(key, res)
        return res, False

    stages = [graph.mask([m]) for m in topological_order(graph)]
    results: list[StageEvalResult] = []
    for mask in stages:
        res, _ = evaluate(mask)
        if isinstance(res, StageInfeasible):
            raise res
        results.append(res)

    round_no = 0
    while True:
        total = sum(r.stage_time for r in results)
        record = RoundRecord(round_no, list(stages), total)
        trace.rounds.append(record)
        if config.check_invariants:
            _check_order(stages, graph)
        if len(stages) <= 1:
            break
        best = None
        best_key = None
        best_res = None
        delta_best = 0.0
        # legal pairs, visited best-first by their gain upper bound so pruning bites early
        pairs = []
        for x in range(len(stages)):
            for y in range(x + 1, len(stages)):
                merged = stages[x] | stages[y]
                if merged_order(stages, x, y, graph) is None:
                    record.candidates.append(MergeCandidate(x, y, merged, status="illegal"))
                    continue
                t_lb = max(min_base[m] for m in graph.members(merged))
                pairs.append((results[x].stage_time + results[y].stage_time - t_lb, x, y, t_lb))
        pairs.sort(key=lambda p: (-p[0], p[1], p[2]))
        for _, x, y, t_lb in pairs:
            merged = stages[x] | stages[y]
            key = _tie_key(merged)
            t_x, t_y = results[x].stage_time, results[y].stage_time
            if prune:
                wins = best is not None and key < best_key
                if early_prune(t_x, t_y, t_lb, delta_best, wins):
                    trace.pruned += 1
                    record.candidates.append(MergeCandidate(x, y, merged, status="pruned"))
                    continue
            res, hit = evaluate(merged)
            if isinstance(res, StageInfeasible):
                record.candidates.append(MergeCandidate(x, y, merged, status="infeasible", cache_hit=hit))
                continue
            gain = t_x + t_y - res.stage_time
            record.candidates.append(MergeCandidate(x, y, merged, gain, "evaluated", res.stage_time, hit))
            if gain > 0 and (best is None or gain > delta_best or (gain == delta_best and key < best_key)):
                best, best_key, best_res, delta_best = (x, y), key, res, gain
        if best is None:
            break
        x, y = best
        record.chosen = best
        record.gain = delta_best
        log.debug("round %d: merge stages %d and %d, gain %.6g s", round_no, x, y, delta_best)
        by_mask = {m: r for m, r in zip(stages, results)}
        by_mask[stages[x] | stages[y]] = best_res
        stages = merged_order(stages, x, y, graph)
        results = [by_mask[m] for m in stages]
        round_no += 1

    plan = DeploymentPlan(
        tuple(r.allocation for r in results),
        tuple(r.stage_time for r in results),
        granularity,
    )
    trace.elapsed = time.perf_counter() - t0
    return plan, trace


def _check_order(stages: Sequence[int], graph: ModelGraph) -> None:
    pos = {}
    for i, mask in enumerate(stages):
        for m in graph.members(mask):
            pos[m] = i
    for u, v in graph.edges:
        if not pos[u] < pos[v]:
            raise ValidationError(f"intermediate stage list breaks edge {u}->{v}")
