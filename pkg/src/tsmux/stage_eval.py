"""Minimal stage latency and its allocation under per-GPU SM quota and memory limits.

The min-max objective is turned into repeated feasibility questions ("can every
module finish within tau?") answered by a backtracking search over deployment
options and GPU placements. tau is located on the lattice of optimistic option
bounds, narrowed by bisection and finished by strict descent, so the returned
stage time is the exact optimum over the quantized option space.
"""

from __future__ import annotations

import bisect
import math
import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from tsmux.errors import StageInfeasible
from tsmux.model import Assignment, ClusterSpec, StageAllocation, quota_levels
from tsmux.perf import InterferenceModel, ScalingSurface

BOUND_SLACK = 1e-12


@dataclass(frozen=True)
class Candidate:
    """A quantized deployment option annotated with its solo-profiled figures."""

    d: int
    units: int
    a: float
    latency: float
    bandwidth: float
    memory: float

    @property
    def demand(self) -> int:
        return self.d * self.units


@dataclass
class SolverStats:
    feasibility_calls: int = 0
    backtracks: int = 0
    nodes: int = 0
    elapsed: float = 0.0

    def add(self, other: "SolverStats") -> None:
        self.feasibility_calls += other.feasibility_calls
        self.backtracks += other.backtracks
        self.nodes += other.nodes
        self.elapsed += other.elapsed


@dataclass(frozen=True)
class StageEvalResult:
    stage_time: float
    allocation: StageAllocation
    stats: SolverStats = field(compare=False, default_factory=SolverStats)


def candidate_options(
    module_id: str,
    surface: ScalingSurface,
    cluster: ClusterSpec,
    granularity: float,
    memory_base: float = 0.0,
) -> list[Candidate]:
    """All profiled (d, a) pairs at this granularity that fit in GPU memory, fastest first.

    Quota levels below the lowest profiled quota are dropped (no extrapolation).
    """
    levels = quota_levels(granularity)
    out = []
    for d in surface.d_values:
        if d > cluster.gpu_count:
            continue
        for u in range(1, levels + 1):
            a = round(u * granularity, 12)
            if not surface.contains(d, a):
                continue
            lat, bw, mem = surface.lookup(d, a)
            mem += memory_base
            if mem > cluster.memory_capacity:
                continue
            out.append(Candidate(d, u, a, lat, bw, mem))
    out.sort(key=lambda c: (c.latency, c.d, c.units))
    return out


def _lower_bound(c: Candidate, model: InterferenceModel, levels: int) -> float:
    """Smallest rectified latency this option can reach in any colocation."""
    if not model.nonnegative:
        # at most `levels` residents per GPU, each with B in [0, 1]
        return c.latency + model.e1 + min(model.e2, 0.0) * levels + min(model.e3, 0.0)
    if model.include_self:
        return c.latency + model.e1 + model.e2 * c.bandwidth
    return c.latency + model.e1


class _Search:
    """One feasibility question at a fixed tau."""

    def __init__(self, evaluator: "StageEvaluator", modules: Sequence[str], tau: float, strict: bool, stats: SolverStats):
        self.ev = evaluator
        self.model = evaluator.model
        self.strict = strict
        self.tau = tau
        self.limit = tau * (1 + BOUND_SLACK) + BOUND_SLACK if math.isfinite(tau) else math.inf
        self.stats = stats
        self.pos = {m: i for i, m in enumerate(modules)}  # modules arrive in id order
        self.modules = list(modules)
        self.contention_free = self.model.e2 == 0 and self.model.e3 == 0
        # without contention the bound is the exact rectified latency, so no float slack is needed
        slack = not (strict and self.contention_free)
        opts, width = [], []
        for m in modules:
            keep = [c for c in evaluator.options[m] if self._under(self.ev.bound(c), slack=slack)]
            width.append(len(keep))
            if self.contention_free:
                # contention-free: the delay is the constant e1, so per DP degree only the
                # cheapest quota meeting tau matters (fewer units never costs latency headroom)
                cheapest: dict[int, Candidate] = {}
                for c in keep:
                    if self._under(c.latency + self.model.e1, slack=slack):
                        if c.d not in cheapest or c.units < cheapest[c.d].units:
                            cheapest[c.d] = c
                keep = [c for c in keep if cheapest.get(c.d) is c]
            else:
                keep = self._undominated(keep)
            opts.append(keep)
        self.opts = opts
        # fail-first: fewest options meeting tau (counted before dominance pruning, which mostly
        # removes duplicated quota levels); ties go to the slowest module, which has the least headroom
        self.order = sorted(
            range(len(modules)),
            key=lambda i: (width[i], -min((c.latency for c in opts[i]), default=0.0), modules[i]),
        )
        n = len(modules)
        # suffix summaries of the modules still to be placed after depth i
        self.rem_min_demand = [0] * (n + 1)
        self.rem_min_units = [math.inf] * (n + 1)
        self.rem_min_bw = [1.0] * (n + 1)
        # modules whose every option takes more than half a GPU can never share one with each other
        half = evaluator.levels / 2
        self.rem_big_d = [0] * (n + 1)
        self.rem_big_units = [math.inf] * (n + 1)
        for depth in range(n - 1, -1, -1):
            o = opts[self.order[depth]]
            md = min((c.demand for c in o), default=math.inf)
            self.rem_min_demand[depth] = self.rem_min_demand[depth + 1] + md
            self.rem_min_units[depth] = min(self.rem_min_units[depth + 1], min((c.units for c in o), default=math.inf))
            self.rem_min_bw[depth] = min(self.rem_min_bw[depth + 1], min((c.bandwidth for c in o), default=1.0))
            big = bool(o) and all(c.units > half for c in o)
            self.rem_big_d[depth] = self.rem_big_d[depth + 1] + (min(c.d for c in o) if big else 0)
            self.rem_big_units[depth] = min(
                self.rem_big_units[depth + 1], min(c.units for c in o) if big else math.inf
            )
        g = evaluator.cluster.gpu_count
        self.used = [0] * g
        self.mem = [0.0] * g
        self.res: list[list[tuple[int, int]]] = [[] for _ in range(g)]  # (module pos, option idx)
        self.choice: list[tuple[Candidate, tuple[int, ...]] | None] = [None] * n
        self.failed: set = set()

    def _undominated(self, keep: list[Candidate]) -> list[Candidate]:
        """Drop options another option beats on every axis: swapping it in never breaks feasibility."""
        # delay never falls as a co-resident's B rises when both coefficients are non-negative
        monotone = self.model.e2 >= 0 and self.model.e3 >= 0
        out = []
        for i, c in enumerate(keep):
            beaten = False
            for j, o in enumerate(keep):
                if j == i or o.d != c.d:
                    continue
                bw_ok = o.bandwidth <= c.bandwidth if monotone else o.bandwidth == c.bandwidth
                key_o = (o.units, o.latency, o.memory, o.bandwidth)
                key_c = (c.units, c.latency, c.memory, c.bandwidth)
                if (bw_ok and o.units <= c.units and o.latency <= c.latency and o.memory <= c.memory
                        and (key_o != key_c or j < i)):
                    beaten = True
                    break
            if not beaten:
                out.append(c)
        return out

    def _under(self, value: float, slack: bool = False) -> bool:
        lim = self.limit if slack else self.tau
        return value < lim if self.strict and not slack else value <= lim

    def run(self) -> StageAllocation | None:
        if any(not o for o in self.opts):
            return None
        if self.rem_min_demand[0] > self.ev.levels * self.ev.cluster.gpu_count:
            return None
        if not self._big_ok(0):
            return None
        if not self._descend(0):
            return None
        xs = []
        for i, m in enumerate(self.modules):
            c, gpus = self.choice[i]
            xs.append(Assignment(m, c.d, c.a, gpus, c.memory))
        return StageAllocation(tuple(xs))

    # -- search

    def _gpu_signature(self, r: int):
        if self.contention_free:
            # only remaining capacity matters when co-residents cannot slow anyone down
            return self.used[r], self.mem[r]
        return tuple(sorted(self.res[r]))

    def _state_key(self, depth: int):
        return depth, tuple(sorted(self._gpu_signature(r) for r in range(len(self.res))))

    def _descend(self, depth: int) -> bool:
        if depth == len(self.order):
            return self._leaf_ok()
        key = self._state_key(depth)
        if key in self.failed:
            return False
        self.stats.nodes += 1
        i = self.order[depth]
        levels = self.ev.levels
        cap = self.ev.cluster.memory_capacity
        for k, c in enumerate(self.opts[i]):
            eligible = [
                r for r in range(len(self.used))
                if self.used[r] + c.units <= levels and self.mem[r] + c.memory <= cap
            ]
            if len(eligible) < c.d:
                continue
            for gpus in self._placements(eligible, c.d):
                self._place(i, k, c, gpus)
                if self._bounds_ok(depth, gpus) and self._descend(depth + 1):
                    return True
                self._unplace(i, k, c, gpus)
                self.stats.backtracks += 1
        self.failed.add(key)
        return False

    def _placements(self, eligible: list[int], d: int):
        """Canonical GPU subsets: GPUs in identical states are interchangeable."""
        groups: dict[tuple, list[int]] = {}
        for r in eligible:
            groups.setdefault(self._gpu_signature(r), []).append(r)
        glist = list(groups.values())

        def rec(gi: int, need: int, acc: list[int]):
            if need == 0:
                yield tuple(acc)
                return
            if gi == len(glist):
                return
            room = sum(len(x) for x in glist[gi:])
            if room < need:
                return
            grp = glist[gi]
            for take in range(min(need, len(grp)), -1, -1):
                yield from rec(gi + 1, need - take, acc + grp[:take])

        yield from rec(0, d, [])

    def _place(self, i, k, c, gpus):
        for r in gpus:
            self.used[r] += c.units
            self.mem[r] += c.memory
            self.res[r].append((i, k))
        self.choice[i] = (c, gpus)

    def _unplace(self, i, k, c, gpus):
        for r in gpus:
            self.used[r] -= c.units
            self.mem[r] -= c.memory
            self.res[r].remove((i, k))
        self.choice[i] = None

    def _gpu_bws(self, r: int, skip: int | None) -> list[float]:
        out = []
        for j, k in sorted(self.res[r]):
            if j != skip:
                out.append(self.opts[j][k].bandwidth)
        return out

    def _bounds_ok(self, depth: int, gpus: tuple[int, ...]) -> bool:
        free = self.ev.levels * len(self.used) - sum(self.used)
        if self.rem_min_demand[depth + 1] > free:
            return False
        if not self._big_ok(depth + 1):
            return False
        model = self.model
        remaining = len(self.order) - depth - 1
        affected = {j for r in gpus for j, _ in self.res[r]}
        for j in affected:
            c, jg = self.choice[j]
            worst = -math.inf
            for r in jg:
                bws = self._gpu_bws(r, None if model.include_self else j)
                adds = 0
                if remaining and self.rem_min_units[depth + 1] <= self.ev.levels - self.used[r]:
                    adds = min(remaining, (self.ev.levels - self.used[r]) // self.rem_min_units[depth + 1])
                worst = max(worst, self._delay_floor(bws, adds, self.rem_min_bw[depth + 1]))
            if not self._under(c.latency + worst, slack=True):
                return False
        return True

    def _big_ok(self, depth: int) -> bool:
        need = self.rem_big_d[depth]
        if not need:
            return True
        u = self.rem_big_units[depth]
        return sum(1 for x in self.used if self.ev.levels - x >= u) >= need

    def _delay_floor(self, bws: list[float], adds: int, min_bw: float) -> float:
        """Smallest delay this GPU can end with after up to `adds` more residents (B in [min_bw, 1])."""
        model = self.model
        if not bws and not adds:
            return model.e1
        if model.e2 >= 0 and model.e3 >= 0:
            # the delay grows with every added B, so k added residents at B = min_bw is the floor
            s = sum(bws)
            p = math.prod(bws) if bws else 1.0
            best = model.e1 + model.e2 * s + (model.e3 * p if bws else 0.0)
            for k in range(1, adds + 1):
                p *= min_bw
                best = min(best, model.e1 + model.e2 * (s + k * min_bw) + model.e3 * p)
            return best
        # the sum only grows, by at most one per added resident
        s = sum(bws)
        term2 = model.e2 * (s if model.e2 >= 0 else s + adds)
        # the product only shrinks, by at most min_bw per added resident
        if bws:
            p_hi = math.prod(bws)
            p_lo = p_hi * (min_bw ** adds if adds else 1.0)
        else:
            p_hi, p_lo = 1.0, 0.0
        term3 = model.e3 * (p_lo if model.e3 >= 0 else p_hi)
        return model.e1 + term2 + term3

    def _leaf_ok(self) -> bool:
        model = self.model
        for j, (c, jg) in enumerate(self.choice):
            worst = max(model.delay(self._gpu_bws(r, None if model.include_self else j)) for r in jg)
            if not self._under(c.latency + worst):
                return False
        return True


def allocation_time(alloc: StageAllocation, options: Mapping[str, Sequence[Candidate]], model: InterferenceModel) -> float:
    """Max rectified latency of an allocation, from candidate figures (same arithmetic as perf)."""
    info = {}
    for x in alloc.assignments:
        for c in options[x.module]:
            if c.d == x.d and c.a == x.a:
                info[x.module] = c
                break
    res = alloc.residents()
    worst = -math.inf
    for x in alloc.assignments:
        delays = []
        for r in x.gpus:
            bws = [info[y.module].bandwidth for y in res[r] if model.include_self or y.module != x.module]
            delays.append(model.delay(bws))
        worst = max(worst, info[x.module].latency + max(delays))
    return worst


def fill_spare_quota(
    alloc: StageAllocation,
    options: Mapping[str, Sequence[Candidate]],
    model: InterferenceModel,
    levels: int,
    granularity: float,
    memory_capacity: float,
) -> StageAllocation:
    """Hand unallocated quota units to resident modules while the stage time does not grow.

    Modules take one extra unit at a time, in id order, on all of their GPUs at
    once; a step is kept only if per-GPU quota and memory still fit and the
    recomputed stage time is no larger than before.
    """
    by_key = {m: {(c.d, c.units): c for c in opts} for m, opts in options.items()}
    current = {x.module: by_key[x.module][(x.d, round(x.a / granularity))] for x in alloc.assignments}
    gpus = {x.module: x.gpus for x in alloc.assignments}
    limit = allocation_time(alloc, options, model)

    def build(choice):
        return StageAllocation(
            tuple(Assignment(m, c.d, c.a, gpus[m], c.memory) for m, c in sorted(choice.items()))
        )

    changed = True
    while changed:
        changed = False
        for m in sorted(current):
            c = current[m]
            nxt = by_key[m].get((c.d, c.units + 1))
            if nxt is None:
                continue
            trial = dict(current)
            trial[m] = nxt
            cand = build(trial)
            res = cand.residents()
            if any(
                sum(trial[y.module].units for y in res[r]) > levels
                or sum(trial[y.module].memory for y in res[r]) > memory_capacity
                for r in gpus[m]
            ):
                continue
            if allocation_time(cand, options, model) <= limit:
                current = trial
                changed = True
    return build(current)


class StageEvaluator:
    """Solves stages for one (cluster, surfaces, interference model, granularity) setting."""

    def __init__(
        self,
        cluster: ClusterSpec,
        surfaces: Mapping[str, ScalingSurface],
        model: InterferenceModel,
        granularity: float = 0.1,
        memory_base: Mapping[str, float] | None = None,
        rel_tol: float = 1e-3,
        fill: bool = True,
    ):
        self.cluster = cluster
        self.surfaces = surfaces
        self.model = model
        self.granularity = granularity
        self.levels = quota_levels(granularity)
        self.rel_tol = rel_tol
        self.fill = fill
        memory_base = memory_base or {}
        self.options = {
            m: candidate_options(m, s, cluster, granularity, memory_base.get(m, 0.0))
            for m, s in surfaces.items()
        }
        self._bound_cache: dict[Candidate, float] = {}

    def bound(self, c: Candidate) -> float:
        v = self._bound_cache.get(c)
        if v is None:
            v = self._bound_cache[c] = _lower_bound(c, self.model, self.levels)
        return v

    def min_base(self, module: str) -> float:
        return self.options[module][0].latency if self.options[module] else math.inf

    def feasible(self, modules: Sequence[str], tau: float, strict: bool = False, stats: SolverStats | None = None):
        stats = stats if stats is not None else SolverStats()
        stats.feasibility_calls += 1
        return _Search(self, sorted(modules), tau, strict, stats).run()

    def evaluate(self, modules: Sequence[str]) -> StageEvalResult:
        t0 = time.perf_counter()
        modules = sorted(modules)
        stats = SolverStats()
        for m in modules:
            if not self.options.get(m):
                raise StageInfeasible(modules, f"module {m} has no option that fits in GPU memory")
        bounds = {m: sorted({self.bound(c) for c in self.options[m]}) for m in modules}
        lb = max(b[0] for b in bounds.values())
        lattice = sorted({v for b in bounds.values() for v in b if v >= lb})

        # smallest lattice value admitting a feasible allocation
        best = None
        lo_i, hi_i = 0, len(lattice) - 1
        while lo_i <= hi_i:
            mid = (lo_i + hi_i) // 2
            alloc = self.feasible(modules, lattice[mid], stats=stats)
            if alloc is None:
                lo_i = mid + 1
            else:
                best = alloc
                hi_i = mid - 1
        lower = lattice[lo_i - 1] if lo_i > 0 else -math.inf
        if best is None:
            best = self.feasible(modules, math.inf, stats=stats)
            if best is None:
                raise StageInfeasible(modules, "quota or memory capacity exhausted")
            lower = lattice[-1]
        upper = allocation_time(best, self.options, self.model)

        # continuous bisection between the infeasible lattice point and the incumbent
        while math.isfinite(lower) and upper - lower > self.rel_tol * abs(upper):
            mid = 0.5 * (lower + upper)
            alloc = self.feasible(modules, mid, stats=stats)
            if alloc is None:
                lower = mid
            else:
                best, upper = alloc, allocation_time(alloc, self.options, self.model)

        # exact finish: nothing strictly faster than the incumbent exists
        while True:
            alloc = self.feasible(modules, upper, strict=True, stats=stats)
            if alloc is None:
                break
            best, upper = alloc, allocation_time(alloc, self.options, self.model)
        if self.fill:
            best = fill_spare_quota(
                best, self.options, self.model, self.levels, self.granularity, self.cluster.memory_capacity
            )
            upper = allocation_time(best, self.options, self.model)
        stats.elapsed = time.perf_counter() - t0
        return StageEvalResult(upper, best, stats)


def stage_eval(
    modules: Sequence[str],
    cluster: ClusterSpec,
    surfaces: Mapping[str, ScalingSurface],
    model: InterferenceModel,
    granularity: float = 0.1,
    memory_base: Mapping[str, float] | None = None,
) -> StageEvalResult:
    return StageEvaluator(cluster, surfaces, model, granularity, memory_base).evaluate(modules)


def feasible(
    modules: Sequence[str],
    tau: float,
    cluster: ClusterSpec,
    surfaces: Mapping[str, ScalingSurface],
    model: InterferenceModel,
    granularity: float = 0.1,
    memory_base: Mapping[str, float] | None = None,
) -> StageAllocation | None:
    return StageEvaluator(cluster, surfaces, model, granularity, memory_base).feasible(modules, tau)
