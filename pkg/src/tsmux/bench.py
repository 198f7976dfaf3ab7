"""Seeded benchmark suites producing CSV-ready rows.

optimality   GAHC vs the exhaustive oracle on random small DAGs
scale        the solver vs baselines on the OFASys preset across GPU counts
granularity  solve time and plan quality across SM-quota granularities
ablation     interference-unaware vs additive-only vs full model
"""

from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from tsmux.errors import UnknownSuite
from tsmux.gahc import solve
from tsmux.model import ModelGraph, make_graph
from tsmux.oracle import brute_force_optimum
from tsmux.perf import InterferenceModel, fit_interference, prediction_errors
from tsmux.profiler import (
    DEFAULT_GROUND_TRUTH,
    OFASYS_ENCODERS,
    fan_in_workloads,
    generate_colocation_samples,
    generate_surfaces,
    make_cluster,
    preset,
    random_dag_edges,
    random_workloads,
)
from tsmux.simulator import SimConfig, simulate, simulate_baseline

log = logging.getLogger(__name__)

SUITES = ("optimality", "scale", "granularity", "ablation")
GRANULARITIES = (0.3, 0.2, 0.1, 0.05, 0.01)
EQUAL_RTOL = 1e-6


@dataclass(frozen=True)
class Instance:
    seed: int
    graph: ModelGraph
    cluster: object
    surfaces: dict
    workloads: tuple


def random_instance(seed: int, modules: int, gpus: int = 4, density: float = 0.3) -> Instance:
    rng = np.random.default_rng(seed)
    wl = random_workloads(rng, modules)
    edges = random_dag_edges(rng, [w.module_id for w in wl], density)
    graph = make_graph([w.spec() for w in wl], edges)
    cluster = make_cluster(gpus)
    return Instance(seed, graph, cluster, generate_surfaces(wl, cluster), tuple(wl))


def ofasys_subset(seed: int, encoders: int, gpus: int = 4) -> Instance:
    """OFASys backbone with a seeded choice of `encoders` of its encoders."""
    rng = np.random.default_rng(seed)
    picks = sorted(int(i) for i in rng.choice(len(OFASYS_ENCODERS), size=encoders, replace=False))
    wl, edges = fan_in_workloads([OFASYS_ENCODERS[i] for i in picks])
    graph = make_graph([w.spec() for w in wl], edges)
    cluster = make_cluster(gpus)
    return Instance(seed, graph, cluster, generate_surfaces(wl, cluster), tuple(wl))


def _pmap(fn: Callable, items: Sequence, threads: int = 1) -> list:
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------- optimality


def optimality_row(args) -> dict:
    seed, modules, gpus, g = args
    inst = random_instance(seed, modules, gpus)
    model = DEFAULT_GROUND_TRUTH
    t0 = time.perf_counter()
    plan, _ = solve(inst.graph, inst.cluster, inst.surfaces, model, g)
    t1 = time.perf_counter()
    opt = brute_force_optimum(inst.graph, inst.cluster, inst.surfaces, model, g)
    t2 = time.perf_counter()
    ratio = opt.predicted_iteration_time / plan.predicted_iteration_time
    return {
        "modules": modules,
        "seed": seed,
        "oracle_time": opt.predicted_iteration_time,
        "gahc_time": plan.predicted_iteration_time,
        "ratio": ratio,
        "equal": int(abs(plan.predicted_iteration_time - opt.predicted_iteration_time)
                     <= EQUAL_RTOL * opt.predicted_iteration_time),
        "gahc_stages": len(plan.stages),
        "oracle_stages": len(opt.stages),
        "gahc_solve_s": t1 - t0,
        "oracle_solve_s": t2 - t1,
    }


def bench_optimality(
    seeds: int = 100,
    sizes: Sequence[int] = (4, 6),
    gpus: int = 4,
    granularity: float = 0.25,
    base_seed: int = 0,
    threads: int = 1,
) -> list[dict]:
    jobs = [(base_seed + s, n, gpus, granularity) for n in sizes for s in range(seeds)]
    return _pmap(optimality_row, jobs, threads)


def summarize_optimality(rows: Sequence[dict]) -> list[dict]:
    out = []
    for n in sorted({r["modules"] for r in rows}):
        sel = [r for r in rows if r["modules"] == n]
        ratios = np.array([r["ratio"] for r in sel])
        out.append({
            "modules": n,
            "instances": len(sel),
            "equal_fraction": sum(r["equal"] for r in sel) / len(sel),
            "median_ratio": float(np.median(ratios)),
            "mean_ratio": float(np.mean(ratios)),
            "min_ratio": float(np.min(ratios)),
        })
    return out


# ---------------------------------------------------------------- scale


def scale_row(args) -> dict:
    gpus, g, model_name = args
    p = preset(model_name, gpus)
    surfaces = p.surfaces()
    model = p.ground_truth
    t0 = time.perf_counter()
    plan, trace = solve(p.graph, p.cluster, surfaces, model, g)
    solve_s = time.perf_counter() - t0
    cfg = SimConfig()
    ours = simulate(plan, surfaces, model, cfg, p.graph, p.cluster)
    _, distmm = simulate_baseline(p.graph, p.cluster, surfaces, model, "distmm", g, cfg)
    _, megatron = simulate_baseline(p.graph, p.cluster, surfaces, model, "megatron", g, cfg)
    return {
        "preset": p.name,
        "gpus": gpus,
        "solver_time": ours.iteration_time,
        "distmm_time": distmm.iteration_time,
        "megatron_time": megatron.iteration_time,
        "speedup_vs_distmm": distmm.iteration_time / ours.iteration_time,
        "speedup_vs_megatron": megatron.iteration_time / ours.iteration_time,
        "solver_util": ours.mean_utilization,
        "distmm_util": distmm.mean_utilization,
        "megatron_util": megatron.mean_utilization,
        "stages": len(plan.stages),
        "feasibility_calls": trace.stats.feasibility_calls,
        "solve_s": solve_s,
    }


def bench_scale(
    gpu_counts: Sequence[int] = (2, 4, 8),
    granularity: float = 0.1,
    model_name: str = "ofasys",
    threads: int = 1,
) -> list[dict]:
    return _pmap(scale_row, [(n, granularity, model_name) for n in gpu_counts], threads)


# ---------------------------------------------------------------- granularity


def granularity_rows(args) -> list[dict]:
    seed, encoders, gpus, grid, reference_g, repeats = args
    inst = ofasys_subset(seed, encoders, gpus)
    model = DEFAULT_GROUND_TRUTH
    times, solve_s = {}, {}
    for g in grid:
        # best of several runs: the solves are short enough that scheduler noise matters
        runs = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            plan, _ = solve(inst.graph, inst.cluster, inst.surfaces, model, g)
            runs.append(time.perf_counter() - t0)
        solve_s[g] = min(runs)
        times[g] = plan.predicted_iteration_time
    oracle = brute_force_optimum(inst.graph, inst.cluster, inst.surfaces, model, reference_g)
    # best known plan: the oracle at the reference granularity or any sweep plan, whichever is faster
    best = min([oracle.predicted_iteration_time, *times.values()])
    return [
        {
            "seed": seed,
            "granularity": g,
            "plan_time": times[g],
            "reference_time": best,
            "ratio": best / times[g],
            "solve_s": solve_s[g],
        }
        for g in grid
    ]


def bench_granularity(
    seeds: int = 10,
    encoders: int = 3,
    gpus: int = 4,
    grid: Sequence[float] = GRANULARITIES,
    reference_g: float = 0.1,
    base_seed: int = 0,
    threads: int = 1,
    repeats: int = 3,
) -> list[dict]:
    jobs = [(base_seed + s, encoders, gpus, tuple(grid), reference_g, repeats) for s in range(seeds)]
    return [row for rows in _pmap(granularity_rows, jobs, threads) for row in rows]


def summarize_granularity(rows: Sequence[dict]) -> list[dict]:
    out = []
    for g in sorted({r["granularity"] for r in rows}, reverse=True):
        sel = [r for r in rows if r["granularity"] == g]
        out.append({
            "granularity": g,
            "instances": len(sel),
            "total_solve_s": float(sum(r["solve_s"] for r in sel)),
            "median_ratio": float(np.median([r["ratio"] for r in sel])),
            "mean_ratio": float(np.mean([r["ratio"] for r in sel])),
        })
    return out


# ---------------------------------------------------------------- ablation

ABLATION_VARIANTS = ("unaware", "additive", "full")


def fitted_variants(samples) -> dict[str, InterferenceModel]:
    return {
        "unaware": InterferenceModel.unaware(),
        "additive": fit_interference(samples, additive_only=True),
        "full": fit_interference(samples),
    }


def ablation_rows(args) -> list[dict]:
    seed, noise, n_train, n_test, gpus, g = args
    p = preset("ofasys", gpus)
    truth = p.ground_truth
    encoders = [w for w in p.workloads if w.module_id != "llm"][:8]
    train = generate_colocation_samples(encoders, p.cluster, truth, seed, n_train, noise, max_members=8)
    test = generate_colocation_samples(encoders, p.cluster, truth, seed + 100_000, n_test, noise, max_members=8)
    models = fitted_variants(train)
    surfaces = p.surfaces()
    rows = []
    for name in ABLATION_VARIANTS:
        m = models[name]
        plan, _ = solve(p.graph, p.cluster, surfaces, m, g)
        # every plan is judged under the ground-truth interference
        actual = simulate(plan, surfaces, truth, SimConfig(), p.graph, p.cluster)
        rows.append({
            "seed": seed,
            "variant": name,
            "e1": m.e1,
            "e2": m.e2,
            "e3": m.e3,
            "r_squared": m.r_squared if name != "unaware" else float("nan"),
            "mean_prediction_error": float(np.mean(prediction_errors(test, m))),
            "predicted_time": plan.predicted_iteration_time,
            "actual_time": actual.iteration_time,
            "stages": len(plan.stages),
        })
    return rows


def bench_ablation(
    seeds: int = 5,
    noise: float = 0.02,
    n_train: int = 200,
    n_test: int = 200,
    gpus: int = 8,
    granularity: float = 0.1,
    base_seed: int = 0,
    threads: int = 1,
) -> list[dict]:
    jobs = [(base_seed + s, noise, n_train, n_test, gpus, granularity) for s in range(seeds)]
    return [row for rows in _pmap(ablation_rows, jobs, threads) for row in rows]


# ---------------------------------------------------------------- plumbing


def run_suite(name: str, seeds: int | None = None, base_seed: int = 0, threads: int = 1) -> list[dict]:
    if name == "optimality":
        return bench_optimality(seeds or 100, base_seed=base_seed, threads=threads)
    if name == "scale":
        return bench_scale(threads=threads)
    if name == "granularity":
        return bench_granularity(seeds or 10, base_seed=base_seed, threads=threads)
    if name == "ablation":
        return bench_ablation(seeds or 5, base_seed=base_seed, threads=threads)
    raise UnknownSuite(f"unknown suite {name!r}; choose from {', '.join(SUITES)}")


def summarize(name: str, rows: Sequence[dict]) -> list[dict] | None:
    if name == "optimality":
        return summarize_optimality(rows)
    if name == "granularity":
        return summarize_granularity(rows)
    return None


def write_csv(path, rows: Sequence[dict]) -> None:
    if not rows:
        raise ValueError("no rows to write")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
