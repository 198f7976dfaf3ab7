"""Command-line entry point: profile, fit, plan, simulate, bench, oracle.

Exit codes: 0 success, 2 validation failure, 3 infeasible, 4 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from tsmux import bench, formats
from tsmux.errors import (
    DegenerateDesignMatrix,
    EmptyPlan,
    InfeasibleBaseline,
    InsufficientSamples,
    OutOfRange,
    StageInfeasible,
    TooLarge,
    TsmuxError,
    UnknownPreset,
    UnknownSuite,
    ValidationError,
)
from tsmux.gahc import SolverConfig, solve
from tsmux.model import make_graph, validate_plan
from tsmux.perf import fit_interference, prediction_errors
from tsmux.profiler import (
    DEFAULT_GROUND_TRUTH,
    PRESET_NAMES,
    generate_colocation_samples,
    generate_surfaces,
    make_cluster,
    preset,
)
from tsmux.simulator import BASELINES, STREAM_MODES, SimConfig, simulate, simulate_baseline

log = logging.getLogger("tsmux")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_INFEASIBLE = 3
EXIT_IO = 4
SEED_ENV = "MOSAIC_SEED"


def default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ValidationError(f"{SEED_ENV} must be an integer, got {raw!r}")


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, (StageInfeasible, InfeasibleBaseline, EmptyPlan)):
        return EXIT_INFEASIBLE
    if isinstance(exc, OSError):
        return EXIT_IO
    if isinstance(
        exc,
        (ValidationError, UnknownPreset, UnknownSuite, InsufficientSamples, DegenerateDesignMatrix, OutOfRange, TooLarge),
    ):
        return EXIT_VALIDATION
    return 1


# ---------------------------------------------------------------- loaders


def _load_inputs(args):
    graph = formats.graph_from_doc(formats.read(args.model, "model"))
    cluster = formats.cluster_from_doc(formats.read(args.cluster, "cluster"))
    surfaces, samples = formats.profiles_from_doc(formats.read(args.profiles, "profiles"))
    missing = [m for m in graph.ids if m not in surfaces]
    if missing:
        raise ValidationError(f"profiles lack surfaces for modules: {', '.join(missing)}")
    return graph, cluster, surfaces, samples


def _load_interference(args):
    return formats.interference_from_doc(formats.read(args.interference, "interference"), args.variant)


# ---------------------------------------------------------------- commands


def cmd_profile(args) -> int:
    seed = args.seed if args.seed is not None else default_seed()
    custom = args.preset in (None, "custom")
    if custom:
        if not args.workloads:
            raise ValidationError("--preset custom needs --workloads")
        wl, edges = formats.workloads_from_doc(formats.read(args.workloads, "workloads"))
        graph = make_graph([w.spec() for w in wl], edges)
    else:
        if args.workloads:
            raise ValidationError("--workloads only applies to --preset custom")
        p = preset(args.preset, args.gpus, args.modules)
        wl, graph = list(p.workloads), p.graph
    if args.cluster:
        cluster = formats.cluster_from_doc(formats.read(args.cluster, "cluster"))
    else:
        cluster = make_cluster(args.gpus)
    surfaces = generate_surfaces(wl, cluster, demand_scale=args.demand_scale)
    samples = generate_colocation_samples(
        wl, cluster, DEFAULT_GROUND_TRUTH, seed, args.samples, args.noise, demand_scale=args.demand_scale
    )
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    formats.write(out / "model.json", formats.graph_to_doc(graph))
    formats.write(out / "cluster.json", formats.cluster_to_doc(cluster))
    formats.write(out / "profiles.json", formats.profiles_to_doc(surfaces, samples))
    print(f"profiled {len(surfaces)} modules on {cluster.gpu_count} GPUs: {', '.join(sorted(surfaces))}")
    print(f"colocation samples: {len(samples)} (seed {seed}, noise {args.noise:g})")
    print(f"wrote {out / 'model.json'}, {out / 'cluster.json'}, {out / 'profiles.json'}")
    return EXIT_OK


def cmd_fit(args) -> int:
    _, samples = formats.profiles_from_doc(formats.read(args.profiles, "profiles"))
    include_self = not args.exclude_self
    full = fit_interference(samples, include_self=include_self)
    additive = fit_interference(samples, additive_only=True, include_self=include_self)
    diag = {}
    print(f"{'model':13s} {'e1':>12s} {'e2':>12s} {'e3':>12s} {'r_squared':>10s} {'mean_err':>9s}")
    for name, m in (("full", full), ("additive_only", additive)):
        err = float(np.mean(prediction_errors(samples, m)))
        diag[name] = {"mean_relative_error": err, "negative_terms": list(m.negative_terms)}
        print(f"{name:13s} {m.e1:12.6g} {m.e2:12.6g} {m.e3:12.6g} {m.r_squared:10.4f} {err:9.4%}")
        if m.negative_terms:
            log.warning("%s model has negative coefficients: %s", name, ", ".join(m.negative_terms))
    formats.write(args.out, formats.interference_to_doc({"full": full, "additive_only": additive}, diag))
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_plan(args) -> int:
    graph, cluster, surfaces, _ = _load_inputs(args)
    model = _load_interference(args)
    config = SolverConfig(prune=not args.no_prune, cache=not args.no_cache)
    plan, trace = solve(graph, cluster, surfaces, model, args.granularity, config)
    validate_plan(plan, graph, cluster)
    formats.write(args.out, formats.plan_to_doc(plan))
    if args.trace:
        with open(args.trace, "w") as fh:
            for line in formats.trace_lines(trace.to_dict(graph=graph)):
                fh.write(line + "\n")
    print(f"plan: {len(plan.stages)} stages, predicted iteration time {plan.predicted_iteration_time:.6g} s")
    for i, (stage, t) in enumerate(zip(plan.stages, plan.predicted_stage_times)):
        parts = ", ".join(f"{x.module}(d={x.d}, a={x.a:g})" for x in stage.assignments)
        print(f"  stage {i}: {t:.6g} s  {parts}")
    print(
        f"solver: {len(trace.rounds) - 1} merges, {trace.stage_evals} stage evaluations, "
        f"{trace.stats.feasibility_calls} feasibility calls, {trace.cache_hits} cache hits, "
        f"{trace.pruned} pruned, {trace.elapsed:.3f} s"
    )
    return EXIT_OK


def cmd_simulate(args) -> int:
    graph, cluster, surfaces, _ = _load_inputs(args)
    model = _load_interference(args)
    seed = args.seed if args.seed is not None else default_seed()
    config = SimConfig(iterations=args.iters, stream_mode=args.mode, noise_sigma=args.noise, seed=seed)
    if args.baseline:
        plan, report = simulate_baseline(graph, cluster, surfaces, model, args.baseline, args.granularity, config)
        label = args.baseline
    else:
        if not args.plan:
            raise ValidationError("simulate needs --plan or --baseline")
        plan = formats.plan_from_doc(formats.read(args.plan, "plan"))
        report = simulate(plan, surfaces, model, config, graph, cluster)
        label = "plan"
    print(f"{label}: iteration time {report.iteration_time:.6g} s over {config.iterations} iterations "
          f"({config.stream_mode} streams, overhead {report.overhead_per_iteration:.6g} s/iteration)")
    print("per-GPU utilization: " + " ".join(f"{b:.3f}" for b in report.per_gpu_busy_fraction)
          + f"  (mean {report.mean_utilization:.3f})")
    if args.timeline:
        report.write_timeline_csv(args.timeline)
        print(f"wrote {args.timeline}")
    if args.report:
        doc = {**formats.header("report"), "source": label, **report.to_dict()}
        formats.write(args.report, doc)
        print(f"wrote {args.report}")
    if args.figure:
        from tsmux.plotting import plot_timeline

        plot_timeline(report, args.figure)
        print(f"wrote {args.figure}")
    return EXIT_OK


def cmd_bench(args) -> int:
    seed = args.seed if args.seed is not None else default_seed()
    rows = bench.run_suite(args.suite, args.seeds, base_seed=seed, threads=args.threads)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bench.write_csv(out / f"{args.suite}.csv", rows)
    print(f"wrote {out / f'{args.suite}.csv'} ({len(rows)} rows)")
    summary = bench.summarize(args.suite, rows)
    if summary:
        bench.write_csv(out / f"{args.suite}_summary.csv", summary)
        for s in summary:
            print("  " + ", ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in s.items()))
    if not args.no_figures:
        from tsmux import plotting

        fig = out / f"{args.suite}.png"
        if args.suite == "optimality":
            plotting.plot_optimality(rows, fig)
        elif args.suite == "scale":
            plotting.plot_scale(rows, fig)
        elif args.suite == "granularity":
            plotting.plot_granularity(summary, fig)
        else:
            plotting.plot_ablation(rows, fig)
        print(f"wrote {fig}")
    return EXIT_OK


def cmd_oracle(args) -> int:
    seed = args.seed if args.seed is not None else default_seed()
    rows = bench.bench_optimality(args.seeds, (args.modules,), args.gpus, args.granularity, seed, args.threads)
    slim = [
        {"seed": r["seed"], "oracle_time": r["oracle_time"], "gahc_time": r["gahc_time"], "ratio": r["ratio"]}
        for r in rows
    ]
    bench.write_csv(args.out, slim)
    ratios = [r["ratio"] for r in rows]
    equal = sum(r["equal"] for r in rows)
    print(f"{len(rows)} instances of {args.modules} modules: {equal} at the optimum, "
          f"median ratio {float(np.median(ratios)):.4f}, min {min(ratios):.4f}")
    print(f"wrote {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _add_inputs(p):
    p.add_argument("--model", required=True, help="model graph file")
    p.add_argument("--cluster", required=True, help="cluster file")
    p.add_argument("--profiles", required=True, help="profiles file")
    p.add_argument("--interference", required=True, help="interference file written by `fit`")
    p.add_argument("--variant", default="full", choices=("full", "additive_only"), help="interference model to use")
    p.add_argument("--granularity", type=float, default=0.1, help="SM-quota granularity (default 0.1)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tsmux", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="count", default=0)
    ap.add_argument("--threads", type=int, default=1, help="worker processes for batch runs")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("profile", help="generate synthetic surfaces and colocation samples")
    p.add_argument("--preset", default=None, help=f"one of {', '.join(PRESET_NAMES)}, or custom")
    p.add_argument("--workloads", default=None, help="workload file for --preset custom")
    p.add_argument("--gpus", type=int, default=8)
    p.add_argument("--modules", type=int, default=None, help="encoder count for model families")
    p.add_argument("--cluster", default=None, help="cluster file (overrides --gpus)")
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--noise", type=float, default=0.02, help="lognormal sigma on the interference delay")
    p.add_argument("--demand-scale", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("fit", help="fit full and additive-only interference models")
    p.add_argument("--profiles", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--exclude-self", action="store_true", help="leave the victim out of sum/product")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("plan", help="solve the stage mapping")
    _add_inputs(p)
    p.add_argument("--no-prune", action="store_true")
    p.add_argument("--no-cache", action="store_true")
    p.add_argument("--out", required=True, help="plan file")
    p.add_argument("--trace", default=None, help="solve trace (JSON lines)")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("simulate", help="replay a plan or a baseline")
    _add_inputs(p)
    p.add_argument("--plan", default=None)
    p.add_argument("--baseline", choices=BASELINES, default=None)
    p.add_argument("--mode", choices=STREAM_MODES, default="pooled")
    p.add_argument("--iters", type=int, default=1)
    p.add_argument("--noise", type=float, default=0.0, help="lognormal sigma on module durations")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--timeline", default=None, help="timeline CSV")
    p.add_argument("--report", default=None, help="report file")
    p.add_argument("--figure", default=None, help="timeline figure (PNG)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("bench", help="run a benchmark suite")
    p.add_argument("suite", help=f"one of {', '.join(bench.SUITES)}")
    p.add_argument("--seeds", type=int, default=None)
    p.add_argument("--seed", type=int, default=None, help="base seed")
    p.add_argument("--out-dir", default="bench-out")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("oracle", help="solver vs exhaustive optimum on random instances")
    p.add_argument("--seeds", type=int, default=100)
    p.add_argument("--seed", type=int, default=None, help="base seed")
    p.add_argument("--modules", type=int, default=4)
    p.add_argument("--gpus", type=int, default=4)
    p.add_argument("--granularity", type=float, default=0.25)
    p.add_argument("--out", default="oracle.csv")
    p.set_defaults(func=cmd_oracle)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (TsmuxError, OSError) as exc:
        code = exit_code(exc)
        print(f"error: {exc}", file=sys.stderr)
        return code if code != 1 else EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
