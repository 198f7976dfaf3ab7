import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import cluster, flat_surface
from tsmux.errors import InfeasibleBaseline, ValidationError
from tsmux.gahc import solve
from tsmux.model import Assignment, DeploymentPlan, StageAllocation, make_graph
from tsmux.perf import InterferenceModel
from tsmux.profiler import DEFAULT_GROUND_TRUTH, generate_surfaces, preset, random_dag_edges, random_workloads
from tsmux.simulator import (
    SimConfig,
    baseline_plan,
    distmm_split,
    longest_path_waves,
    simulate,
    simulate_baseline,
    streams_per_gpu,
)

ZERO = InterferenceModel(0.0, 0.0, 0.0)


def one_module_plan():
    s = {"m": flat_surface("m", {0.5: 4.0, 1.0: 2.0})}
    plan = DeploymentPlan((StageAllocation((Assignment("m", 1, 1.0, (0,)),)),), (2.0,))
    return plan, s


def test_single_module_pooled_without_overhead():
    plan, s = one_module_plan()
    r = simulate(plan, s, ZERO, SimConfig(pooled_overhead=0.0))
    assert r.iteration_time == 2.0
    assert r.per_gpu_busy_fraction == [1.0]


def test_single_module_on_demand():
    plan, s = one_module_plan()
    r = simulate(plan, s, ZERO, SimConfig(stream_mode="on_demand"))
    assert r.iteration_time == pytest.approx(2.037, rel=1e-12)
    assert r.overhead_per_iteration == pytest.approx(0.037, rel=1e-12)


def test_config_validation():
    with pytest.raises(ValidationError):
        SimConfig(stream_mode="lazy")
    with pytest.raises(ValidationError):
        SimConfig(iterations=0)
    with pytest.raises(ValidationError):
        SimConfig(noise_sigma=-1.0)


def test_stream_count_is_busiest_gpu():
    stage = StageAllocation(
        (Assignment("a", 2, 0.5, (0, 1)), Assignment("b", 1, 0.3, (0,)), Assignment("c", 1, 0.2, (0,)))
    )
    assert streams_per_gpu(stage) == 3


def test_pooled_faster_than_on_demand():
    p = preset("imagebind", 8)
    s = p.surfaces()
    plan, _ = solve(p.graph, p.cluster, s, p.ground_truth)
    pooled = simulate(plan, s, p.ground_truth, SimConfig(stream_mode="pooled"))
    on_demand = simulate(plan, s, p.ground_truth, SimConfig(stream_mode="on_demand"))
    assert pooled.iteration_time < on_demand.iteration_time


# ---------------------------------------------------------------- baselines


def test_single_module_baselines_use_all_gpus():
    p = preset("clip", 4)
    g = make_graph(["vision"])
    s = p.surfaces()
    for policy in ("megatron", "distmm"):
        plan = baseline_plan(g, p.cluster, s, p.ground_truth, policy)
        (x,) = plan.stages[0].assignments
        assert x.d == 4 and x.a == 1.0 and x.gpus == (0, 1, 2, 3)


def test_clip_distmm_structure():
    p = preset("clip", 4)
    plan = baseline_plan(p.graph, p.cluster, p.surfaces(), p.ground_truth, "distmm")
    assert plan.stage_sets() == [("text", "vision"), ("align",)]
    first = plan.stages[0]
    assert not set(first["text"].gpus) & set(first["vision"].gpus)
    assert first["text"].d + first["vision"].d == 4
    assert plan.stages[1]["align"].d == 4


def test_megatron_one_stage_per_module():
    p = preset("unifiedio2", 8)
    plan = baseline_plan(p.graph, p.cluster, p.surfaces(), p.ground_truth, "megatron")
    assert len(plan.stages) == len(p.graph.ids)
    assert all(x.d == 8 and x.a == 1.0 for st_ in plan.stages for x in st_.assignments)


def test_waves_and_chunking():
    g = make_graph(["a", "b", "c", "d"], [("a", "b"), ("b", "d"), ("c", "d")])
    assert longest_path_waves(g) == [["a", "c"], ["b"], ["d"]]
    p = preset("ofasys", 4)
    plan = baseline_plan(p.graph, p.cluster, p.surfaces(), p.ground_truth, "distmm")
    # nine encoders over four GPUs take three chunks, then the backbone
    assert [len(s.assignments) for s in plan.stages] == [4, 4, 1, 1]


def test_exhaustive_split_minimizes_slowest_module():
    p = preset("clip", 4)
    s = p.surfaces()
    ds = distmm_split(["text", "vision"], p.cluster, s, p.ground_truth, {})
    solo = {m: {d: s[m].lookup(d, 1.0)[0] + p.ground_truth.delay([s[m].lookup(d, 1.0)[1]]) for d in (1, 2, 3)}
            for m in ("text", "vision")}
    best = min(max(solo["text"][a], solo["vision"][b]) for a in (1, 2, 3) for b in (1, 2, 3) if a + b <= 4)
    assert max(solo["text"][ds[0]], solo["vision"][ds[1]]) == best


def test_baseline_infeasible_when_memory_short():
    p = preset("clip", 4)
    tiny = cluster(4, memory=1e9)
    with pytest.raises(InfeasibleBaseline):
        baseline_plan(p.graph, tiny, p.surfaces(), p.ground_truth, "megatron")
    with pytest.raises(ValidationError):
        baseline_plan(p.graph, p.cluster, p.surfaces(), p.ground_truth, "fifo")


# ---------------------------------------------------------------- properties


def instance(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 6))
    gpus = int(rng.choice([1, 2, 4]))
    wl = random_workloads(rng, n)
    edges = random_dag_edges(rng, [w.module_id for w in wl], 0.3)
    c = cluster(gpus)
    g = make_graph([w.spec() for w in wl], edges)
    s = generate_surfaces(wl, c)
    plan, _ = solve(g, c, s, DEFAULT_GROUND_TRUTH, 0.25)
    return g, c, s, plan


@given(st.integers(0, 2**31), st.sampled_from(["pooled", "on_demand"]), st.integers(1, 3))
@settings(max_examples=40, deadline=None)
def test_zero_noise_matches_prediction_plus_overhead(seed, mode, iters):
    g, c, s, plan = instance(seed)
    r = simulate(plan, s, DEFAULT_GROUND_TRUTH, SimConfig(iterations=iters, stream_mode=mode), g, c)
    assert abs(r.iteration_time - (plan.predicted_iteration_time + r.overhead_per_iteration)) <= 1e-9
    assert all(0.0 <= b <= 1.0 for b in r.per_gpu_busy_fraction)


@given(st.integers(0, 2**31), st.floats(0.0, 0.3))
@settings(max_examples=40, deadline=None)
def test_quota_conserved_at_every_instant(seed, sigma):
    g, c, s, plan = instance(seed)
    r = simulate(plan, s, DEFAULT_GROUND_TRUTH, SimConfig(iterations=2, noise_sigma=sigma, seed=seed), g, c)
    for gpu in range(c.gpu_count):
        ivs = [iv for iv in r.timeline if iv.gpu == gpu]
        for probe in {iv.start for iv in ivs}:
            load = math.fsum(iv.quota for iv in ivs if iv.start <= probe < iv.end)
            assert load <= 1.0 + 1e-9


@given(st.integers(0, 2**31))
@settings(max_examples=20, deadline=None)
def test_seeded_determinism(seed):
    g, c, s, plan = instance(seed)
    cfg = SimConfig(iterations=3, noise_sigma=0.1, seed=seed)
    a = simulate(plan, s, DEFAULT_GROUND_TRUTH, cfg, g, c)
    b = simulate(plan, s, DEFAULT_GROUND_TRUTH, cfg, g, c)
    assert a == b


def test_noise_changes_durations_but_not_structure():
    g, c, s, plan = instance(3)
    quiet = simulate(plan, s, DEFAULT_GROUND_TRUTH, SimConfig(iterations=2), g, c)
    noisy = simulate(plan, s, DEFAULT_GROUND_TRUTH, SimConfig(iterations=2, noise_sigma=0.2, seed=1), g, c)
    assert len(quiet.timeline) == len(noisy.timeline)
    assert quiet.iteration_times != noisy.iteration_times


def test_baseline_reports_validate():
    p = preset("ofasys", 8)
    s = p.surfaces()
    for policy in ("megatron", "distmm"):
        plan, r = simulate_baseline(p.graph, p.cluster, s, p.ground_truth, policy)
        assert r.iteration_time == pytest.approx(plan.predicted_iteration_time + r.overhead_per_iteration, abs=1e-9)
