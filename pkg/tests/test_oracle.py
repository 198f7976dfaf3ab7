import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import cluster, flat_surface
from tsmux.errors import TooLarge
from tsmux.gahc import solve
from tsmux.model import make_graph, validate_plan
from tsmux.oracle import brute_force_optimum, enumerate_partitions, ordered_bell
from tsmux.perf import InterferenceModel
from tsmux.profiler import DEFAULT_GROUND_TRUTH, generate_surfaces, random_dag_edges, random_workloads
from tsmux.stage_eval import stage_eval

ZERO = InterferenceModel(0.0, 0.0, 0.0)


def count_ordered_partitions(n):
    """Independent count: assign each element a block label, keep surjective labelings onto 0..k-1."""
    total = 0
    for labels in itertools.product(range(n), repeat=n):
        k = max(labels) + 1
        if set(labels) == set(range(k)):
            total += 1
    return total


def test_two_independent_modules():
    parts = list(enumerate_partitions(make_graph(["A", "B"])))
    assert sorted(parts, key=repr) == sorted(
        [(frozenset("AB"),), (frozenset("A"), frozenset("B")), (frozenset("B"), frozenset("A"))], key=repr
    )


def test_edge_forces_order():
    parts = list(enumerate_partitions(make_graph(["A", "B"], [("A", "B")])))
    assert parts == [(frozenset("A"), frozenset("B"))]


def test_three_independent_is_thirteen():
    assert count_ordered_partitions(3) == 13
    assert len(list(enumerate_partitions(make_graph(["A", "B", "C"])))) == 13


@pytest.mark.parametrize("n", [1, 2, 3, 4, 5])
def test_edge_free_counts_match_ordered_bell(n):
    g = make_graph([f"m{i}" for i in range(n)])
    assert len(list(enumerate_partitions(g))) == ordered_bell(n) == count_ordered_partitions(n)


def test_too_large():
    with pytest.raises(TooLarge):
        list(enumerate_partitions(make_graph([f"m{i}" for i in range(9)])))


def test_single_module_equals_stage_eval():
    rng = np.random.default_rng(4)
    wl = random_workloads(rng, 1)
    c = cluster(4)
    s = generate_surfaces(wl, c)
    g = make_graph([w.spec() for w in wl])
    opt = brute_force_optimum(g, c, s, DEFAULT_GROUND_TRUTH, 0.25)
    r = stage_eval(g.ids, c, s, DEFAULT_GROUND_TRUTH, 0.25, {m.id: m.memory_base for m in g.modules})
    assert opt.predicted_iteration_time == pytest.approx(r.stage_time, rel=1e-12)


def test_colocation_dominates():
    # half a GPU is almost as fast as a whole one: colocating costs 1.0 s, sequential 1.6 s
    s = {m: flat_surface(m, {0.5: 1.0, 1.0: 0.8}) for m in ("A", "B")}
    g = make_graph(["A", "B"])
    opt = brute_force_optimum(g, cluster(1), s, ZERO, 0.5)
    assert opt.stage_sets() == [("A", "B")]
    assert opt.predicted_iteration_time == pytest.approx(1.0)


def instance(seed, n, gpus=2):
    rng = np.random.default_rng(seed)
    wl = random_workloads(rng, n)
    edges = random_dag_edges(rng, [w.module_id for w in wl], 0.3)
    c = cluster(gpus)
    return make_graph([w.spec() for w in wl], edges), c, generate_surfaces(wl, c)


@given(st.integers(0, 2**31), st.integers(1, 4))
@settings(max_examples=40, deadline=None)
def test_oracle_never_worse_than_solver(seed, n):
    g, c, s = instance(seed, n)
    opt = brute_force_optimum(g, c, s, DEFAULT_GROUND_TRUTH, 0.25)
    plan, _ = solve(g, c, s, DEFAULT_GROUND_TRUTH, 0.25)
    validate_plan(opt, g, c)
    assert opt.predicted_iteration_time <= plan.predicted_iteration_time * (1 + 1e-9)


@given(st.integers(0, 2**31), st.integers(1, 4))
@settings(max_examples=30, deadline=None)
def test_chain_agrees_with_stage_eval(seed, n):
    # a chain admits only the all-singleton partition
    rng = np.random.default_rng(seed)
    wl = random_workloads(rng, n)
    ids = [w.module_id for w in wl]
    c = cluster(2)
    s = generate_surfaces(wl, c)
    g = make_graph([w.spec() for w in wl], list(zip(ids, ids[1:])))
    opt = brute_force_optimum(g, c, s, DEFAULT_GROUND_TRUTH, 0.25)
    mb = {m.id: m.memory_base for m in g.modules}
    expected = sum(stage_eval([m], c, s, DEFAULT_GROUND_TRUTH, 0.25, mb).stage_time for m in ids)
    assert opt.predicted_iteration_time == pytest.approx(expected, rel=1e-12)
