import csv
import json

import pytest

from tsmux import formats
from tsmux.cli import main
from tsmux.errors import FormatError
from tsmux.perf import InterferenceModel
from tsmux.profiler import preset


def run(*argv):
    return main([str(a) for a in argv])


def inputs(d):
    return ["--model", d / "model.json", "--cluster", d / "cluster.json", "--profiles", d / "profiles.json",
            "--interference", d / "interference.json"]


@pytest.fixture(scope="module")
def clip_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("clip")
    assert run("profile", "--preset", "clip", "--gpus", 4, "--out-dir", d) == 0
    assert run("fit", "--profiles", d / "profiles.json", "--out", d / "interference.json") == 0
    return d


@pytest.fixture(scope="module")
def ofasys_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("ofasys")
    assert run("profile", "--preset", "ofasys", "--modules", 9, "--gpus", 8, "--out-dir", d) == 0
    assert run("fit", "--profiles", d / "profiles.json", "--out", d / "interference.json") == 0
    return d


# ---------------------------------------------------------------- profile / fit


def test_profile_clip(clip_dir):
    surfaces, samples = formats.profiles_from_doc(formats.read(clip_dir / "profiles.json", "profiles"))
    assert set(surfaces) == {"vision", "text", "align"}
    assert len(samples) == 200
    assert formats.cluster_from_doc(formats.read(clip_dir / "cluster.json", "cluster")).gpu_count == 4


def test_profile_ofasys_nine_encoders(ofasys_dir):
    surfaces, _ = formats.profiles_from_doc(formats.read(ofasys_dir / "profiles.json", "profiles"))
    assert len(surfaces) == 10 and "llm" in surfaces


def test_custom_workloads(tmp_path):
    doc = {**formats.header("workloads"),
           "modules": [{"id": "a", "tflops": 1.0, "ci": 20.0, "params": 1e8},
                       {"id": "b", "flops": 1e14, "bytes": 1e12, "gradient_bytes": 1e8}],
           "edges": [["a", "b"]]}
    formats.write(tmp_path / "wl.json", doc)
    assert run("profile", "--preset", "custom", "--workloads", tmp_path / "wl.json", "--gpus", 2,
               "--out-dir", tmp_path) == 0
    graph = formats.graph_from_doc(formats.read(tmp_path / "model.json", "model"))
    assert graph.edges == (("a", "b"),)
    doc["modules"][1]["flops"] = -1e14
    formats.write(tmp_path / "bad.json", doc)
    assert run("profile", "--preset", "custom", "--workloads", tmp_path / "bad.json", "--out-dir", tmp_path) == 2


def test_unknown_preset_and_suite(tmp_path):
    assert run("profile", "--preset", "nope", "--out-dir", tmp_path) == 2
    assert run("bench", "nope", "--out-dir", tmp_path) == 2


def test_fit_writes_both_models(clip_dir, capsys):
    doc = formats.read(clip_dir / "interference.json", "interference")
    full = formats.interference_from_doc(doc, "full")
    add = formats.interference_from_doc(doc, "additive_only")
    assert add.e3 == 0.0
    assert full.r_squared > add.r_squared
    assert set(doc["diagnostics"]) == {"full", "additive_only"}


def test_fit_insufficient_samples(tmp_path, clip_dir):
    doc = formats.read(clip_dir / "profiles.json", "profiles")
    doc["colocation_samples"] = doc["colocation_samples"][:5]
    formats.write(tmp_path / "few.json", doc)
    assert run("fit", "--profiles", tmp_path / "few.json", "--out", tmp_path / "i.json") == 2


# ---------------------------------------------------------------- plan


def test_plan_clip_two_stages(clip_dir, tmp_path, capsys):
    assert run("plan", *inputs(clip_dir), "--out", tmp_path / "plan.json") == 0
    plan = formats.plan_from_doc(formats.read(tmp_path / "plan.json", "plan"))
    assert plan.stage_sets() == [("text", "vision"), ("align",)]
    out = capsys.readouterr().out
    assert "2 stages" in out and "feasibility calls" in out


def test_plan_bytes_identical_without_prune_and_cache(ofasys_dir, tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert run("plan", *inputs(ofasys_dir), "--out", a, "--trace", tmp_path / "a.jsonl") == 0
    assert run("plan", *inputs(ofasys_dir), "--no-prune", "--no-cache", "--out", b, "--trace", tmp_path / "b.jsonl") == 0
    assert a.read_bytes() == b.read_bytes()
    stats = [json.loads(p.read_text().splitlines()[-1])["stats"] for p in (tmp_path / "a.jsonl", tmp_path / "b.jsonl")]
    assert stats[0]["feasibility_calls"] < stats[1]["feasibility_calls"]


def test_finer_granularity_no_worse(ofasys_dir, tmp_path):
    times = {}
    for g in ("0.3", "0.1"):
        assert run("plan", *inputs(ofasys_dir), "--granularity", g, "--out", tmp_path / f"{g}.json") == 0
        times[g] = formats.read(tmp_path / f"{g}.json", "plan")["predicted_iteration_time"]
    assert times["0.1"] <= times["0.3"]


def test_plan_infeasible_exit_code(clip_dir, tmp_path):
    doc = formats.read(clip_dir / "cluster.json", "cluster")
    doc["memory_capacity"] = 1e9
    formats.write(tmp_path / "small.json", doc)
    args = inputs(clip_dir)
    args[3] = tmp_path / "small.json"
    assert run("plan", *args, "--out", tmp_path / "p.json") == 3


def test_io_error_exit_code(clip_dir, tmp_path):
    assert run("plan", *inputs(clip_dir), "--out", tmp_path / "missing" / "p.json") == 4
    args = inputs(clip_dir)
    args[1] = tmp_path / "nothing.json"
    assert run("plan", *args, "--out", tmp_path / "p.json") == 4


def test_bad_file_format_exit_code(clip_dir, tmp_path):
    (tmp_path / "junk.json").write_text("{not json")
    args = inputs(clip_dir)
    args[1] = tmp_path / "junk.json"
    assert run("plan", *args, "--out", tmp_path / "p.json") == 2


# ---------------------------------------------------------------- simulate


def read_report(path):
    return formats.read(path, "report")


def test_simulate_round_trip(clip_dir, tmp_path):
    assert run("plan", *inputs(clip_dir), "--out", tmp_path / "plan.json") == 0
    assert run("simulate", *inputs(clip_dir), "--plan", tmp_path / "plan.json", "--report", tmp_path / "r1.json",
               "--timeline", tmp_path / "t.csv", "--figure", tmp_path / "t.png") == 0
    plan = formats.plan_from_doc(formats.read(tmp_path / "plan.json", "plan"))
    r1 = read_report(tmp_path / "r1.json")
    assert r1["iteration_time"] == pytest.approx(plan.predicted_iteration_time + r1["overhead_per_iteration"], abs=1e-9)
    # rewrite the reloaded plan and simulate again: same report
    formats.write(tmp_path / "plan2.json", formats.plan_to_doc(plan))
    assert run("simulate", *inputs(clip_dir), "--plan", tmp_path / "plan2.json", "--report", tmp_path / "r2.json") == 0
    assert read_report(tmp_path / "r2.json") == r1
    with open(tmp_path / "t.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["iteration", "stage", "gpu", "module", "start", "end", "quota"]
    assert (tmp_path / "t.png").stat().st_size > 0


def test_simulate_baseline_and_modes(ofasys_dir, tmp_path):
    assert run("plan", *inputs(ofasys_dir), "--out", tmp_path / "plan.json") == 0
    for name, extra in (("plan", ["--plan", tmp_path / "plan.json"]), ("distmm", ["--baseline", "distmm"]),
                        ("on_demand", ["--plan", tmp_path / "plan.json", "--mode", "on_demand"])):
        assert run("simulate", *inputs(ofasys_dir), *extra, "--report", tmp_path / f"report_{name}.json") == 0
    t = {k: read_report(tmp_path / f"report_{k}.json")["iteration_time"] for k in ("plan", "distmm", "on_demand")}
    assert t["distmm"] >= t["plan"]
    assert t["on_demand"] > t["plan"]


def test_simulate_rejects_invalid_plan(clip_dir, tmp_path):
    assert run("plan", *inputs(clip_dir), "--out", tmp_path / "plan.json") == 0
    doc = formats.read(tmp_path / "plan.json", "plan")
    doc["stages"].reverse()
    formats.write(tmp_path / "bad.json", doc)
    assert run("simulate", *inputs(clip_dir), "--plan", tmp_path / "bad.json") == 2
    assert run("simulate", *inputs(clip_dir)) == 2


def test_seeded_noise_deterministic(clip_dir, tmp_path, monkeypatch):
    assert run("plan", *inputs(clip_dir), "--out", tmp_path / "plan.json") == 0
    common = ["simulate", *inputs(clip_dir), "--plan", tmp_path / "plan.json", "--iters", 3, "--noise", 0.1]
    monkeypatch.setenv("MOSAIC_SEED", "5")
    assert run(*common, "--report", tmp_path / "env.json") == 0
    monkeypatch.delenv("MOSAIC_SEED")
    assert run(*common, "--seed", 5, "--report", tmp_path / "flag.json") == 0
    assert run(*common, "--seed", 6, "--report", tmp_path / "other.json") == 0
    assert read_report(tmp_path / "env.json") == read_report(tmp_path / "flag.json")
    assert read_report(tmp_path / "env.json") != read_report(tmp_path / "other.json")


def test_profile_deterministic_given_seed(tmp_path, monkeypatch):
    for name in ("a", "b"):
        assert run("profile", "--preset", "clip", "--gpus", 2, "--seed", 3, "--out-dir", tmp_path / name) == 0
    monkeypatch.setenv("MOSAIC_SEED", "3")
    assert run("profile", "--preset", "clip", "--gpus", 2, "--out-dir", tmp_path / "c") == 0
    blobs = [(tmp_path / n / "profiles.json").read_bytes() for n in "abc"]
    assert blobs[0] == blobs[1] == blobs[2]
    monkeypatch.setenv("MOSAIC_SEED", "x")
    assert run("profile", "--preset", "clip", "--out-dir", tmp_path / "d") == 2


# ---------------------------------------------------------------- bench / oracle


def test_bench_scale_writes_csv_and_figure(tmp_path):
    assert run("bench", "scale", "--out-dir", tmp_path) == 0
    with open(tmp_path / "scale.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["gpus"]) for r in rows] == [2, 4, 8]
    assert (tmp_path / "scale.png").exists()


def test_bench_optimality_deterministic(tmp_path):
    for name in ("a", "b"):
        assert run("bench", "optimality", "--seeds", 3, "--out-dir", tmp_path / name) == 0
    drop = {"gahc_solve_s", "oracle_solve_s"}

    def rows(name):
        with open(tmp_path / name / "optimality.csv") as fh:
            return [{k: v for k, v in r.items() if k not in drop} for r in csv.DictReader(fh)]

    assert rows("a") == rows("b")
    assert (tmp_path / "a" / "optimality_summary.csv").exists()
    assert (tmp_path / "a" / "optimality.png").exists()


def test_oracle_command(tmp_path):
    assert run("oracle", "--seeds", 4, "--out", tmp_path / "o.csv") == 0
    with open(tmp_path / "o.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["seed", "oracle_time", "gahc_time", "ratio"]
    assert all(float(r["ratio"]) <= 1.0 + 1e-9 for r in rows)


# ---------------------------------------------------------------- formats


def test_documents_round_trip():
    p = preset("unifiedio2", 4)
    s = p.surfaces()
    g2 = formats.graph_from_doc(json.loads(formats.dumps(formats.graph_to_doc(p.graph))))
    assert g2 == p.graph
    c2 = formats.cluster_from_doc(json.loads(formats.dumps(formats.cluster_to_doc(p.cluster))))
    assert c2 == p.cluster
    s2, _ = formats.profiles_from_doc(json.loads(formats.dumps(formats.profiles_to_doc(s))))
    for m in s:
        assert (s2[m].latency == s[m].latency).all() and (s2[m].bandwidth == s[m].bandwidth).all()
    m = InterferenceModel(0.1, 0.2, -0.3, 0.9, 12, False)
    assert formats.interference_from_doc(json.loads(formats.dumps(formats.interference_to_doc({"full": m})))) == m


def test_format_header_checked():
    with pytest.raises(FormatError):
        formats.loads('{"format": "tsmux/plan", "version": 1}', "model")
    with pytest.raises(FormatError):
        formats.loads('{"format": "tsmux/model", "version": 2}', "model")
    with pytest.raises(FormatError):
        formats.loads("[]", "model")
    doc = formats.loads('{"format": "tsmux/plan", "version": 1, "stages": [], "predicted_iteration_time": 1.0}', "plan")
    with pytest.raises(FormatError):
        formats.plan_from_doc(doc)
