"""Versioned JSON documents for graphs, clusters, profiles, interference models and plans.

Every document carries a header {"format": "tsmux/<kind>", "version": 1}.
Floats are written with repr precision so documents round-trip exactly.
"""

from __future__ import annotations

import json
from typing import Any, Mapping, Sequence

from tsmux.errors import FormatError, ValidationError
from tsmux.model import (
    Assignment,
    ClusterSpec,
    DeploymentPlan,
    ModelGraph,
    ModuleSpec,
    StageAllocation,
    validate_graph,
)
from tsmux.perf import ColocationSample, InterferenceModel, ScalingSurface, SurfacePoint
from tsmux.profiler import ModuleWorkload

VERSION = 1
KINDS = ("model", "cluster", "profiles", "interference", "plan", "workloads", "report")


def header(kind: str) -> dict:
    return {"format": f"tsmux/{kind}", "version": VERSION}


def dumps(doc: Mapping) -> str:
    return json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n"


def write(path, doc: Mapping) -> None:
    with open(path, "w") as fh:
        fh.write(dumps(doc))


def read(path, kind: str) -> dict:
    with open(path) as fh:
        text = fh.read()
    return loads(text, kind, source=str(path))


def loads(text: str, kind: str, source: str = "<string>") -> dict:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{source}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise FormatError(f"{source}: top level must be an object")
    fmt = doc.get("format")
    if fmt != f"tsmux/{kind}":
        raise FormatError(f"{source}: expected format tsmux/{kind}, found {fmt!r}")
    if doc.get("version") != VERSION:
        raise FormatError(f"{source}: unsupported version {doc.get('version')!r}")
    return doc


def _get(doc: Mapping, key: str, typ=None):
    if key not in doc:
        raise FormatError(f"missing field {key!r}")
    v = doc[key]
    if typ is not None and not isinstance(v, typ):
        raise FormatError(f"field {key!r} has type {type(v).__name__}")
    return v


def _wrap(fn, *args):
    # constructor validation errors surface as format errors with their message intact
    try:
        return fn(*args)
    except FormatError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise FormatError(str(exc)) from exc


# ---------------------------------------------------------------- model / cluster


def graph_to_doc(graph: ModelGraph) -> dict:
    return {
        **header("model"),
        "modules": [
            {"id": m.id, "name": m.name, "memory_base": m.memory_base, "tags": list(m.tags)}
            for m in graph.modules
        ],
        "edges": [list(e) for e in graph.edges],
    }


def graph_from_doc(doc: Mapping) -> ModelGraph:
    mods = []
    for m in _get(doc, "modules", list):
        mods.append(
            _wrap(
                lambda: ModuleSpec(
                    str(_get(m, "id")),
                    str(m.get("name", "")),
                    float(m.get("memory_base", 0.0)),
                    tuple(m.get("tags", ())),
                )
            )
        )
    edges = []
    for e in doc.get("edges", []):
        if not isinstance(e, list) or len(e) != 2:
            raise FormatError(f"edge {e!r} must be a two-element list")
        edges.append((str(e[0]), str(e[1])))
    graph = ModelGraph(tuple(mods), tuple(edges))
    validate_graph(graph)
    return graph


def cluster_to_doc(cluster: ClusterSpec) -> dict:
    return {
        **header("cluster"),
        "gpu_count": cluster.gpu_count,
        "memory_capacity": cluster.memory_capacity,
        "peak_compute": cluster.peak_compute,
        "peak_bandwidth": cluster.peak_bandwidth,
        "interconnect_alpha": cluster.interconnect_alpha,
        "interconnect_beta": cluster.interconnect_beta,
        "sm_capacity_per_gpu": cluster.sm_capacity_per_gpu,
    }


def cluster_from_doc(doc: Mapping) -> ClusterSpec:
    fields = (
        "gpu_count",
        "memory_capacity",
        "peak_compute",
        "peak_bandwidth",
        "interconnect_alpha",
        "interconnect_beta",
    )
    kw = {f: _get(doc, f, (int, float)) for f in fields}
    kw["sm_capacity_per_gpu"] = doc.get("sm_capacity_per_gpu", 1.0)
    return ClusterSpec(**kw)


# ---------------------------------------------------------------- workloads


def workloads_to_doc(workloads: Sequence[ModuleWorkload], edges: Sequence[tuple[str, str]]) -> dict:
    return {
        **header("workloads"),
        "modules": [
            {
                "id": w.module_id,
                "name": w.name,
                "flops": w.flops,
                "bytes": w.bytes,
                "gradient_bytes": w.gradient_bytes,
                "knee": w.knee,
                "memory_base": w.memory_base,
                "memory_per_quota": w.memory_per_quota,
                "state_bytes": w.state_bytes,
                "tags": list(w.tags),
            }
            for w in workloads
        ],
        "edges": [list(e) for e in edges],
    }


def workloads_from_doc(doc: Mapping) -> tuple[list[ModuleWorkload], list[tuple[str, str]]]:
    """Modules either give raw flops/bytes/gradient_bytes or table form tflops/ci/params."""
    out = []
    for m in _get(doc, "modules", list):
        mid = str(_get(m, "id"))
        if "tflops" in m:
            w = ModuleWorkload.from_table(
                mid,
                float(m["tflops"]),
                float(_get(m, "ci")),
                float(_get(m, "params")),
                float(m.get("knee", 0.5)),
                float(m.get("activation_bytes", 2e9)),
                str(m.get("name", "")),
                tuple(m.get("tags", ())),
            )
        else:
            w = ModuleWorkload(
                mid,
                float(_get(m, "flops")),
                float(_get(m, "bytes")),
                float(_get(m, "gradient_bytes")),
                float(m.get("knee", 0.5)),
                float(m.get("memory_base", 1e9)),
                float(m.get("memory_per_quota", 1e9)),
                float(m.get("state_bytes", 0.0)),
                str(m.get("name", "")),
                tuple(m.get("tags", ())),
            )
        out.append(w)
    edges = [(str(u), str(v)) for u, v in doc.get("edges", [])]
    return out, edges


# ---------------------------------------------------------------- profiles


def surface_records(surface: ScalingSurface) -> list[dict]:
    return [
        {
            "module_id": surface.module_id,
            "d": p.d,
            "a": p.a,
            "latency_s": p.latency,
            "bandwidth_util": p.bandwidth_util,
            "memory_bytes": p.memory,
        }
        for p in surface.points()
    ]


def sample_to_dict(s: ColocationSample) -> dict:
    return {
        "victim": s.victim,
        "members": [{"module_id": m, "a": a, "bandwidth_util": b} for m, a, b in s.members],
        "observed_s": s.observed,
        "base_s": s.base,
    }


def sample_from_dict(d: Mapping) -> ColocationSample:
    members = tuple(
        (str(_get(m, "module_id")), float(_get(m, "a")), float(_get(m, "bandwidth_util")))
        for m in _get(d, "members", list)
    )
    return ColocationSample(str(_get(d, "victim")), members, float(_get(d, "observed_s")), float(_get(d, "base_s")))


def profiles_to_doc(surfaces: Mapping[str, ScalingSurface], samples: Sequence[ColocationSample] = ()) -> dict:
    records = []
    for mid in sorted(surfaces):
        records.extend(surface_records(surfaces[mid]))
    return {
        **header("profiles"),
        "surfaces": records,
        "colocation_samples": [sample_to_dict(s) for s in samples],
    }


def profiles_from_doc(doc: Mapping) -> tuple[dict[str, ScalingSurface], list[ColocationSample]]:
    by_module: dict[str, list[SurfacePoint]] = {}
    for r in _get(doc, "surfaces", list):
        p = _wrap(
            lambda: SurfacePoint(
                int(_get(r, "d")),
                float(_get(r, "a")),
                float(_get(r, "latency_s")),
                float(_get(r, "bandwidth_util")),
                float(_get(r, "memory_bytes")),
            )
        )
        by_module.setdefault(str(_get(r, "module_id")), []).append(p)
    surfaces = {mid: ScalingSurface.from_points(mid, pts) for mid, pts in sorted(by_module.items())}
    samples = [sample_from_dict(s) for s in doc.get("colocation_samples", [])]
    return surfaces, samples


# ---------------------------------------------------------------- interference


def model_to_dict(m: InterferenceModel) -> dict:
    return {
        "e1": m.e1,
        "e2": m.e2,
        "e3": m.e3,
        "r_squared": m.r_squared,
        "sample_count": m.sample_count,
        "include_self": m.include_self,
        "negative_terms": list(m.negative_terms),
    }


def model_from_dict(d: Mapping) -> InterferenceModel:
    return InterferenceModel(
        float(_get(d, "e1")),
        float(_get(d, "e2")),
        float(_get(d, "e3")),
        float(d.get("r_squared", 1.0)),
        int(d.get("sample_count", 0)),
        bool(d.get("include_self", True)),
    )


def interference_to_doc(models: Mapping[str, InterferenceModel], diagnostics: Mapping[str, Any] | None = None) -> dict:
    return {
        **header("interference"),
        "models": {k: model_to_dict(v) for k, v in models.items()},
        "diagnostics": dict(diagnostics or {}),
    }


def interference_from_doc(doc: Mapping, variant: str = "full") -> InterferenceModel:
    models = _get(doc, "models", dict)
    if variant not in models:
        raise FormatError(f"interference file has no {variant!r} model (has {sorted(models)})")
    return model_from_dict(models[variant])


# ---------------------------------------------------------------- plan


def plan_to_doc(plan: DeploymentPlan) -> dict:
    return {
        **header("plan"),
        "granularity": plan.granularity,
        "predicted_iteration_time": plan.predicted_iteration_time,
        "stages": [
            {
                "predicted_time": t,
                "assignments": [
                    {"module": x.module, "d": x.d, "a": x.a, "gpus": list(x.gpus), "memory": x.memory}
                    for x in stage.assignments
                ],
            }
            for stage, t in zip(plan.stages, plan.predicted_stage_times)
        ],
    }


def plan_from_doc(doc: Mapping) -> DeploymentPlan:
    stages, times = [], []
    for s in _get(doc, "stages", list):
        xs = []
        for x in _get(s, "assignments", list):
            try:
                xs.append(
                    Assignment(
                        str(_get(x, "module")),
                        int(_get(x, "d")),
                        float(_get(x, "a")),
                        tuple(int(g) for g in _get(x, "gpus", list)),
                        float(x.get("memory", 0.0)),
                    )
                )
            except ValidationError as exc:
                raise FormatError(str(exc)) from exc
        stages.append(StageAllocation(tuple(xs)))
        times.append(float(_get(s, "predicted_time")))
    plan = DeploymentPlan(tuple(stages), tuple(times), float(doc.get("granularity", 0.1)))
    stored = doc.get("predicted_iteration_time")
    if stored is not None and abs(float(stored) - plan.predicted_iteration_time) > 1e-9 * max(1.0, abs(float(stored))):
        raise FormatError("predicted_iteration_time does not equal the sum of stage times")
    return plan


def trace_lines(trace_dict: Mapping) -> list[str]:
    """JSON-lines rendering of a solve trace: one line per round, then a stats line."""
    lines = [json.dumps({"round": r}, sort_keys=True) for r in trace_dict["rounds"]]
    if "stats" in trace_dict:
        lines.append(json.dumps({"stats": trace_dict["stats"]}, sort_keys=True))
    return lines
