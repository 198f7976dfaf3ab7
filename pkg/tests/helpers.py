"""Small hand-built instances shared by the tests."""

import math

from tsmux.model import ClusterSpec
from tsmux.perf import ScalingSurface


# criterion number -> (passed, detail); filled by test_acceptance, printed at session end
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (bool(passed), detail)
    print(f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}")


def cluster(gpus=1, memory=80e9):
    return ClusterSpec(gpus, memory, 400e12, 8e12, 20e-6, 1 / 50e9)


def linear_surface(mid, l1=1.0, bw=0.0, d_values=(1,), a_values=(0.5, 1.0), memory=1e9):
    """Latency l1 / (a * d): perfectly linear scaling in quota and replicas."""
    lat = [[l1 / (a * d) for a in a_values] for d in d_values]
    bws = [[bw for _ in a_values] for _ in d_values]
    mem = [[memory for _ in a_values] for _ in d_values]
    return ScalingSurface(mid, d_values, a_values, lat, bws, mem)


def flat_surface(mid, lat_by_a, bw=0.0, memory=1e9):
    a_values = sorted(lat_by_a)
    return ScalingSurface(
        mid, (1,), a_values, [[lat_by_a[a] for a in a_values]], [[bw] * len(a_values)], [[memory] * len(a_values)]
    )


def rel(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


def close(a, b, tol=1e-9):
    return math.isclose(a, b, rel_tol=tol, abs_tol=0.0)

