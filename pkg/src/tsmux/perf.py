"""Scaling surfaces and the interference-rectified module latency estimator."""

from __future__ import annotations

import bisect
import math
import warnings
from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from tsmux.errors import DegenerateDesignMatrix, FormatError, InsufficientSamples, OutOfRange
from tsmux.model import DeploymentOption, StageAllocation

SNAP_EPS = 1e-9


class SurfaceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SurfacePoint:
    d: int
    a: float
    latency: float
    bandwidth_util: float
    memory: float

    def __post_init__(self):
        if not self.latency > 0:
            raise FormatError(f"latency must be > 0 at (d={self.d}, a={self.a})")
        if not 0 <= self.bandwidth_util <= 1:
            raise FormatError(f"bandwidth utilization must lie in [0, 1] at (d={self.d}, a={self.a})")
        if not self.memory > 0:
            raise FormatError(f"memory must be > 0 at (d={self.d}, a={self.a})")


class ScalingSurface:
    """Complete (d, a) grid of latency, bandwidth utilization and memory for one module."""

    def __init__(self, module_id: str, d_values, a_values, latency, bandwidth, memory):
        self.module_id = module_id
        self.d_values = tuple(int(d) for d in d_values)
        self.a_values = tuple(float(a) for a in a_values)
        self.latency = np.asarray(latency, dtype=float)
        self.bandwidth = np.asarray(bandwidth, dtype=float)
        self.memory = np.asarray(memory, dtype=float)
        shape = (len(self.d_values), len(self.a_values))
        for arr in (self.latency, self.bandwidth, self.memory):
            if arr.shape != shape:
                raise FormatError(f"surface {module_id}: expected grid shape {shape}, got {arr.shape}")
        if list(self.d_values) != sorted(set(self.d_values)) or self.d_values[0] < 1:
            raise FormatError(f"surface {module_id}: d values must be distinct, ascending, >= 1")
        if list(self.a_values) != sorted(set(self.a_values)) or not 0 < self.a_values[0]:
            raise FormatError(f"surface {module_id}: a values must be distinct, ascending, > 0")
        if self.a_values[-1] > 1 + SNAP_EPS:
            raise FormatError(f"surface {module_id}: a values must not exceed 1.0")
        self._log_d = tuple(math.log2(d) for d in self.d_values)
        self.check_monotone()

    @classmethod
    def from_points(cls, module_id: str, points: Iterable[SurfacePoint]) -> "ScalingSurface":
        points = list(points)
        ds = sorted({p.d for p in points})
        a_s = sorted({p.a for p in points})
        grid = {(p.d, p.a): p for p in points}
        if len(grid) != len(points):
            raise FormatError(f"surface {module_id}: duplicate grid points")
        lat = np.empty((len(ds), len(a_s)))
        bw = np.empty_like(lat)
        mem = np.empty_like(lat)
        for i, d in enumerate(ds):
            for j, a in enumerate(a_s):
                p = grid.get((d, a))
                if p is None:
                    raise FormatError(f"surface {module_id}: grid point (d={d}, a={a}) missing")
                lat[i, j], bw[i, j], mem[i, j] = p.latency, p.bandwidth_util, p.memory
        return cls(module_id, ds, a_s, lat, bw, mem)

    def points(self) -> list[SurfacePoint]:
        return [
            SurfacePoint(d, a, float(self.latency[i, j]), float(self.bandwidth[i, j]), float(self.memory[i, j]))
            for i, d in enumerate(self.d_values)
            for j, a in enumerate(self.a_values)
        ]

    def check_monotone(self) -> bool:
        bad = np.diff(self.latency, axis=1) > 0
        if bad.any():
            i, j = map(int, np.argwhere(bad)[0])
            warnings.warn(
                f"surface {self.module_id}: latency increases with quota at d={self.d_values[i]} "
                f"between a={self.a_values[j]} and a={self.a_values[j + 1]}",
                SurfaceWarning,
                stacklevel=3,
            )
            return False
        return True

    def contains(self, d: float, a: float) -> bool:
        return (
            self.d_values[0] <= d <= self.d_values[-1]
            and self.a_values[0] - SNAP_EPS <= a <= self.a_values[-1] + SNAP_EPS
        )

    def lookup(self, d: float, a: float) -> tuple[float, float, float]:
        """(latency, bandwidth utilization, memory) at (d, a); bilinear in (log2 d, a)."""
        if not self.d_values[0] <= d <= self.d_values[-1]:
            raise OutOfRange("d", d, self.d_values[0], self.d_values[-1])
        if not self.a_values[0] - SNAP_EPS <= a <= self.a_values[-1] + SNAP_EPS:
            raise OutOfRange("a", a, self.a_values[0], self.a_values[-1])
        i, td = _bracket(self._log_d, math.log2(d))
        j, ta = _bracket(self.a_values, a)
        return tuple(_bilinear(arr, i, j, td, ta) for arr in (self.latency, self.bandwidth, self.memory))


def _bracket(xs: Sequence[float], x: float) -> tuple[int, float]:
    """Index of the lower grid neighbour and the fractional offset towards the next one."""
    k = bisect.bisect_left(xs, x - SNAP_EPS)
    if k < len(xs) and abs(xs[k] - x) <= SNAP_EPS:
        return k, 0.0
    k -= 1
    return k, (x - xs[k]) / (xs[k + 1] - xs[k])


def _lerp(lo: float, hi: float, t: float) -> float:
    if t == 0.0:
        return lo
    v = lo + (hi - lo) * t
    return min(max(v, min(lo, hi)), max(lo, hi))


def _bilinear(arr: np.ndarray, i: int, j: int, td: float, ta: float) -> float:
    row = _lerp(float(arr[i, j]), float(arr[i, j + 1]), ta) if ta else float(arr[i, j])
    if not td:
        return row
    nxt = _lerp(float(arr[i + 1, j]), float(arr[i + 1, j + 1]), ta) if ta else float(arr[i + 1, j])
    return _lerp(row, nxt, td)


def lookup_base(surface: ScalingSurface, opt: DeploymentOption) -> tuple[float, float, float]:
    return surface.lookup(opt.d, opt.a)


@dataclass(frozen=True)
class InterferenceModel:
    """Coefficients of delta = e1 + e2 * sum(B) + e3 * prod(B) over a GPU's residents."""

    e1: float
    e2: float
    e3: float
    r_squared: float = 1.0
    sample_count: int = 0
    include_self: bool = True

    @classmethod
    def unaware(cls) -> "InterferenceModel":
        return cls(0.0, 0.0, 0.0)

    @property
    def nonnegative(self) -> bool:
        return self.e1 >= 0 and self.e2 >= 0 and self.e3 >= 0

    @property
    def negative_terms(self) -> tuple[str, ...]:
        return tuple(n for n in ("e1", "e2", "e3") if getattr(self, n) < 0)

    @property
    def fingerprint(self) -> str:
        return "{}:{}:{}:{}".format(
            float(self.e1).hex(), float(self.e2).hex(), float(self.e3).hex(), int(self.include_self)
        )

    def additive_only(self) -> "InterferenceModel":
        return replace(self, e3=0.0)

    def delay(self, bandwidths: Sequence[float]) -> float:
        """Interference delay on one GPU given its residents' B values (canonical order)."""
        if not bandwidths:
            return self.e1
        return self.e1 + self.e2 * sum(bandwidths) + self.e3 * math.prod(bandwidths)


def gpu_delay(model: InterferenceModel, module: str, residents: Sequence[tuple[str, float]]) -> float:
    """Delay for `module` on a GPU whose residents are (module id, B) pairs."""
    bws = [b for mid, b in sorted(residents) if model.include_self or mid != module]
    return model.delay(bws)


def resident_bandwidths(stage: StageAllocation, surfaces: Mapping[str, ScalingSurface]) -> dict[str, float]:
    return {x.module: surfaces[x.module].lookup(x.d, x.a)[1] for x in stage.assignments}


def rectified_latency(
    stage: StageAllocation,
    module: str,
    surfaces: Mapping[str, ScalingSurface],
    model: InterferenceModel,
) -> float:
    """Base latency of `module` plus the worst per-GPU interference delay over its GPUs."""
    x = stage[module]
    base = surfaces[module].lookup(x.d, x.a)[0]
    bw = resident_bandwidths(stage, surfaces)
    res = stage.residents()
    worst = max(gpu_delay(model, module, [(y.module, bw[y.module]) for y in res[g]]) for g in x.gpus)
    return base + worst


def additive_only_latency(stage, module, surfaces, model: InterferenceModel) -> float:
    return rectified_latency(stage, module, surfaces, model.additive_only())


def stage_latencies(
    stage: StageAllocation, surfaces: Mapping[str, ScalingSurface], model: InterferenceModel
) -> dict[str, float]:
    return {m: rectified_latency(stage, m, surfaces, model) for m in stage.modules}


def stage_time(stage: StageAllocation, surfaces, model: InterferenceModel) -> float:
    return max(stage_latencies(stage, surfaces, model).values())


@dataclass(frozen=True)
class ColocationSample:
    """One observation of a victim module sharing a single GPU with its peers.

    members holds (module id, quota, B) for every resident, victim included.
    """

    victim: str
    members: tuple[tuple[str, float, float], ...]
    observed: float
    base: float

    def features(self, include_self: bool = True) -> tuple[float, float]:
        bws = [b for mid, _, b in sorted(self.members) if include_self or mid != self.victim]
        if not bws:
            return 0.0, 0.0
        return sum(bws), math.prod(bws)


def fit_interference(
    samples: Sequence[ColocationSample], additive_only: bool = False, include_self: bool = True
) -> InterferenceModel:
    """Least-squares fit of (e1, e2, e3) to observed - base via the normal equations."""
    n = len(samples)
    if n < 9:
        raise InsufficientSamples(f"need at least 9 colocation samples, got {n}")
    if len({len(s.members) for s in samples}) < 2:
        raise InsufficientSamples("samples must span at least two colocation cardinalities")
    feats = np.array([s.features(include_self) for s in samples])
    y = np.array([s.observed - s.base for s in samples])
    if np.all(feats == feats[0]):
        raise DegenerateDesignMatrix("all samples share identical sum(B) and prod(B)")
    cols = [np.ones(n), feats[:, 0]] + ([] if additive_only else [feats[:, 1]])
    X = np.column_stack(cols)
    gram = X.T @ X
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise DegenerateDesignMatrix("design matrix is rank deficient")
    coef = np.linalg.solve(gram, X.T @ y)
    # one refinement step on the residual keeps zero-noise recovery at round-off level
    coef = coef + np.linalg.solve(gram, X.T @ (y - X @ coef))
    resid = y - X @ coef
    ss_res = float(resid @ resid)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot > 0:
        r2 = 1.0 - ss_res / ss_tot
    else:
        r2 = 1.0 if ss_res == 0 else -math.inf
    e3 = 0.0 if additive_only else float(coef[2])
    return InterferenceModel(float(coef[0]), float(coef[1]), e3, r2, n, include_self)


def prediction_errors(
    samples: Sequence[ColocationSample], model: InterferenceModel
) -> np.ndarray:
    """Relative error |predicted - observed| / observed of each sample under `model`."""
    out = []
    for s in samples:
        bws = [b for mid, _, b in sorted(s.members) if model.include_self or mid != s.victim]
        pred = s.base + model.delay(bws)
        out.append(abs(pred - s.observed) / s.observed)
    return np.array(out)
