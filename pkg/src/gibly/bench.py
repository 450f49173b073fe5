"""Phase-level timing of the forward pass.

The forward pass reports into five named phases: neighbourhood search,
rotation matrices, normalisation (sample-set means and their subtraction),
kernel evaluation (rotating each offset, scoring and aggregating), and
composite mixing.
Whatever remains of the wall time is reported as "other".
"""

import contextlib
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from . import _accel
from .layer import PHASES, GiblyConfig, GiblyLayer
from .neighborhood import farthest_point_sample
from .training import Primitive, SyntheticSceneSpec, generate_scene

ROWS = {
    "neighborhood": "Neighborhood Computation",
    "rotation": "R_phi Computation",
    "normalization": "GIB Normalization",
    "gib": "GIB Computation",
    "composite": "Composite Bias Computation",
    "other": "Other operations",
}
ALL_PHASES = PHASES + ("other",)


class PhaseTimer:
    """Accumulates wall time per named phase."""

    def __init__(self):
        self.times = dict.fromkeys(PHASES, 0.0)

    @contextlib.contextmanager
    def phase(self, name):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.times[name] += time.perf_counter() - t0


@dataclass
class PhaseTimings:
    """Median per-phase seconds; ``other`` is the residual of the median total."""

    times: dict
    repeats: int
    workers: int = 1
    samples: list = field(default_factory=list, repr=False)

    @property
    def total(self):
        return sum(self.times.values())

    @property
    def fractions(self):
        total = self.total
        if total <= 0:
            return {k: 1.0 / len(self.times) for k in self.times}
        return {k: v / total for k, v in self.times.items()}

    def largest(self):
        return max(self.times, key=self.times.get)

    def table(self):
        fr = self.fractions
        width = max(len(v) for v in ROWS.values())
        lines = [f"{'Operation':<{width}}  {'Time [s]':>10}  {'Share':>8}"]
        for key in ALL_PHASES:
            lines.append(f"{ROWS[key]:<{width}}  {self.times[key]:>10.4f}  {100 * fr[key]:>7.2f}%")
        lines.append(f"{'Total':<{width}}  {self.total:>10.4f}  {100.0:>7.2f}%")
        return "\n".join(lines) + "\n"

    def csv(self):
        fr = self.fractions
        lines = ["phase,seconds,fraction"]
        for key in ALL_PHASES:
            lines.append(f"{ROWS[key]},{self.times[key]:.9g},{fr[key]:.9g}")
        return "\n".join(lines) + "\n"


def run_benchmark(cloud, config=None, repeats=5, layer=None):
    """Time ``repeats`` forward passes, dropping the first as warm-up.

    The index is rebuilt inside every pass so that neighbourhood construction
    is part of what is measured.
    """
    if repeats < 3:
        raise ValueError("repeats must be >= 3")
    config = config or GiblyConfig()
    layer = layer or GiblyLayer(config, cloud.num_features)
    samples = []
    for _ in range(repeats):
        timer = PhaseTimer()
        t0 = time.perf_counter()
        layer.forward(cloud, timer=timer)
        total = time.perf_counter() - t0
        row = dict(timer.times)
        row["other"] = max(total - sum(timer.times.values()), 0.0)
        samples.append(row)
    kept = samples[1:]
    times = {k: statistics.median(s[k] for s in kept) for k in ALL_PHASES}
    return PhaseTimings(times, repeats, _accel.workers(), samples)


def instrumentation_overhead(cloud, config=None, repeats=5):
    """Relative slowdown of timed versus untimed forward passes (median of each)."""
    config = config or GiblyConfig()
    layer = GiblyLayer(config, cloud.num_features)
    layer.forward(cloud)
    plain, timed = [], []
    for _ in range(repeats):
        t0 = time.perf_counter()
        layer.forward(cloud)
        plain.append(time.perf_counter() - t0)
        t0 = time.perf_counter()
        layer.forward(cloud, timer=PhaseTimer())
        timed.append(time.perf_counter() - t0)
    base = statistics.median(plain)
    return (statistics.median(timed) - base) / base


def compare_backends(cloud, config=None, repeats=3):
    """Median forward time per backend and the largest output difference between them."""
    config = config or GiblyConfig()
    layer = GiblyLayer(config, cloud.num_features)
    result = {}
    outputs = {}
    previous = _accel.backend()
    try:
        for name in _accel.BACKENDS:
            if name == "numba" and not _accel.HAVE_NUMBA:
                continue
            _accel.set_backend(name)
            layer.forward(cloud)
            times = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                out = layer.forward(cloud).output
                times.append(time.perf_counter() - t0)
            result[name] = statistics.median(times)
            outputs[name] = out
    finally:
        _accel.set_backend(previous)
    if len(outputs) == 2:
        result["max_abs_diff"] = float(np.abs(outputs["numba"] - outputs["numpy"]).max())
    return result


def benchmark_scene(num_points=100_000, seed=0, oversample=1.5, extent=40.0, height=10.0):
    """Outdoor-like scene (~extent x extent x height m) reduced to ``num_points`` by FPS.

    Ground, poles, trees (trunk, cone or ellipsoid crown), building shells and
    sparse clutter are sampled at ``oversample * num_points`` and then
    subsampled with farthest point sampling.
    """
    rng = np.random.default_rng(seed)
    raw = int(round(oversample * num_points))
    half = extent / 2.0
    prims = []

    def spot():
        return rng.uniform(-half * 0.9, half * 0.9, 2)

    def add(shape, label, share, center, dims, surface=True, angles=(0.0, 0.0, 0.0)):
        prims.append(Primitive(shape, label, max(int(share * raw), 1), tuple(center),
                               tuple(angles), dims, surface, 0.02))

    add("box", 0, 0.40, (0, 0, 0), {"size": (extent, extent, 0.05)}, surface=False)
    for _ in range(12):
        x, y = spot()
        h = rng.uniform(0.8, 1.0) * height
        add("cylinder", 1, 0.15 / 12, (x, y, h / 2), {"radius": 0.2, "height": h})
    for _ in range(20):
        x, y = spot()
        trunk = rng.uniform(1.5, 3.0)
        add("cylinder", 2, 0.05 / 20, (x, y, trunk / 2), {"radius": 0.15, "height": trunk})
        if rng.uniform() < 0.5:
            crown = rng.uniform(3.0, 6.0)
            add("cone", 3, 0.15 / 20, (x, y, trunk + crown / 2),
                {"radius": rng.uniform(1.0, 2.0), "height": crown})
        else:
            r = rng.uniform(1.0, 2.0)
            add("ellipsoid", 3, 0.15 / 20, (x, y, trunk + r), {"axes": (r, r, r * 1.2)})
    for _ in range(4):
        x, y = spot()
        sx, sy, sz = rng.uniform(4, 8), rng.uniform(4, 8), rng.uniform(3, 7)
        add("box", 4, 0.2 / 4, (x, y, sz / 2), {"size": (sx, sy, sz)},
            angles=(0.0, 0.0, rng.uniform(-np.pi, np.pi)))
    add("box", 5, 0.05, (0, 0, height / 2), {"size": (extent, extent, height)}, surface=False)
    scene = generate_scene(SyntheticSceneSpec(prims, seed))
    if len(scene) <= num_points:
        return scene
    keep = farthest_point_sample(scene, num_points)
    return scene.subset(np.sort(keep))


def benchmark_config(**overrides):
    """Default layer configuration with the benchmark's closest-32 neighbour cap."""
    kw = {"max_neighbors": 32}
    kw.update(overrides)
    return GiblyConfig(**kw)


__all__ = [
    "ROWS", "PhaseTimer", "PhaseTimings", "run_benchmark", "instrumentation_overhead",
    "compare_backends", "benchmark_scene", "benchmark_config",
]
