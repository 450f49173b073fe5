"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Each criterion also carries a wall-clock budget that is part of the check.
"""

import os
import subprocess
import sys
import time

import numpy as np
import pytest

from gibly.bench import benchmark_config, benchmark_scene, run_benchmark
from gibly.composite import RegularizerConfig
from gibly.geometry import rotation_matrix
from gibly.kernels import GibKind, GibParams, eval_gib, eval_gib_grad
from gibly.layer import GiblyConfig, GiblyLayer
from gibly.neighborhood import PointCloud, ScaleSchedule, build_index, farthest_point_sample, neighbor_table
from gibly.normalization import make_mc_samples, normalized_eval
from gibly.training import (
    Primitive, SyntheticSceneSpec, cylinder_vs_noise_scene_spec, fit_shape, four_class_scene_spec,
    generate_scene, layer_gradcheck, standardize, train_segmenter,
)
from oracles import central_difference, grad_rel_error, random_params, smooth_scene

# Frozen from the first oracle run of the segmentation comparison
# (accuracy 0.9408 vs 0.6042, mIoU 0.890 vs 0.434): a 30-point accuracy margin
# is required, leaving slack below the observed 33.7 points.
GOLDEN_ACCURACY_MARGIN = 0.30
SEGMENTATION_EPOCHS = 40
SEGMENTATION_SCHEDULE = ScaleSchedule(0.05, 2.0, 3)

_elapsed = {}


@pytest.fixture
def verdict(capsys):
    def report(number, title, ok, detail, seconds, budget):
        ok = bool(ok) and seconds < budget
        with capsys.disabled():
            print(f"\nACCEPTANCE {number} {'PASS' if ok else 'FAIL'} {title}: {detail} "
                  f"[{seconds:.1f} s, budget {budget:.0f} s]")
        assert ok, f"criterion {number} failed: {detail} in {seconds:.1f} s"
    return report


def test_1_gradient_oracle(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    kernel_worst = 0.0
    for _ in range(240):
        p = random_params(rng)
        d = rng.normal(scale=0.8, size=3)
        _, g = eval_gib_grad(p, d)
        fd = central_difference(lambda x: eval_gib(GibParams.from_row(p.kind, x), d), p.to_row(), 1e-5)
        kernel_worst = max(kernel_worst, grad_rel_error(g.to_row(), fd).max())

    def scene(r):
        n = int(r.integers(5, 51))
        cfg = GiblyConfig(schedule=ScaleSchedule(r.uniform(0.2, 0.4), 2.0, int(r.integers(1, 4))),
                          gibs_per_kind=1, num_composites=4, mc_samples=32, projection_dim=3,
                          reg=RegularizerConfig(1e-3, 1e-3), global_seed=int(r.integers(1 << 30)))
        cloud = PointCloud(r.uniform(-0.4, 0.4, (n, 3)), features=r.normal(size=(n, 2)))
        return GiblyLayer(cfg, 2), cloud

    layer_worst = 0.0
    for k in range(20):
        layer, cloud = smooth_scene(scene, 7000 + k)
        report = layer_gradcheck(layer, cloud, step=1e-5, tolerance=1e-4, seed=k, atol=1e-9)
        layer_worst = max(layer_worst, max(report.max_rel_error.values()))
    dt = time.perf_counter() - t0
    verdict(1, "gradient oracle", kernel_worst < 1e-5 and layer_worst < 1e-4,
            f"240 kernels max rel {kernel_worst:.2e} (< 1e-5), 20 layers max rel {layer_worst:.2e} (< 1e-4)",
            dt, 60)


def test_2_normalization_zero_mean(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(77)
    worst = 0.0
    for kind in GibKind:
        for _ in range(10):
            p = random_params(rng, kind)
            mc = make_mc_samples(256, rng.uniform(0.2, 2.0), int(rng.integers(1 << 32)))
            total = sum(normalized_eval(p, y, mc) for y in mc.samples)
            worst = max(worst, abs(total) / len(mc))
    dt = time.perf_counter() - t0
    verdict(2, "normalization zero-mean", worst <= 1e-10,
            f"max |sum|/M = {worst:.2e} over 8 kinds x 10 draws", dt, 5)


def test_3_exact_invariances(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    # dyadic coordinates and shifts are exact in binary floating point
    coords = rng.integers(-256, 256, size=(400, 3)) / 256.0
    layer = GiblyLayer(GiblyConfig(schedule=ScaleSchedule(0.2, 2.0, 3)), 0)
    base = layer.forward(PointCloud(coords)).pre
    shifts = [np.array(s) for s in ([3.0, -5.0, 0.5], [1024.0, 0.0, -64.25], [-0.125, 7.5, 2.0])]
    exact = all(np.array_equal(base, layer.forward(PointCloud(coords + s)).pre) for s in shifts)
    worst = 0.0
    for kind in GibKind:
        for _ in range(50):
            p = random_params(rng, kind)
            d = rng.normal(size=3)
            canon = GibParams.from_row(kind, np.concatenate([[0.0, 0.0, 0.0], p.to_row()[3:]]))
            worst = max(worst, abs(eval_gib(p, d) - eval_gib(canon, rotation_matrix(p.angles).T @ d)))
    dt = time.perf_counter() - t0
    verdict(3, "exact invariances", exact and worst <= 1e-13,
            f"translation bit-exact={exact}, rotation consistency max diff {worst:.1e}", dt, 10)


def _brute_table(coords, radii, block=4_000_000):
    """CSR neighbour lists (ptr, idx, level) by direct distance tests over all pairs."""
    n = len(coords)
    r2 = np.array(radii) ** 2
    rows = max(1, block // n)
    counts, idx, level = [], [], []
    for q0 in range(0, n, rows):
        blk = coords[q0:q0 + rows]
        d2 = np.subtract(coords[None, :, 0], blk[:, None, 0])
        d2 *= d2
        for c in (1, 2):
            dc = np.subtract(coords[None, :, c], blk[:, None, c])
            dc *= dc
            d2 += dc
        qi, xi = np.nonzero(d2 <= r2[-1])
        vals = d2[qi, xi]
        counts.append(np.bincount(qi, minlength=d2.shape[0]))
        idx.append(xi)
        level.append((vals[:, None] > r2[None, :]).sum(axis=1))
    ptr = np.concatenate([[0], np.cumsum(np.concatenate(counts))])
    return ptr, np.concatenate(idx), np.concatenate(level)


def _direct_fps(coords, k):
    sel = [0]
    best = np.full(len(coords), np.inf)
    for _ in range(k - 1):
        d = coords - coords[sel[-1]]
        best = np.minimum(best, (d * d).sum(axis=1))
        best[sel] = -1.0
        sel.append(int(np.argmax(best)))
    return sel


def test_4_neighborhood_exactness(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(404)
    mismatches = 0
    fps_ok = True
    for c in range(100):
        n = int(rng.integers(1, 5001)) if c else 5000
        coords = rng.uniform(0, rng.uniform(1.0, 5.0), size=(n, 3))
        if c % 10 == 1:
            coords = np.round(coords * 8) / 8  # lattice with many boundary ties
        if c % 10 == 2:
            coords = coords[:300] * 0.05  # every point neighbours every other
        cloud = PointCloud(coords)
        radii = tuple(ScaleSchedule(rng.uniform(0.02, 0.15), 2.0, 3).radii)
        # cells both smaller and larger than the largest radius
        table = neighbor_table(build_index(cloud, rng.uniform(0.3, 1.5) * radii[-1]), coords, radii)
        ptr, idx, level = _brute_table(coords, radii)
        if not (np.array_equal(table.ptr, ptr) and np.array_equal(table.idx, idx)
                and np.array_equal(table.level, level)):
            mismatches += 1
        if c < 10:
            k = min(n, 200)
            fps_ok &= list(farthest_point_sample(cloud, k)) == _direct_fps(coords, k)
    dt = time.perf_counter() - t0
    verdict(4, "neighborhood exactness", mismatches == 0 and fps_ok,
            f"100 clouds, {mismatches} differing from brute force, FPS matches oracle={fps_ok}", dt, 30)


def test_5_radius_recovery(verdict):
    t0 = time.perf_counter()
    spec = SyntheticSceneSpec([Primitive("cylinder", 0, 2000, dims={"radius": 0.5, "height": 3.0})], 0)
    res = fit_shape(generate_scene(spec), GibParams(GibKind.HOLLOW_CYLINDER, r=0.2, t=0.1), {"r"}, 500, 1e-2)
    dt = time.perf_counter() - t0
    verdict(5, "radius recovery", 0.48 <= res.params.r <= 0.52,
            f"r = {res.params.r:.4f} after 500 steps from 0.2", dt, 30)


def test_6_segmentation_uplift(verdict):
    t0 = time.perf_counter()
    scene = generate_scene(four_class_scene_spec(seed=0))
    report = train_segmenter(scene, GiblyConfig(schedule=SEGMENTATION_SCHEDULE),
                             epochs=SEGMENTATION_EPOCHS, lr=1e-2, seed=0)
    g, b = report.final("gibly"), report.final("baseline")
    dt = time.perf_counter() - t0
    _elapsed[6] = dt
    margin = g.accuracy - b.accuracy
    verdict(6, "segmentation uplift", margin >= GOLDEN_ACCURACY_MARGIN and g.miou > b.miou,
            f"accuracy {g.accuracy:.4f} vs {b.accuracy:.4f} (margin {100 * margin:+.2f} pts, "
            f"need >= {100 * GOLDEN_ACCURACY_MARGIN:.0f}), mIoU {g.miou:.4f} vs {b.miou:.4f}",
            dt, 300)


def test_7_interpretability(verdict):
    t0 = time.perf_counter()
    scene = generate_scene(cylinder_vs_noise_scene_spec(seed=0))
    report = train_segmenter(scene, GiblyConfig(schedule=SEGMENTATION_SCHEDULE),
                             epochs=SEGMENTATION_EPOCHS, lr=1e-2, seed=0, baseline=False)
    layer = report.layer
    x_in = standardize(np.column_stack([scene.coords, scene.feature_matrix()]))
    comp = layer.forward(PointCloud(scene.coords, x_in)).composites
    a, b = comp[scene.labels == 0], comp[scene.labels == 1]
    # Fisher ratio per (scale, composite); a composite counts at its best scale
    fisher = np.abs(a.mean(0) - b.mean(0)) / np.sqrt(0.5 * (a.var(0) + b.var(0)) + 1e-12)
    i = int(np.argmax(fisher.max(axis=0)))
    j = int(np.argmax(np.abs(layer.W[i])))
    kind = GibKind(int(layer.kinds[j]))
    dt = time.perf_counter() - t0
    total = dt + _elapsed.get(6, 0.0)
    verdict(7, "interpretability", kind in (GibKind.CYLINDER, GibKind.HOLLOW_CYLINDER),
            f"most discriminative composite {i} weights {kind.label} (GIB {j}) highest; "
            f"criteria 6+7 took {total:.1f} s", total, 300)


def test_8_timing_structure(verdict):
    t0 = time.perf_counter()
    cloud = benchmark_scene(100_000, seed=0)
    timings = run_benchmark(cloud, benchmark_config(), repeats=3)
    fr = timings.fractions
    share = fr["neighborhood"]
    uncapped = run_benchmark(cloud, GiblyConfig(), repeats=3).fractions["neighborhood"]
    dt = time.perf_counter() - t0
    ok = timings.largest() == "neighborhood" and share > 0.40 and abs(sum(fr.values()) - 1) <= 1e-6
    verdict(8, "timing structure", ok,
            f"neighbourhood {100 * share:.2f}% with the benchmark cap of 32 (largest: {timings.largest()}); "
            f"uncapped {100 * uncapped:.2f}% (informational); fractions sum {sum(fr.values()):.9f}", dt, 180)


def _cli(args, env):
    res = subprocess.run([sys.executable, "-m", "gibly", *map(str, args)], capture_output=True, env=env,
                         timeout=300)
    assert res.returncode == 0, res.stderr.decode()
    return res.stdout


def test_9_determinism(verdict, tmp_path):
    t0 = time.perf_counter()
    env = dict(os.environ, NUMBA_NUM_THREADS="8")
    cloud = tmp_path / "cloud.xyz"
    spec = tmp_path / "scene.toml"
    spec.write_text('seed = 1\n[[primitive]]\nshape = "cylinder"\nlabel = 0\ncount = 600\nradius = 0.2\n'
                    '[[primitive]]\nshape = "disk"\nlabel = 1\ncount = 600\ncenter = [0.0, 0.0, 0.9]\n'
                    'radius = 0.6\n')
    _cli(["synth", spec, "--out", cloud], env)
    small = ["--base-radius", "0.1", "--epochs", "5"]
    outputs = {}
    for workers in (1, 8):
        for rep in range(2):
            d = tmp_path / f"w{workers}r{rep}"
            d.mkdir()
            out = _cli(["extract", cloud, "--workers", workers, "--out-features", d / "f.csv",
                        "--out-pre-projection", d / "p.csv"], env)
            out += _cli(["train", spec, "--workers", workers, *small, "--report", d / "m.csv",
                         "--params-out", d / "params.txt"], env)
            outputs[(workers, rep)] = (out, *(p.read_bytes() for p in sorted(d.iterdir())))
    ref = outputs[(1, 0)]
    same = all(v == ref for v in outputs.values())
    dt = time.perf_counter() - t0
    verdict(9, "determinism", same,
            f"extract+train outputs byte-identical across 2 runs x workers {{1, 8}}: {same}", dt, 120)
