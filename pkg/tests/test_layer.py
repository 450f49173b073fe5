import numpy as np
import pytest

from gibly import _accel
from gibly.composite import RegularizerConfig
from gibly.errors import IndexCloudMismatch, ShapeMismatch, StaleCache
from gibly.kernels import GibKind, GibParams
from gibly.layer import GiblyConfig, GiblyLayer
from gibly.neighborhood import PointCloud, ScaleSchedule, build_index
from gibly.training import layer_gradcheck
from oracles import psi, smooth_scene


def small_config(**kw):
    base = dict(schedule=ScaleSchedule(0.3, 2.0, 2), gibs_per_kind=1, num_composites=4,
                mc_samples=32, projection_dim=3, reg=RegularizerConfig(1e-3, 1e-3))
    base.update(kw)
    return GiblyConfig(**base)


def pass_through_layer(radius=0.5, samples=64, seed=0):
    cfg = GiblyConfig(schedule=ScaleSchedule(radius, 2.0, 1), gibs_per_kind=2, num_composites=16,
                      mc_samples=samples, projection_dim=16, global_seed=seed)
    layer = GiblyLayer(cfg, 0)
    layer.W[...] = np.eye(16)
    layer.projection[...] = np.eye(16)
    return layer


def oracle_scores(layer, coords, radius):
    """Mean kernel score over the radius ball minus the sample-set mean, per query and kernel."""
    mc = layer.mc_sets[0].samples
    out = np.empty((len(coords), len(layer.kinds)))
    for j, p in enumerate(layer.gib_params):
        mean = np.mean([psi(p, y) for y in mc])
        for i, x in enumerate(coords):
            nbrs = coords[np.sum((coords - x) ** 2, axis=1) <= radius * radius]
            out[i, j] = np.mean([psi(p, y - x) for y in nbrs]) - mean
    return out


def test_single_point_scores_equal_self_offset(backend):
    layer = pass_through_layer()
    res = layer.forward(PointCloud(np.array([[1.0, 2.0, 3.0]])))
    expected = oracle_scores(layer, np.array([[1.0, 2.0, 3.0]]), 0.5)
    np.testing.assert_allclose(res.output, expected, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(res.g[:, 0, :], expected, rtol=1e-12, atol=1e-14)


def test_pass_through_matches_direct_oracle(backend):
    rng = np.random.default_rng(2)
    coords = rng.uniform(-0.6, 0.6, size=(40, 3))
    layer = pass_through_layer(seed=3)
    out = layer.forward(PointCloud(coords)).output
    np.testing.assert_allclose(out, oracle_scores(layer, coords, 0.5), rtol=1e-11, atol=1e-13)


def test_aligned_cylinder_beats_rotated():
    coords = np.array([[0.0, 0.0, -0.2], [0.0, 0.0, 0.0], [0.0, 0.0, 0.2]])
    cfg = GiblyConfig(schedule=ScaleSchedule(0.5, 2.0, 1), gibs_per_kind=1, num_composites=8,
                      mc_samples=64, projection_dim=8)
    layer = GiblyLayer(cfg, 0)
    layer.set_gib(0, GibParams(GibKind.CYLINDER, (0, 0, 0), r=0.05))
    layer.set_gib(1, GibParams(GibKind.CYLINDER, (np.pi / 2, 0, 0), r=0.05))
    g = layer.forward(PointCloud(coords)).g[1, 0]
    assert g[0] > g[1]
    aligned = np.mean([psi(GibParams(GibKind.CYLINDER, r=0.05), c) for c in coords])
    rotated = np.mean([psi(GibParams(GibKind.CYLINDER, (np.pi / 2, 0, 0), r=0.05), c) for c in coords])
    assert aligned > rotated


def test_output_width_and_features(backend):
    rng = np.random.default_rng(0)
    cloud = PointCloud(rng.normal(size=(30, 3)), features=rng.normal(size=(30, 2)))
    layer = GiblyLayer(GiblyConfig(), 2)
    res = layer.forward(cloud)
    assert res.pre.shape == (30, 2 + 48)
    assert res.output.shape == (30, 32)
    np.testing.assert_array_equal(res.pre[:, :2], cloud.features)
    assert GiblyLayer(GiblyConfig(), 0).forward(PointCloud(cloud.coords)).pre.shape == (30, 48)


def test_zero_upstream_gives_pure_regularizer_gradient(backend):
    rng = np.random.default_rng(1)
    cloud = PointCloud(rng.uniform(-0.4, 0.4, (20, 3)))
    layer = GiblyLayer(small_config(), 0)
    res = layer.forward(cloud)
    grads = layer.backward(res.cache, np.zeros((20, 3)))
    reg = layer.config.reg
    np.testing.assert_array_equal(grads.W, reg.lambda_l1 * np.sign(layer.W) + 2 * reg.lambda_l2 * layer.W)
    for arr in (grads.theta, grads.projection, grads.bias):
        assert np.all(arr == 0.0)


def test_weight_gradient_closed_form(backend):
    rng = np.random.default_rng(4)
    cloud = PointCloud(rng.uniform(-0.4, 0.4, (25, 3)), features=rng.normal(size=(25, 1)))
    layer = GiblyLayer(small_config(reg=RegularizerConfig(0.0, 0.0)), 1)
    res = layer.forward(cloud)
    G = rng.normal(size=(25, 3))
    grads = layer.backward(res.cache, G)
    dC = (G @ layer.projection.T)[:, 1:].reshape(25, 2, 4)
    np.testing.assert_allclose(grads.W, np.einsum("isn,ism->nm", dC, res.g), rtol=1e-12)
    np.testing.assert_allclose(grads.projection, res.pre.T @ G, rtol=1e-12)
    np.testing.assert_allclose(grads.bias, G.sum(axis=0), rtol=1e-12)


def test_error_conditions():
    rng = np.random.default_rng(0)
    cloud = PointCloud(rng.normal(size=(10, 3)))
    layer = GiblyLayer(small_config(), 0)
    with pytest.raises(ShapeMismatch):
        layer.forward(PointCloud(cloud.coords, features=np.ones((10, 1))))
    other = build_index(PointCloud(rng.normal(size=(10, 3))), 0.6)
    with pytest.raises(IndexCloudMismatch):
        layer.forward(cloud, other)
    res = layer.forward(cloud)
    with pytest.raises(ShapeMismatch):
        layer.backward(res.cache, np.zeros((10, 4)))
    layer.W[0, 0] += 1.0
    with pytest.raises(StaleCache):
        layer.backward(res.cache, np.zeros((10, 3)))
    with pytest.raises(StaleCache):
        layer.backward(None, np.zeros((10, 3)))


def test_project_parameters():
    layer = GiblyLayer(small_config(), 0)
    before = layer.theta.copy()
    layer.project_parameters()
    assert np.array_equal(layer.theta, before)
    layer.theta[2, 5] = 0.7
    layer.theta[0, 0] = 10.0
    layer.project_parameters()
    assert layer.theta[2, 5] == 0.499
    assert -np.pi < layer.theta[0, 0] <= np.pi
    once = layer.theta.copy()
    layer.project_parameters()
    assert np.array_equal(layer.theta, once)


def test_translation_keeps_geometric_block_bit_identical(backend):
    rng = np.random.default_rng(8)
    # dyadic coordinates shift exactly, so offsets are bit-identical
    coords = rng.integers(-64, 64, size=(200, 3)) / 128.0
    layer = GiblyLayer(GiblyConfig(schedule=ScaleSchedule(0.1, 2.0, 3)), 0)
    a = layer.forward(PointCloud(coords)).pre
    b = layer.forward(PointCloud(coords + np.array([17.0, -3.0, 250.0]))).pre
    assert np.array_equal(a, b)


def test_forward_is_deterministic_across_workers():
    rng = np.random.default_rng(3)
    cloud = PointCloud(rng.uniform(-1, 1, (600, 3)))
    layer = GiblyLayer(GiblyConfig(schedule=ScaleSchedule(0.1, 2.0, 3)), 0)
    prev = _accel.workers()
    try:
        _accel.set_workers(1)
        a = layer.forward(cloud).output
        _accel.set_workers(4)
        b = layer.forward(cloud).output
    finally:
        _accel.set_workers(prev)
    assert np.array_equal(a, b)
    assert np.array_equal(a, layer.forward(cloud).output)


def test_backends_agree_on_forward_and_backward():
    if not _accel.HAVE_NUMBA:
        pytest.skip("numba not installed")
    rng = np.random.default_rng(6)
    cloud = PointCloud(rng.uniform(-0.5, 0.5, (80, 3)), features=rng.normal(size=(80, 2)))
    G = rng.normal(size=(80, 3))
    out = {}
    for name in ("numba", "numpy"):
        prev = _accel.set_backend(name)
        try:
            layer = GiblyLayer(small_config(), 2)
            res = layer.forward(cloud)
            out[name] = (res.output, layer.backward(res.cache, G).theta)
        finally:
            _accel.set_backend(prev)
    np.testing.assert_allclose(out["numba"][0], out["numpy"][0], rtol=1e-11, atol=1e-13)
    np.testing.assert_allclose(out["numba"][1], out["numpy"][1], rtol=1e-9, atol=1e-11)


def _random_scene(rng):
    n = int(rng.integers(5, 50))
    cloud = PointCloud(rng.uniform(-0.4, 0.4, (n, 3)), features=rng.normal(size=(n, 2)))
    return GiblyLayer(small_config(global_seed=int(rng.integers(1000))), 2), cloud


@pytest.mark.parametrize("seed", range(4))
def test_gradients_match_finite_differences(backend, seed):
    layer, cloud = smooth_scene(_random_scene, 100 + seed)
    report = layer_gradcheck(layer, cloud, seed=seed, step=1e-6, tolerance=1e-4, atol=1e-9)
    assert report.passed, report.lines()
