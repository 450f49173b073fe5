import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gibly import _accel
from gibly.errors import KOutOfRange, NonPositiveCellSize
from gibly.neighborhood import (
    PointCloud, ScaleSchedule, build_index, farthest_point_sample, multi_scale_neighborhoods,
    neighbor_table, radius_neighbors,
)
from oracles import brute_force, greedy_fps


LINE = PointCloud(np.array([[0.0, 0, 0], [1, 0, 0], [3, 0, 0]]))


def test_point_cloud_validation():
    with pytest.raises(ValueError):
        PointCloud(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        PointCloud(np.array([[0.0, np.nan, 0]]))
    with pytest.raises(ValueError):
        PointCloud(np.zeros((2, 3)), labels=np.array([0]))
    with pytest.raises(ValueError):
        PointCloud(np.zeros((2, 3)), features=np.zeros((3, 1)))
    assert PointCloud(np.zeros((2, 3))).feature_matrix().shape == (2, 0)


def test_schedule_defaults():
    assert ScaleSchedule().radii == (0.4, 0.8, 1.6)
    with pytest.raises(ValueError):
        ScaleSchedule(0.4, 1.0, 3)


def test_non_positive_cell_size():
    for c in (0.0, -1.0, float("nan")):
        with pytest.raises(NonPositiveCellSize):
            build_index(LINE, c)


def test_single_point_index():
    idx = build_index(PointCloud(np.array([[1.0, 2.0, 3.0]])), 0.5)
    assert idx.grid == {(0, 0, 0): [0]}


def test_coincident_points_share_a_cell(backend):
    cloud = PointCloud(np.array([[1.0, 1, 1], [1.0, 1, 1]]))
    idx = build_index(cloud, 1.0)
    assert len(idx.grid) == 1
    assert radius_neighbors(idx, [1.0, 1, 1], 0.1).tolist() == [0, 1]


def test_every_point_in_exactly_one_cell(rng):
    cloud = PointCloud(rng.uniform(-3, 3, size=(500, 3)))
    idx = build_index(cloud, 0.7)
    members = sorted(i for pts in idx.grid.values() for i in pts)
    assert members == list(range(500))


def test_line_examples(backend):
    idx = build_index(LINE, 1.1)
    assert radius_neighbors(idx, [0, 0, 0], 1.1).tolist() == [0, 1]
    assert radius_neighbors(idx, [100, 100, 100], 0.5).tolist() == []


def test_1000_uniform_points_match_brute_force(backend, rng):
    coords = rng.uniform(0, 1, size=(1000, 3))
    idx = build_index(PointCloud(coords), 0.1)
    for q in rng.uniform(-0.1, 1.1, size=(50, 3)):
        for r in (0.05, 0.1, 0.23):
            assert np.array_equal(radius_neighbors(idx, q, r), brute_force(coords, q, r))


@given(st.integers(1, 300), st.floats(0.01, 2.0), st.floats(0.05, 3.0), st.integers(0, 2**31))
def test_grid_equals_brute_force_for_any_cell_size(n, cell, radius, seed):
    rng = np.random.default_rng(seed)
    coords = rng.normal(size=(n, 3))
    idx = build_index(PointCloud(coords), cell)
    for q in np.vstack([coords[:5], rng.normal(size=(5, 3))]):
        assert np.array_equal(radius_neighbors(idx, q, radius), brute_force(coords, q, radius))


def test_boundary_distance_is_inclusive(backend):
    cloud = PointCloud(np.array([[0.0, 0, 0], [0.5, 0, 0], [0, 0.25, 0]]))
    idx = build_index(cloud, 0.1)
    assert radius_neighbors(idx, [0, 0, 0], 0.5).tolist() == [0, 1, 2]


def test_query_includes_itself(backend, rng):
    coords = rng.uniform(size=(200, 3))
    table = neighbor_table(build_index(PointCloud(coords), 0.3), coords, (0.01,))
    for q in range(200):
        assert q in table.neighbors(q)


def test_lattice_scales(backend):
    g = np.arange(-1.0, 2.0)
    coords = np.array(np.meshgrid(g, g, g, indexing="ij")).reshape(3, -1).T
    idx = build_index(PointCloud(coords), 2.2)
    res = multi_scale_neighborhoods(idx, [[0.0, 0, 0]], ScaleSchedule(1.1, 2.0, 2))
    assert len(res[0][0]) == 7 and len(res[0][1]) == 27


def test_single_scale_reduces_to_radius_neighbors(backend, rng):
    coords = rng.uniform(size=(300, 3))
    idx = build_index(PointCloud(coords), 0.2)
    res = multi_scale_neighborhoods(idx, coords[:20], ScaleSchedule(0.2, 2.0, 1))
    for q in range(20):
        assert np.array_equal(res[q][0], radius_neighbors(idx, coords[q], 0.2))


def test_scales_are_nested_and_exact(backend, rng):
    coords = rng.uniform(size=(800, 3))
    sched = ScaleSchedule(0.07, 2.0, 3)
    idx = build_index(PointCloud(coords), max(sched.radii))
    res = multi_scale_neighborhoods(idx, coords, sched)
    for q in range(0, 800, 7):
        for s, r in enumerate(sched.radii):
            assert np.array_equal(res[q][s], brute_force(coords, coords[q], r))
        assert set(res[q][0]) <= set(res[q][1]) <= set(res[q][2])


def test_counts_match_lists(backend, rng):
    coords = rng.uniform(size=(300, 3))
    table = neighbor_table(build_index(PointCloud(coords), 0.4), coords, (0.1, 0.2, 0.4))
    for q in range(300):
        for s in range(3):
            assert table.counts[q, s] == len(table.neighbors(q, s))


def test_max_neighbors_keeps_closest_and_stays_nested(backend, rng):
    coords = rng.uniform(size=(400, 3))
    radii = (0.1, 0.2, 0.4)
    table = neighbor_table(build_index(PointCloud(coords), 0.4), coords, radii, max_neighbors=8)
    for q in range(0, 400, 11):
        d2 = np.sum((coords - coords[q]) ** 2, axis=1)
        prev = set()
        for s, r in enumerate(radii):
            inside = np.flatnonzero(d2 <= r * r)
            keep = inside[np.lexsort((inside, d2[inside]))][:8]
            got = table.neighbors(q, s)
            assert np.array_equal(got, np.sort(keep))
            assert prev <= set(got.tolist())
            prev = set(got.tolist())


def test_backends_agree_on_tables(rng):
    if not _accel.HAVE_NUMBA:
        pytest.skip("numba not installed")
    coords = rng.normal(size=(700, 3))
    idx = build_index(PointCloud(coords), 0.9)
    out = {}
    for name in ("numba", "numpy"):
        prev = _accel.set_backend(name)
        try:
            out[name] = neighbor_table(idx, coords, (0.3, 0.6, 0.9), max_neighbors=20)
        finally:
            _accel.set_backend(prev)
    for field in ("ptr", "idx", "level", "counts"):
        assert np.array_equal(getattr(out["numba"], field), getattr(out["numpy"], field))


def test_worker_count_does_not_change_tables(backend, rng):
    coords = rng.normal(size=(9000, 3))
    idx = build_index(PointCloud(coords), 0.5)
    tables = []
    for n in (1, 4):
        _accel.set_workers(n)
        try:
            tables.append(neighbor_table(idx, coords, (0.25, 0.5)))
        finally:
            _accel.set_workers(1)
    assert np.array_equal(tables[0].idx, tables[1].idx)
    assert np.array_equal(tables[0].level, tables[1].level)


def test_fps_examples(backend):
    assert farthest_point_sample(LINE, 2).tolist() == [0, 2]
    assert farthest_point_sample(LINE, 3).tolist() == [0, 2, 1]
    assert sorted(farthest_point_sample(LINE, 3).tolist()) == [0, 1, 2]


def test_fps_k_out_of_range():
    for k in (0, 4):
        with pytest.raises(KOutOfRange):
            farthest_point_sample(LINE, k)


def test_fps_matches_greedy_oracle(backend, rng):
    for _ in range(5):
        coords = rng.uniform(size=(150, 3))
        seed = int(rng.integers(150))
        got = farthest_point_sample(PointCloud(coords), 40, seed_index=seed)
        assert got.tolist() == greedy_fps(coords, 40, seed)


def test_fps_ties_prefer_smallest_index(backend):
    cloud = PointCloud(np.array([[0.0, 0, 0], [1, 0, 0], [-1, 0, 0], [0, 1, 0]]))
    assert farthest_point_sample(cloud, 4).tolist() == [0, 1, 2, 3]


def test_fps_with_duplicates_never_repeats(backend):
    cloud = PointCloud(np.zeros((5, 3)))
    assert sorted(farthest_point_sample(cloud, 5).tolist()) == [0, 1, 2, 3, 4]


@given(st.integers(2, 200), st.integers(0, 2**31))
def test_fps_cover_property(n, seed):
    rng = np.random.default_rng(seed)
    coords = rng.normal(size=(n, 3))
    k = int(rng.integers(2, n + 1))
    sel, radius = farthest_point_sample(PointCloud(coords), k, return_radius=True)
    d = np.sqrt(((coords[:, None, :] - coords[sel][None, :, :]) ** 2).sum(-1)).min(axis=1)
    assert d.max() <= radius + 1e-12
    assert len(set(sel.tolist())) == k
