import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import ndimage

from radarsparse.grid import (
    DenseGrid, GridSpec, SparseGrid, cells_as_points, from_dense, max_pool2, occupancy,
    point_to_cell, scatter_points, to_dense, voxel_pad, voxel_pad_with_map, voxel_unpool,
)
from radarsparse.points import PointCloud

from conftest import random_grid

PAPER = GridSpec(-60, 60, -60, 60, 0.5)


def test_spec_dimensions_and_validation():
    assert PAPER.shape == (240, 240)
    with pytest.raises(ValueError):
        GridSpec(0, 1, 0, 1, 0.3)
    with pytest.raises(ValueError):
        GridSpec(1, 0, 0, 1, 0.5)
    with pytest.raises(ValueError):
        GridSpec(0, 1, 0, 1, 0.0)


def test_point_to_cell():
    assert point_to_cell(PAPER, (0.3, -0.2)) == (120, 119)
    assert point_to_cell(PAPER, (-60, -60)) == (0, 0)
    assert point_to_cell(PAPER, (60, 0)) is None
    assert point_to_cell(PAPER, (0, 60)) is None
    assert point_to_cell(PAPER, (59.999999, 59.999999)) == (239, 239)


def test_scatter_points():
    spec = GridSpec(0, 4, 0, 4, 1.0)
    c = PointCloud.from_xy([(0.2, 0.3), (0.7, 0.9), (3.5, 0.5), (9, 9)])
    assert scatter_points(spec, c) == {(0, 0): [0, 1], (3, 0): [2]}
    assert scatter_points(spec, PointCloud.from_xy(np.zeros((0, 2)))) == {}


def test_scatter_matches_per_point_oracle(rng):
    spec = GridSpec(-10, 10, -10, 10, 0.5)
    xy = rng.uniform(-12, 12, size=(500, 2))
    mapping = scatter_points(spec, PointCloud.from_xy(xy))
    seen = []
    for cell, pts in mapping.items():
        for p in pts:
            assert point_to_cell(spec, xy[p]) == cell
            seen.append(p)
    expected = [p for p in range(500) if point_to_cell(spec, xy[p]) is not None]
    assert sorted(seen) == expected


def test_sparse_grid_validation():
    spec = GridSpec(0, 4, 0, 4, 1.0)
    with pytest.raises(ValueError):
        SparseGrid(spec, [(1, 0), (0, 0)], [[1.0], [2.0]])
    with pytest.raises(ValueError):
        SparseGrid(spec, [(0, 0), (0, 0)], [[1.0], [2.0]])
    with pytest.raises(ValueError):
        SparseGrid(spec, [(4, 0)], [[1.0]])
    with pytest.raises(ValueError):
        SparseGrid(spec, [(0, 0)], [[np.inf]])
    g = SparseGrid.from_cells(spec, [(1, 0), (0, 3)], [[1.0], [2.0]])
    assert g.indices.tolist() == [[0, 3], [1, 0]] and g.features[:, 0].tolist() == [2.0, 1.0]
    with pytest.raises(ValueError):
        g.features[0, 0] = 3.0


def test_dense_round_trip(rng):
    spec = GridSpec(0, 4, 0, 4, 1.0)
    g = SparseGrid(spec, [(2, 1)], [[1.0, 2.0]])
    d = to_dense(g)
    assert d.features.sum() == 3.0 and d.features[2, 1].tolist() == [1.0, 2.0]
    g = random_grid(rng, density=0.3)
    back = from_dense(to_dense(g))
    assert back.same_active(g) and np.array_equal(back.features, g.features)
    assert len(from_dense(DenseGrid(spec, np.zeros((4, 4, 2))))) == 0
    with pytest.raises(ValueError):
        DenseGrid(spec, np.zeros((3, 4, 1)))


def test_voxel_pad_examples():
    spec = GridSpec(0, 8, 0, 8, 1.0)
    g = voxel_pad(SparseGrid(spec, [(3, 3)], [[7.0]]))
    assert len(g) == 9
    assert np.count_nonzero(g.features) == 1 and g.features[g.lookup([(3, 3)])[0], 0] == 7.0
    assert len(voxel_pad(SparseGrid(spec, [(0, 0)], [[1.0]]))) == 4


def _dilation_oracle(g):
    mask = np.zeros(g.spec.shape, dtype=bool)
    mask[g.indices[:, 0], g.indices[:, 1]] = True
    return set(map(tuple, np.argwhere(ndimage.binary_dilation(mask, np.ones((3, 3), bool))).tolist()))


def test_voxel_pad_equals_morphological_dilation(rng):
    g = random_grid(rng, 32, 32, density=0.1)
    gp, pad = voxel_pad_with_map(g)
    assert gp.active_set() == _dilation_oracle(g)
    np.testing.assert_array_equal(gp.features[pad.source_rows], g.features)


@given(st.integers(0, 2**32 - 1), st.floats(0.0, 0.6))
def test_voxel_pad_property(seed, density):
    g = random_grid(np.random.default_rng(seed), 12, 10, density=density, channels=1)
    assert voxel_pad(g).active_set() == _dilation_oracle(g)


def test_max_pool_examples():
    spec = GridSpec(0, 16, 0, 16, 1.0)
    p, _ = max_pool2(SparseGrid(spec, [(5, 7)], [[4.0, -1.0]]))
    assert p.indices.tolist() == [[2, 3]] and p.features.tolist() == [[4.0, -1.0]]
    assert p.spec.cell_size == 2.0 and p.spec.shape == (8, 8)
    p, _ = max_pool2(SparseGrid(spec, [(0, 0), (1, 1)], [[1.0], [3.0]]))
    assert p.indices.tolist() == [[0, 0]] and p.features.tolist() == [[3.0]]
    with pytest.raises(ValueError):
        max_pool2(SparseGrid.empty(GridSpec(0, 5, 0, 4, 1.0), 1))


def _dense_pool_oracle(g):
    d = np.full(g.spec.shape + (g.channels,), -np.inf)
    d[g.indices[:, 0], g.indices[:, 1]] = g.features
    nx, ny = g.spec.shape
    return d.reshape(nx // 2, 2, ny // 2, 2, -1).max(axis=(1, 3))


def test_max_pool_matches_dense_oracle(rng):
    for _ in range(20):
        g = random_grid(rng, 16, 12, density=rng.uniform(0.05, 0.8), channels=3)
        p, _ = max_pool2(g)
        ref = _dense_pool_oracle(g)
        occupied = np.argwhere(np.isfinite(ref[..., 0]))
        assert p.indices.tolist() == occupied.tolist()
        np.testing.assert_array_equal(p.features, ref[occupied[:, 0], occupied[:, 1]])


def test_unpool_examples_and_oracle(rng):
    spec = GridSpec(0, 4, 0, 4, 1.0)
    g = SparseGrid(spec, [(0, 0), (0, 1), (1, 1)], [[1.0], [2.0], [3.0]])
    p, prov = max_pool2(g)
    up = voxel_unpool(p.with_features(np.array([[5.0]])), prov)
    assert up.same_active(g) and up.features[:, 0].tolist() == [5.0, 5.0, 5.0]
    for _ in range(10):
        g = random_grid(rng, 16, 16, density=0.3, channels=2)
        p, prov = max_pool2(g)
        up = voxel_unpool(p, prov)
        assert up.same_active(g)
        d = to_dense(p).features.repeat(2, axis=0).repeat(2, axis=1)
        np.testing.assert_array_equal(up.features, d[g.indices[:, 0], g.indices[:, 1]])


def test_unpool_rejects_mismatch(rng):
    g = random_grid(rng, 16, 16, density=0.3)
    p, prov = max_pool2(g)
    p2, _ = max_pool2(p)
    with pytest.raises(ValueError):
        voxel_unpool(p2, prov)
    with pytest.raises(ValueError):
        voxel_unpool(SparseGrid(p.spec, p.indices[1:], p.features[1:]), prov)


def test_cells_as_points():
    g = SparseGrid(PAPER, [(120, 119)], [[1.0]])
    xy, f = cells_as_points(g)
    np.testing.assert_allclose(xy, [[0.25, -0.25]])
    xy, f = cells_as_points(SparseGrid.empty(PAPER, 3))
    assert xy.shape == (0, 2) and f.shape == (0, 3)


def test_cell_centers_round_trip(rng):
    g = random_grid(rng, 20, 20, density=0.3, cell_size=0.5, x_min=-5, y_min=-5)
    xy, _ = cells_as_points(g)
    assert [point_to_cell(g.spec, c) for c in xy] == [tuple(c) for c in g.indices.tolist()]


def test_occupancy_rows(rng):
    spec = GridSpec(0, 4, 0, 4, 1.0)
    occ = occupancy(spec, np.array([[0.5, 0.5], [5, 5], [0.1, 0.2], [3.2, 1.1]]))
    assert occ.indices.tolist() == [[0, 0], [3, 1]]
    assert occ.point_rows.tolist() == [0, -1, 0, 1]
