import numpy as np
import pytest
from hypothesis import given, strategies as st

from radarsparse.boxes import OBB
from radarsparse.points import (
    NeighborIndex, ParseError, PointCloud, SceneSpec, augment_rcs, brute_force_neighbors,
    load_points_csv, radius_neighbors, radius_neighbors_batch, save_points_csv, synth_scene,
)


def test_point_cloud_is_read_only():
    c = PointCloud.from_points([(1.0, 2.0, -3.5, 12.0)])
    with pytest.raises(ValueError):
        c.data[0, 0] = 5.0
    assert c[0].vr == -3.5


def test_point_cloud_rejects_non_finite_and_bad_frames():
    with pytest.raises(ValueError):
        PointCloud.from_points([(np.nan, 0, 0, 0)])
    with pytest.raises(ValueError):
        PointCloud.from_points([], frame_count=0)


def test_neighbors_trivial():
    c = PointCloud.from_xy([(0, 0)])
    assert radius_neighbors(c, (0, 0), 1.5) == [0]
    c = PointCloud.from_xy([(0, 0), (2, 0)])
    assert radius_neighbors(c, (0, 0), 1.5) == [0]


def test_brute_force_empty_and_boundary():
    assert brute_force_neighbors(PointCloud.from_xy(np.zeros((0, 2))), (1, 1), 1.0) == []
    c = PointCloud.from_xy([(3.0, 4.0)])
    assert brute_force_neighbors(c, (0, 0), 5.0) == [0]
    assert radius_neighbors(c, (0, 0), 5.0) == [0]


def test_non_positive_radius_rejected():
    c = PointCloud.from_xy([(0, 0)])
    for r in (0.0, -1.0):
        with pytest.raises(ValueError):
            radius_neighbors(c, (0, 0), r)
        with pytest.raises(ValueError):
            brute_force_neighbors(c, (0, 0), r)


def test_neighbors_match_brute_force_fixture(rng):
    xy = rng.uniform(-10, 10, size=(200, 2))
    cloud = PointCloud.from_xy(xy)
    centers = rng.uniform(-10, 10, size=(50, 2))
    for c in centers:
        assert radius_neighbors(cloud, c, 3.75) == brute_force_neighbors(cloud, c, 3.75)


def test_batch_query_is_csr_of_single_queries(rng):
    xy = rng.uniform(-5, 5, size=(120, 2))
    centers = rng.uniform(-6, 6, size=(30, 2))
    ptr, idx = radius_neighbors_batch(xy, centers, 1.2)
    for m, c in enumerate(centers):
        assert idx[ptr[m]:ptr[m + 1]].tolist() == brute_force_neighbors(xy, c, 1.2)


def test_index_buckets_partition_points(rng):
    xy = rng.uniform(-3, 3, size=(80, 2))
    b = NeighborIndex(xy, 0.7).buckets()
    allidx = sorted(i for v in b.values() for i in v)
    assert allidx == list(range(80))


@given(st.lists(st.tuples(st.floats(-20, 20), st.floats(-20, 20)), max_size=60),
       st.tuples(st.floats(-20, 20), st.floats(-20, 20)), st.floats(0.1, 10))
def test_neighbors_property(pts, center, r):
    cloud = PointCloud.from_xy(np.array(pts, dtype=float).reshape(-1, 2))
    assert radius_neighbors(cloud, center, r) == brute_force_neighbors(cloud, center, r)


def test_augment_rcs_identity_and_determinism(rng):
    c = PointCloud.from_xy(rng.normal(size=(50, 2)), rcs=rng.normal(size=50))
    assert augment_rcs(c, 0.0, 1) == c
    assert augment_rcs(c, 0.7, 3) == augment_rcs(c, 0.7, 3)
    with pytest.raises(ValueError):
        augment_rcs(c, -0.1, 0)


def test_augment_rcs_statistics():
    c = PointCloud.from_xy(np.zeros((10_000, 2)), rcs=np.full(10_000, 5.0))
    out = augment_rcs(c, 0.7, seed=42)
    delta = out.rcs - c.rcs
    assert abs(delta.mean()) < 0.03
    assert abs(delta.std() - 0.7) < 0.03
    np.testing.assert_array_equal(out.xy, c.xy)
    np.testing.assert_array_equal(out.vr, c.vr)


def _scene(objects, clutter=0, ppo=20, seed=0, extent=(-60, 60, -60, 60)):
    return SceneSpec.from_dict({"objects": objects, "clutter_count": clutter,
                                "points_per_object": ppo, "seed": seed, "extent": list(extent)})


def test_synth_static_car():
    box = OBB(0.0, 0.0, 1.8, 4.5, 0.0)
    cloud, gt = synth_scene(_scene([{"box": [0, 0, 1.8, 4.5, 0.0], "class": "car"}]))
    assert len(cloud) == 20 and gt == [("car", box)]
    assert np.all(cloud.vr == 0)
    grown = OBB(0.0, 0.0, 1.8 + 0.2, 4.5 + 0.2, 0.0)
    assert all(grown.contains(p) for p in cloud.xy)


def test_synth_radial_velocity():
    cloud, _ = synth_scene(_scene([{"box": [20, 0, 1.8, 4.5, 0.0], "velocity": [10, 0]}]))
    expected = cloud.xy @ np.array([10.0, 0.0]) / np.hypot(cloud.xy[:, 0], cloud.xy[:, 1])
    np.testing.assert_allclose(cloud.vr, expected, rtol=1e-12)
    assert np.all(np.abs(cloud.vr - 10.0) < 0.1)


def test_synth_clutter_only_and_determinism():
    spec = _scene([], clutter=50, seed=5)
    cloud, gt = synth_scene(spec)
    assert len(cloud) == 50 and gt == []
    assert synth_scene(spec)[0] == cloud


def test_synth_points_near_perimeter(rng):
    spec = _scene([{"box": [5, -3, 2.0, 4.0, 0.7]}, {"box": [-8, 9, 0.8, 0.8, -2.0], "class": "vru"}], seed=9)
    cloud, gt = synth_scene(spec)
    for k, (_, box) in enumerate(gt):
        pts = cloud.xy[20 * k:20 * (k + 1)]
        corners = box.corners()
        for p in pts:
            d = min(_seg_dist(p, corners[i], corners[(i + 1) % 4]) for i in range(4))
            assert d <= 0.1


def _seg_dist(p, a, b):
    ab = b - a
    t = np.clip(np.dot(p - a, ab) / np.dot(ab, ab), 0, 1)
    return float(np.linalg.norm(p - (a + t * ab)))


def test_synth_rejects_object_outside_extent():
    with pytest.raises(ValueError):
        synth_scene(_scene([{"box": [59.5, 0, 1.8, 4.5, 0.0]}]))


def test_csv_single_row(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("frame,x,y,vr,rcs\n0,1.0,2.0,-3.5,12.0\n")
    c = load_points_csv(p)
    assert len(c) == 1 and c.frame_count == 1
    assert tuple(c[0]) == (1.0, 2.0, -3.5, 12.0)


def test_csv_seven_frames(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("frame,x,y,vr,rcs\n" + "".join(f"{f},0,0,0,0\n" for f in range(7)))
    assert load_points_csv(p).frame_count == 7


def test_csv_errors_name_row_and_column(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("frame,x,y,vr,rcs\n0,1.0,abc,0,0\n")
    with pytest.raises(ParseError) as e:
        load_points_csv(p)
    assert e.value.row == 1 and e.value.column == "y"
    assert "row 1" in str(e.value) and "'y'" in str(e.value)
    p.write_text("frame,x,y,rcs\n0,1,2,3\n")
    with pytest.raises(ParseError) as e:
        load_points_csv(p)
    assert e.value.column == "vr"
    p.write_text("")
    with pytest.raises(ParseError):
        load_points_csv(p)


def test_csv_header_only_is_empty_cloud(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("frame,x,y,vr,rcs\n")
    c = load_points_csv(p)
    assert len(c) == 0 and c.frame_count == 1


def test_csv_round_trip(tmp_path, rng):
    c = PointCloud(rng.normal(size=(25, 4)))
    p = tmp_path / "a.csv"
    save_points_csv(c, p)
    assert load_points_csv(p) == c
