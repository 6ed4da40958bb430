import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cityfields.data import FrameRecord, SceneBounds, load_dataset, look_at
from cityfields.losses import ConfigError
from cityfields.partition import (SHARD_DTYPE, assign_rays, kmeans_cells, read_partition, route_query,
                                  write_partition)


def test_single_cell_is_the_mean():
    x = np.random.default_rng(0).normal(size=(50, 3))
    assert np.allclose(kmeans_cells(x, 1), x.mean(0), atol=1e-12)


def test_two_separated_clusters():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(40, 3)) * 0.1
    b = rng.normal(size=(30, 3)) * 0.1 + [10, 0, 0]
    c = kmeans_cells(np.concatenate([a, b]), 2, seed=3)
    c = c[np.argsort(c[:, 0])]
    assert np.allclose(c[0], a.mean(0), atol=1e-6) and np.allclose(c[1], b.mean(0), atol=1e-6)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_lloyd_objective_never_increases(seed, k):
    x = np.random.default_rng(seed).uniform(-5, 5, size=(60, 3))
    _, history = kmeans_cells(x, k, seed, return_history=True)
    assert all(b <= a + 1e-9 for a, b in zip(history, history[1:]))


def test_kmeans_is_deterministic_and_validates():
    x = np.random.default_rng(2).normal(size=(30, 3))
    assert np.array_equal(kmeans_cells(x, 4, 7), kmeans_cells(x, 4, 7))
    with pytest.raises(ConfigError):
        kmeans_cells(x, 0)
    with pytest.raises(ConfigError):
        kmeans_cells(x[:2], 3)


def test_route_examples():
    c = np.array([[0, 0, 0], [5, 5, 5], [-1.0, 0, 0], [3, 3, 3], [7, 7, 7], [1.0, 0, 0]])
    assert route_query(c[3], c)[0] == 3
    assert route_query([0.0, 0, 0], c[[1, 1, 2, 4, 4, 5]])[0] == 2  # equidistant from cells 2 and 5


def test_route_matches_brute_force():
    rng = np.random.default_rng(4)
    c = rng.uniform(-1, 1, (7, 3))
    x = rng.uniform(-1.5, 1.5, (10_000, 3))
    got = route_query(x, c)
    for i in range(0, len(x), 97):
        d = [float(np.sum((x[i] - cc) ** 2)) for cc in c]
        assert got[i] == d.index(min(d))


def _frame(camera, depth=None):
    return FrameRecord(1, 1, camera, np.zeros((camera.height, camera.width, 3), np.float32), depth)


def test_pruning_definition_on_a_single_row():
    # cells split the box at x = 0; the camera sits in cell 0 looking down +x
    bounds = SceneBounds(np.array([-4.0, -1, -1]), np.array([4.0, 1, 1]))
    centroids = np.array([[-2.0, 0, 0], [2.0, 0, 0]])
    cam = look_at((-3.0, 0.0, 0.0), (3.0, 0.0, 0.0), 1, 1, 1.0)
    stops_inside_a = assign_rays([_frame(cam)], centroids, bounds, [np.array([[1.5]])])
    assert stops_inside_a.cells_of(0, 0, "frustum") == {0, 1}
    assert stops_inside_a.cells_of(0, 0) == {0}
    reaches_b = assign_rays([_frame(cam)], centroids, bounds, [np.array([[5.0]])])
    assert reaches_b.cells_of(0, 0) == {0, 1}
    no_depth = assign_rays([_frame(cam)], centroids, bounds, [None])
    assert no_depth.cells_of(0, 0) == {0, 1}


def test_pruned_subset_and_ray_march_oracle(tmp_path):
    from cityfields.synthetic import generate_synthetic, two_district_city

    scene, cams = two_district_city()
    cams = cams[::4]
    generate_synthetic(scene, 1, len(cams), [cams], tmp_path / "city", feature_dim=4, lidar_fraction=1.0)
    frames, bounds, _ = load_dataset(tmp_path / "city")
    centroids = kmeans_cells(np.array([f.camera.center for f in frames]), 2, 0)
    a = assign_rays(frames, centroids, bounds)
    assert a.pairs("pruned") < a.pairs("frustum")
    for i, f in enumerate(frames):
        assert not (a.pruned[i] & ~a.frustum[i]).any()
        removed = a.frustum[i] & ~a.pruned[i]
        rays = np.nonzero(removed.any(1))[0]
        o, d = f.camera.rays(f.camera.pixel_centers(rays))
        # march the analytic density densely and stop at optical depth ln 2
        ts = np.linspace(0, 12, 4097)
        pts = o[:, None] + d[:, None] * ts[None, :, None]
        sigma = scene.density(pts.reshape(-1, 3)).reshape(len(rays), -1)
        tau = np.cumsum(sigma * (ts[1] - ts[0]), 1)
        terminates = tau[:, -1] > np.log(2)
        first = np.argmax(tau > np.log(2), 1)
        stop = pts[np.arange(len(rays)), first]
        owner = route_query(stop, centroids)
        for j, r in enumerate(rays):
            if terminates[j]:
                assert not removed[r, owner[j]]


def test_partition_manifest_round_trip(tmp_path):
    bounds = SceneBounds(np.array([-4.0, -1, -1]), np.array([4.0, 1, 1]))
    cams = [look_at((x, 0.0, 0.0), (x + 1, 0.0, 0.0), 4, 3, 3.0) for x in (-3.0, 2.0)]
    frames = [_frame(c) for c in cams]
    centroids = np.array([[-2.0, 0, 0], [2.0, 0, 0]])
    a = assign_rays(frames, centroids, bounds, [None, None])
    write_partition(tmp_path, centroids, a, frames)
    manifest, c2, shards = read_partition(tmp_path)
    assert np.array_equal(c2, centroids)
    for k, s in enumerate(shards):
        assert s.dtype == SHARD_DTYPE
        assert np.array_equal(s, a.shard(k))
        assert manifest["cells"][k]["n_rays"] == len(s)
    assert (tmp_path / "cell_000.u32").stat().st_size == 8 * len(shards[0])
