import numpy as np
import pytest

from dynrecon.flow import FlowField, compute_flow, read_flow, write_flow
from dynrecon.geometry import CameraView
from dynrecon.sparse import (
    Cluster,
    SparseCloud,
    SparseCloudError,
    SparsePoint,
    TrackState,
    default_cluster_distance,
    flood_fill_cluster,
    label_dynamic,
    member_pixels,
    remove_outliers,
    select_best_view,
)


def cloud_from_positions(positions, observations=None):
    points = []
    for i, pos in enumerate(np.asarray(positions, dtype=float)):
        obs = observations[i] if observations is not None else {0: (1.0, 1.0), 1: (2.0, 2.0)}
        points.append(SparsePoint(position=pos, observations=dict(obs)))
    return SparseCloud(points=points)


def brute_outlier_filter(positions, k, alpha):
    positions = np.asarray(positions, dtype=float)
    n = len(positions)
    stats = np.empty(n)
    for i in range(n):
        d = np.linalg.norm(positions - positions[i], axis=1)
        stats[i] = np.sort(d)[1 : k + 1].mean()
    return stats <= stats.mean() + alpha * stats.std()


def brute_connected_components(positions, threshold):
    positions = np.asarray(positions, dtype=float)
    n = len(positions)
    adj = np.linalg.norm(positions[:, None] - positions[None, :], axis=2) <= threshold
    comp = -np.ones(n, dtype=int)
    c = 0
    for seed in range(n):
        if comp[seed] >= 0:
            continue
        stack = [seed]
        comp[seed] = c
        while stack:
            i = stack.pop()
            for j in np.flatnonzero(adj[i]):
                if comp[j] < 0:
                    comp[j] = c
                    stack.append(j)
        c += 1
    return comp


class TestRemoveOutliers:
    def test_grid_plus_far_point(self):
        grid = np.array([[x, y, z] for x in range(3) for y in range(3) for z in range(3)], float)
        positions = np.vstack([grid, [[100.0, 0.0, 0.0]]])
        cloud = cloud_from_positions(positions)
        cleaned = remove_outliers(cloud, k=4, alpha=1.0)
        assert len(cleaned) == 27
        assert np.linalg.norm(cleaned.positions, axis=1).max() < 10

    def test_uniform_grid_keeps_everything(self):
        grid = np.array([[x, y, 0.0] for x in range(5) for y in range(5)], float)
        cloud = cloud_from_positions(grid)
        assert len(remove_outliers(cloud, k=3, alpha=1.0)) == 25

    def test_too_small_cloud_raises(self):
        cloud = cloud_from_positions(np.zeros((4, 3)))
        with pytest.raises(SparseCloudError):
            remove_outliers(cloud, k=4, alpha=1.0)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(10)
        for _ in range(40):
            n = int(rng.integers(10, 201))
            positions = rng.normal(size=(n, 3)) * rng.uniform(0.5, 3)
            k = int(rng.integers(2, min(8, n - 1)))
            alpha = float(rng.uniform(0.3, 2.0))
            cloud = cloud_from_positions(positions)
            cleaned = remove_outliers(cloud, k, alpha)
            keep = brute_outlier_filter(positions, k, alpha)
            assert len(cleaned) == keep.sum()
            assert np.allclose(cleaned.positions, positions[keep])


class TestFloodFill:
    def test_two_separated_blobs(self):
        rng = np.random.default_rng(1)
        blob_a = rng.normal(scale=0.1, size=(10, 3))
        blob_b = rng.normal(scale=0.1, size=(10, 3)) + [5.0, 0, 0]
        cloud = cloud_from_positions(np.vstack([blob_a, blob_b]))
        clusters = flood_fill_cluster(cloud, dist_threshold=1.0, min_size=2)
        assert len(clusters) == 2
        sizes = sorted(len(c.members) for c in clusters)
        assert sizes == [10, 10]

    def test_chain_is_one_cluster(self):
        positions = np.array([[0.9 * i, 0.0, 0.0] for i in range(12)])
        cloud = cloud_from_positions(positions)
        clusters = flood_fill_cluster(cloud, dist_threshold=1.0, min_size=2)
        assert len(clusters) == 1
        assert len(clusters[0].members) == 12

    def test_min_size_discards_small_clusters(self):
        positions = np.array([[0, 0, 0], [0.5, 0, 0], [50, 0, 0], [50.5, 0, 0], [51, 0, 0]], float)
        clusters = flood_fill_cluster(cloud_from_positions(positions), 1.0, min_size=3)
        assert len(clusters) == 1
        assert list(clusters[0].members) == [2, 3, 4]

    def test_requires_positive_threshold(self):
        with pytest.raises(ValueError):
            flood_fill_cluster(cloud_from_positions(np.zeros((3, 3))), 0.0, 1)

    def test_matches_brute_force_components(self):
        rng = np.random.default_rng(2)
        for _ in range(40):
            n = int(rng.integers(5, 201))
            positions = rng.uniform(0, 4, size=(n, 3))
            threshold = float(rng.uniform(0.3, 1.5))
            cloud = cloud_from_positions(positions)
            clusters = flood_fill_cluster(cloud, threshold, min_size=1)
            comp = brute_connected_components(positions, threshold)
            expected = {}
            for i, c in enumerate(comp):
                expected.setdefault(c, []).append(i)
            expected_sets = {frozenset(v) for v in expected.values()}
            got_sets = {frozenset(c.members.tolist()) for c in clusters}
            assert got_sets == expected_sets

    def test_partition_property(self):
        rng = np.random.default_rng(3)
        positions = rng.uniform(0, 3, size=(120, 3))
        cloud = cloud_from_positions(positions)
        clusters = flood_fill_cluster(cloud, 0.7, min_size=1)
        seen = np.concatenate([c.members for c in clusters])
        assert sorted(seen.tolist()) == list(range(120))

    def test_default_distance_is_twice_median_nn(self):
        positions = np.array([[0, 0, 0], [1, 0, 0], [2.2, 0, 0], [3.1, 0, 0]], float)
        cloud = cloud_from_positions(positions)
        nn = [1.0, 1.0, 0.9, 0.9]
        assert default_cluster_distance(cloud) == pytest.approx(2 * np.median(nn))


class TestSelectBestView:
    def make_cameras(self, n=3):
        K = np.array([[100.0, 0, 50], [0, 100.0, 50], [0, 0, 1]])
        return {
            i: CameraView(K=K, R=np.eye(3), t=np.zeros(3), width=101, height=101)
            for i in range(n)
        }

    def test_counting(self):
        obs = [{0: (1, 1), 1: (1, 1)} for _ in range(10)] + [{1: (1, 1), 2: (1, 1)} for _ in range(7)]
        # camera 0 sees 10 members, camera 1 sees 17, camera 2 sees 7
        cloud = cloud_from_positions(np.zeros((17, 3)), obs)
        cluster = Cluster(members=np.arange(17))
        assert select_best_view(cluster, cloud, self.make_cameras()) == 1

    def test_tie_goes_to_lowest_id(self):
        obs = [{0: (1, 1), 1: (1, 1)} for _ in range(5)]
        cloud = cloud_from_positions(np.zeros((5, 3)), obs)
        cluster = Cluster(members=np.arange(5))
        assert select_best_view(cluster, cloud, self.make_cameras()) == 0

    def test_single_point_single_camera(self):
        obs = [{2: (1, 1), 1: (3, 3)}]
        cloud = cloud_from_positions(np.zeros((1, 3)), obs)
        cluster = Cluster(members=np.array([0]))
        cams = self.make_cameras()
        only_cam2 = {2: cams[2]}
        assert select_best_view(cluster, cloud, only_cam2) == 2


def constant_flow(shape, du, dv, valid=True):
    h, w = shape
    return FlowField(
        u=np.full((h, w), float(du)),
        v=np.full((h, w), float(dv)),
        valid=np.full((h, w), valid, dtype=bool),
    )


def tracked_cloud(n, base=(10.0, 10.0), spread=8.0, view=0, seed=0):
    rng = np.random.default_rng(seed)
    pix = np.asarray(base) + rng.uniform(0, spread, size=(n, 2))
    obs = [{view: tuple(p), view + 1: tuple(p)} for p in pix]
    positions = rng.normal(size=(n, 3))
    return cloud_from_positions(positions, obs), pix


class TestLabelDynamic:
    def test_new_cluster_with_motion_is_dynamic(self):
        cloud, _ = tracked_cloud(6)
        clusters = [Cluster(members=np.arange(6), best_view=0)]
        out = label_dynamic(
            clusters, cloud, {0: None}, {0: constant_flow((40, 40), 5.0, 0.0)}
        )
        assert out.clusters[0].dynamic
        assert not out.clusters[0].reuse_previous
        assert out.clusters[0].label == 0

    def test_new_cluster_without_motion_is_static(self):
        cloud, _ = tracked_cloud(6)
        clusters = [Cluster(members=np.arange(6), best_view=0)]
        out = label_dynamic(clusters, cloud, {0: None}, {0: constant_flow((40, 40), 0.2, 0.0)})
        assert not out.clusters[0].dynamic

    def test_missing_flow_counts_as_static(self):
        cloud, _ = tracked_cloud(6)
        clusters = [Cluster(members=np.arange(6), best_view=0)]
        out = label_dynamic(clusters, cloud, {0: None}, {0: None})
        assert not out.clusters[0].dynamic

    def test_tracked_static_cluster_sets_reuse(self):
        cloud, pix = tracked_cloud(8)
        prev = TrackState(pixels={4: pix.copy()}, views={4: 0}, next_label=5)
        clusters = [Cluster(members=np.arange(8), best_view=0)]
        out = label_dynamic(
            clusters, cloud, {0: constant_flow((40, 40), 0.0, 0.0)}, {0: None}, prev
        )
        assert out.clusters[0].label == 4
        assert not out.clusters[0].dynamic
        assert out.clusters[0].reuse_previous

    def test_tracked_moving_cluster_keeps_id_and_is_dynamic(self):
        cloud, pix = tracked_cloud(8)
        # previous members sat 5 px left of current; flow advects them onto us
        prev = TrackState(pixels={2: pix - [5.0, 0.0]}, views={2: 0}, next_label=3)
        out = label_dynamic(
            [Cluster(members=np.arange(8), best_view=0)],
            cloud,
            {0: constant_flow((40, 40), 5.0, 0.0)},
            {0: None},
            prev,
        )
        assert out.clusters[0].label == 2
        assert out.clusters[0].dynamic
        assert not out.clusters[0].reuse_previous

    def test_overlap_matching_prefers_larger_overlap(self):
        cloud_a, pix_a = tracked_cloud(10, base=(5.0, 5.0), seed=1)
        cloud_b, pix_b = tracked_cloud(10, base=(25.0, 25.0), seed=2)
        cloud = SparseCloud(points=cloud_a.points + cloud_b.points)
        clusters = [
            Cluster(members=np.arange(10), best_view=0),
            Cluster(members=np.arange(10, 20), best_view=0),
        ]
        # 90% of previous label-7 members advect onto the second cluster
        prev_pix = np.vstack([pix_b[:9], [[0.0, 0.0]]])
        prev = TrackState(pixels={7: prev_pix}, views={7: 0}, next_label=8)
        out = label_dynamic(
            clusters, cloud, {0: constant_flow((64, 64), 0.0, 0.0)}, {0: None}, prev
        )
        assert out.clusters[1].label == 7
        assert out.clusters[0].label == 8  # fresh id for the unmatched cluster

    def test_persistent_ids_injective(self):
        cloud_a, pix_a = tracked_cloud(10, base=(5.0, 5.0), seed=3)
        cloud_b, pix_b = tracked_cloud(10, base=(8.0, 8.0), seed=4)
        cloud = SparseCloud(points=cloud_a.points + cloud_b.points)
        clusters = [
            Cluster(members=np.arange(10), best_view=0),
            Cluster(members=np.arange(10, 20), best_view=0),
        ]
        prev = TrackState(pixels={0: pix_a, 1: pix_b}, views={0: 0, 1: 0}, next_label=2)
        out = label_dynamic(
            clusters, cloud, {0: constant_flow((64, 64), 0.0, 0.0)}, {0: None}, prev
        )
        labels = [c.label for c in out.clusters]
        assert len(set(labels)) == len(labels)

    def test_deterministic(self):
        cloud, pix = tracked_cloud(8, seed=5)
        clusters = [Cluster(members=np.arange(8), best_view=0)]
        prev = TrackState(pixels={1: pix}, views={1: 0}, next_label=2)
        flows = ({0: constant_flow((40, 40), 0.0, 0.0)}, {0: None})
        a = label_dynamic(clusters, cloud, flows[0], flows[1], prev)
        b = label_dynamic(clusters, cloud, flows[0], flows[1], prev)
        assert [c.label for c in a.clusters] == [c.label for c in b.clusters]
        assert [c.dynamic for c in a.clusters] == [c.dynamic for c in b.clusters]

    def test_invalid_flow_members_ignored(self):
        cloud, pix = tracked_cloud(6, seed=6)
        field = constant_flow((40, 40), 9.0, 0.0)
        field.valid[:, :] = False  # nothing usable: cluster counts as static
        out = label_dynamic(
            [Cluster(members=np.arange(6), best_view=0)], cloud, {0: None}, {0: field}
        )
        assert not out.clusters[0].dynamic


class TestSparseCloudValidation:
    def test_rejects_single_observation(self):
        cams = TestSelectBestView().make_cameras()
        cloud = SparseCloud(points=[SparsePoint(np.zeros(3), {0: (1.0, 1.0)})])
        with pytest.raises(SparseCloudError):
            cloud.validate(cams)

    def test_rejects_out_of_bounds_pixel(self):
        cams = TestSelectBestView().make_cameras()
        cloud = SparseCloud(
            points=[SparsePoint(np.zeros(3), {0: (1.0, 1.0), 1: (500.0, 1.0)})]
        )
        with pytest.raises(SparseCloudError):
            cloud.validate(cams)

    def test_member_pixels_filters_by_view(self):
        cloud = cloud_from_positions(
            np.zeros((3, 3)), [{0: (1, 2), 1: (3, 4)}, {1: (5, 6), 2: (0, 0)}, {0: (7, 8), 1: (9, 9)}]
        )
        cluster = Cluster(members=np.array([0, 1, 2]))
        idx, pix = member_pixels(cluster, cloud, 0)
        assert idx.tolist() == [0, 2]
        assert pix.tolist() == [[1, 2], [7, 8]]


class TestComputeFlow:
    def textured(self, shape=(48, 48), seed=0):
        return np.random.default_rng(seed).uniform(0, 255, shape)

    def test_identical_images_zero_flow(self):
        img = self.textured()
        field = compute_flow(img, img, block=7, search=5)
        assert field.valid.any()
        assert np.all(field.u[field.valid] == 0)
        assert np.all(field.v[field.valid] == 0)

    def test_translation_recovered_on_interior(self):
        img = self.textured()
        shifted = np.roll(img, 3, axis=1)
        field = compute_flow(img, shifted, block=7, search=5)
        assert field.valid.any()
        assert np.all(field.u[field.valid] == 3)
        assert np.all(field.v[field.valid] == 0)

    def test_flat_images_nothing_valid(self):
        img = np.full((32, 32), 128.0)
        field = compute_flow(img, img, block=7, search=4)
        assert not field.valid.any()

    def test_dimension_mismatch_raises(self):
        with pytest.raises(ValueError):
            compute_flow(np.zeros((10, 10)), np.zeros((12, 10)))

    def test_file_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        field = FlowField(
            u=rng.normal(size=(6, 5)),
            v=rng.normal(size=(6, 5)),
            valid=rng.uniform(size=(6, 5)) > 0.4,
        )
        path = tmp_path / "f.flo-txt"
        write_flow(field, path)
        back = read_flow(path)
        assert np.array_equal(back.u, field.u)
        assert np.array_equal(back.v, field.v)
        assert np.array_equal(back.valid, field.valid)

    def test_sample_outside_is_invalid(self):
        field = constant_flow((8, 8), 1.0, 0.0)
        disp, ok = field.sample(np.array([[2.0, 2.0], [20.0, 2.0]]))
        assert ok.tolist() == [True, False]
        assert disp[0].tolist() == [1.0, 0.0]
