import numpy as np
import pytest

from mapforge import geometry as G
from mapforge import topology as T
from mapforge.geometry import PointCloud, Pose
from mapforge.register import IcpConfig
from mapforge.topology import Batch, TopologyConfig


def test_descriptor_self_distance_zero(small_dataset):
    d = T.scan_descriptor(small_dataset.clouds[0], 32)
    assert T.cosine_distance(d, d) < 1e-15
    assert np.linalg.norm(d) == pytest.approx(1.0)


def test_descriptor_permutation_invariant(small_dataset):
    cloud = small_dataset.clouds[1]
    rng = np.random.default_rng(0)
    perm = rng.permutation(len(cloud))
    shuffled = PointCloud(cloud.points[perm])
    assert np.array_equal(T.scan_descriptor(cloud, 32), T.scan_descriptor(shuffled, 32))


def test_descriptor_rotation_invariant(small_dataset):
    cloud = small_dataset.clouds[2]
    rotated = G.transform_cloud(Pose.se2(0, 0, np.radians(37.0)), cloud)
    a = T.scan_descriptor(cloud, 32)
    b = T.scan_descriptor(rotated, 32)
    assert np.allclose(a, b, atol=1e-12)


def test_oracle_topology_matches_brute_force(small_dataset):
    cfg = TopologyConfig(radius=2.0, k=4)
    graph = T.build_topology(small_dataset, small_dataset.gt_poses, cfg)
    pos = np.stack([p.translation for p in small_dataset.gt_poses])
    k = len(small_dataset)
    for i in range(k):
        for j in range(k):
            d = float(np.linalg.norm(pos[i] - pos[j]))
            w = graph.edge_weight(i, j)
            if i != j and d <= 2.0:
                assert w == pytest.approx(d)
            else:
                assert w is None


def test_topology_symmetry(small_dataset):
    cfg = TopologyConfig(source="descriptor", k=4, descriptor_threshold=0.05)
    graph = T.build_topology(small_dataset, None, cfg)
    for i in range(graph.num_frames):
        for j, w in graph.adjacency[i].items():
            assert graph.edge_weight(j, i) == w
            assert j != i
            assert w >= 0


def test_loop_closure_edge_exists(small_dataset):
    cfg = TopologyConfig(radius=1.0, k=4)
    graph = T.build_topology(small_dataset, small_dataset.gt_poses, cfg)
    k = graph.num_frames
    # brute-force check of the gt trajectory agrees with the graph
    pos = np.stack([p.translation for p in small_dataset.gt_poses])
    expect = any(
        np.linalg.norm(pos[i] - pos[j]) <= 1.0 and abs(i - j) > k / 4
        for i in range(k)
        for j in range(i + 1, k)
    )
    got = any(abs(i - j) > k / 4 for i, j, _ in graph.edges())
    assert expect and got


def test_organize_batches_shape(small_dataset):
    cfg = TopologyConfig(radius=2.0, k=4)
    graph = T.build_topology(small_dataset, small_dataset.gt_poses, cfg)
    batches = T.organize_batches(graph, cfg)
    assert len(batches) == len(small_dataset)
    anchors = [b.anchor for b in batches]
    assert anchors == list(range(len(small_dataset)))
    for b in batches:
        assert len(b.neighbors) == 4
        assert b.anchor not in b.neighbors
        assert len(set(b.neighbors)) == 4


def test_batch_neighbors_match_brute_force_sort(small_dataset):
    cfg = TopologyConfig(radius=3.0, k=4)
    graph = T.build_topology(small_dataset, small_dataset.gt_poses, cfg)
    batches = T.organize_batches(graph, cfg)
    for b in batches:
        adj = graph.adjacency[b.anchor]
        ranked = sorted(adj.items(), key=lambda jw: (jw[1], jw[0]))
        expected = [j for j, _ in ranked[:4]]
        if len(expected) == 4:
            assert b.neighbors == expected


def test_isolated_frame_pads_temporally():
    # sparse poses: nothing within radius
    clouds = [PointCloud(np.random.default_rng(i).normal(size=(10, 2))) for i in range(6)]
    poses = [Pose.se2(10.0 * i, 0, 0) for i in range(6)]
    import types

    ds = types.SimpleNamespace(clouds=clouds)
    cfg = TopologyConfig(radius=0.5, k=3)
    graph = T.build_topology(ds, poses, cfg)
    assert graph.isolated_nodes() == list(range(6))
    batches = T.organize_batches(graph, cfg)
    assert batches[0].neighbors == [1, 2, 3]
    assert batches[3].neighbors == [2, 4, 1]
    assert batches[5].neighbors == [4, 3, 2]


def test_temporal_batches_never_contain_loop_closures(small_dataset):
    k = len(small_dataset)
    batches = T.temporal_batches(k, 4)
    assert all(abs(b.anchor - j) <= k / 4 for b in batches for j in b.neighbors)


def test_union_of_batches_covers_all_frames(small_dataset):
    cfg = TopologyConfig(radius=2.0, k=4)
    graph = T.build_topology(small_dataset, small_dataset.gt_poses, cfg)
    batches = T.organize_batches(graph, cfg)
    members = set()
    for b in batches:
        members.add(b.anchor)
        members.update(b.neighbors)
    assert members == set(range(len(small_dataset)))


def test_oracle_neighbors_within_radius_or_pad(small_dataset):
    cfg = TopologyConfig(radius=2.0, k=4)
    graph = T.build_topology(small_dataset, small_dataset.gt_poses, cfg)
    batches = T.organize_batches(graph, cfg)
    pos = np.stack([p.translation for p in small_dataset.gt_poses])
    for b in batches:
        graph_nbrs = set(graph.adjacency[b.anchor])
        for j in b.neighbors:
            in_radius = np.linalg.norm(pos[b.anchor] - pos[j]) <= 2.0
            assert in_radius or j not in graph_nbrs


def test_batch_validation():
    with pytest.raises(ValueError):
        Batch(anchor=0, neighbors=[0, 1])
    with pytest.raises(ValueError):
        Batch(anchor=0, neighbors=[1, 1])
    with pytest.raises(ValueError):
        Batch(anchor=0, neighbors=[1, 2], pairwise=[Pose.identity()])


def _shared_landmark_dataset(num_frames=10):
    """Every frame observes the same world points: exact correspondences
    exist, so pairwise registration can recover transforms to precision."""
    import types

    from mapforge import sim2d

    env = sim2d.default_scene()
    base = sim2d.generate_dataset(
        env,
        [Pose.se2(0, 0, 0), Pose.se2(0.1, 0, 0)],
        sim2d.ScanConfig(num_beams=256, max_range=12.0, range_noise_sigma=0.0, seed=2),
    )
    world = base.clouds[0]  # pose 0 is identity: local == world
    traj = sim2d.loop_trajectory(sim2d.default_loop(), num_frames, laps=1)
    clouds = [G.transform_cloud(G.inverse(p), world) for p in traj]
    return types.SimpleNamespace(clouds=clouds, gt_poses=traj)


def test_pairwise_transforms_consistency():
    """With gt init poses and noise-free scans, compose(gt_j, T_j_i) == gt_i."""
    ds = _shared_landmark_dataset(10)
    cfg = TopologyConfig(radius=4.0, k=2)
    graph = T.build_topology(ds, ds.gt_poses, cfg)
    batches = T.organize_batches(graph, cfg)
    filled = T.batch_pairwise_transforms(ds, batches, ds.gt_poses, IcpConfig())
    checked = 0
    for b in filled:
        for j, t_ji, low in zip(b.neighbors, b.pairwise, b.low_confidence):
            if low:
                continue
            lhs = G.compose(ds.gt_poses[j], t_ji)
            rhs = ds.gt_poses[b.anchor]
            err = np.linalg.norm(lhs.params()[:2] - rhs.params()[:2]) + abs(
                G.wrap_angle(lhs.theta - rhs.theta)
            )
            assert err < 1e-3
            checked += 1
    assert checked > 10


def test_pairwise_transforms_on_raycast_scans(clean_dataset):
    """Independently raycast neighbors: accuracy is sampling-limited, so the
    bound reflects the beam spacing rather than machine precision."""
    cfg = TopologyConfig(radius=2.0, k=2)
    graph = T.build_topology(clean_dataset, clean_dataset.gt_poses, cfg)
    batches = T.organize_batches(graph, cfg)
    filled = T.batch_pairwise_transforms(clean_dataset, batches, clean_dataset.gt_poses, IcpConfig())
    errs = []
    for b in filled:
        for j, t_ji, low in zip(b.neighbors, b.pairwise, b.low_confidence):
            if low:
                continue
            lhs = G.compose(clean_dataset.gt_poses[j], t_ji)
            rhs = clean_dataset.gt_poses[b.anchor]
            errs.append(
                np.linalg.norm(lhs.params()[:2] - rhs.params()[:2])
                + abs(G.wrap_angle(lhs.theta - rhs.theta))
            )
    assert len(errs) > 10
    assert np.median(errs) < 0.1


def test_pairwise_fallback_is_init_relative():
    rng = np.random.default_rng(2)
    import types

    # two overlapping frames plus one far-away frame that cannot register
    base = rng.normal(size=(30, 2))
    clouds = [PointCloud(base), PointCloud(base + 0.05), PointCloud(base + 500.0)]
    init = [Pose.se2(0, 0, 0), Pose.se2(0.05, 0.05, 0), Pose.se2(500, 500, 0)]
    ds = types.SimpleNamespace(clouds=clouds)
    batches = [Batch(anchor=0, neighbors=[1, 2])]
    filled = T.batch_pairwise_transforms(ds, batches, init, IcpConfig())
    b = filled[0]
    assert b.low_confidence == [False, True]
    expected = G.relative(init[2], init[0])
    assert np.array_equal(b.pairwise[1].params(), expected.params())


def test_pairwise_transforms_threaded_identical(clean_dataset):
    cfg = TopologyConfig(radius=2.0, k=2)
    graph = T.build_topology(clean_dataset, clean_dataset.gt_poses, cfg)
    batches = T.organize_batches(graph, cfg)
    serial = T.batch_pairwise_transforms(clean_dataset, batches, clean_dataset.gt_poses, IcpConfig(), threads=1)
    threaded = T.batch_pairwise_transforms(clean_dataset, batches, clean_dataset.gt_poses, IcpConfig(), threads=3)
    for a, b in zip(serial, threaded):
        assert a.low_confidence == b.low_confidence
        for ta, tb in zip(a.pairwise, b.pairwise):
            assert np.array_equal(ta.params(), tb.params())


def test_topology_csv_roundtrip(tmp_path, small_dataset):
    cfg = TopologyConfig(radius=2.0, k=3)
    graph = T.build_topology(small_dataset, small_dataset.gt_poses, cfg)
    batches = T.organize_batches(graph, cfg)
    for b in batches:
        b.pairwise = [Pose.se2(0.1 * j, -0.2, 0.01) for j in b.neighbors]
        b.low_confidence = [False] * len(b.neighbors)
    T.save_topology(graph, tmp_path / "topology.csv")
    T.save_batches(batches, tmp_path / "batches.csv")
    T.save_pairwise(batches, tmp_path / "pairwise.csv")
    back = T.load_batches(tmp_path / "batches.csv", tmp_path / "pairwise.csv")
    assert len(back) == len(batches)
    for a, b in zip(batches, back):
        assert a.anchor == b.anchor
        assert a.neighbors == b.neighbors
        for ta, tb in zip(a.pairwise, b.pairwise):
            assert np.array_equal(ta.params(), tb.params())


def test_config_validation():
    with pytest.raises(ValueError):
        TopologyConfig(source="gps")
    with pytest.raises(ValueError):
        TopologyConfig(k=0)
    with pytest.raises(ValueError):
        TopologyConfig(descriptor_bins=2)
    with pytest.raises(ValueError):
        T.organize_batches(
            T.TopologyGraph(num_frames=3, adjacency=[{}, {}, {}]), TopologyConfig(k=8)
        )
