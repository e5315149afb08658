"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The heavy fixtures (reference dataset, warm start, and the 3-seed training
runs per configuration) are module-scoped and shared across criteria, so
the suite performs 12 full training runs total. Run with `-s` to watch the
per-criterion lines stream.
"""

import os
import time
import types
import warnings

import numpy as np
import pytest

from mapforge import geometry as G
from mapforge import losses, nets, register, sim2d, topology
from mapforge._rng import keyed_rng
from mapforge.geometry import PointCloud, Pose
from mapforge.engine import train as TR
from mapforge.engine.evaluate import ate
from mapforge.engine.reference import reference_config, reference_dataset


def report(criterion: int, ok: bool, detail: str) -> None:
    print(f"\n[criterion {criterion:2d}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, f"criterion {criterion}: {detail}"


# ---------------------------------------------------------------------------
# shared heavy fixtures


@pytest.fixture(scope="module")
def ref():
    dataset = reference_dataset()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        init = register.incremental_warm_start(dataset, reference_config().icp_config())
    warm = ate(init, dataset.gt_poses)
    return types.SimpleNamespace(dataset=dataset, init=init, warm=warm)


def _run_set(ref, seeds=(0, 1, 2), **overrides):
    finals, curves = [], []
    for seed in seeds:
        cfg = reference_config(seed)
        for key, val in overrides.items():
            setattr(cfg, key, val)
        result = TR.run_training(ref.dataset, ref.init, cfg)
        rep = ate(result.poses, ref.dataset.gt_poses)
        finals.append(rep.t_ate)
        curves.append([row[1] for row in result.ate_curve])
    return types.SimpleNamespace(finals=finals, curves=curves, median=float(np.median(finals)))


@pytest.fixture(scope="module")
def full_runs(ref):
    t0 = time.time()
    runs = _run_set(ref)
    runs.elapsed = time.time() - t0
    return runs


@pytest.fixture(scope="module")
def nocons_runs(ref):
    return _run_set(ref, use_consistency=False)


@pytest.fixture(scope="module")
def dmonly_runs(ref):
    return _run_set(ref, use_consistency=False, use_batch_org=False)


@pytest.fixture(scope="module")
def descriptor_runs(ref):
    return _run_set(ref, topology_source="descriptor")


# ---------------------------------------------------------------------------
# criterion 1: gradient fidelity on the 4-frame toy problem


def _toy_problem():
    rng = np.random.default_rng(0)
    frames = 4
    pts = [rng.uniform(-2.0, 2.0, size=(20, 2)) for _ in range(frames)]
    clouds = [PointCloud(p) for p in pts]
    init_poses = [Pose.se2(0.1 * i, -0.05 * i, 0.04 * i) for i in range(frames)]
    warm, local_pts, origins, inputs = TR._prepare_frames(
        types.SimpleNamespace(clouds=clouds), init_poses
    )
    batches, pairwise = [], []
    for i in range(frames):
        nbrs = [(i + 1) % frames, (i + 2) % frames]
        batches.append(topology.Batch(anchor=i, neighbors=nbrs))
        pairwise.append(
            [
                G.relative(init_poses[j], init_poses[i]).params() + rng.normal(0, 0.01, 3)
                for j in nbrs
            ]
        )
    prep = TR._Prep(
        warm=warm, local_pts=local_pts, origins=origins, inputs=inputs,
        batches=batches, pairwise=pairwise,
    )
    lspec = nets.LNetSpec(nets.MlpSpec((2, 8, 16)), nets.MlpSpec((16, 8, 3)))
    lnet = nets.init_params(lspec, 7, "lnet")
    mnet = nets.init_params(nets.default_mnet_spec((2, 16, 16, 1)), 7, "mnet")
    fractions = {f: TR._free_fractions(5, 0, f, pts[f].shape[0], 2) for f in range(frames)}
    return prep, lnet, mnet, fractions


def _toy_total(prep, lnet_values, mnet_values, lnet_ref, mnet_ref, weights, fractions):
    ln = nets.NetParams(lnet_values, lnet_ref.spec, "lnet")
    mn = nets.NetParams(mnet_values, mnet_ref.spec, "mnet")
    total = 0.0
    for bi, batch in enumerate(prep.batches):
        terms, _, _, _ = TR.batch_forward_backward(
            ln, mn, batch, prep.pairwise[bi], prep, fractions, *weights
        )
        total += terms.total
    return total / len(prep.batches)


def test_criterion_1_gradient_fidelity():
    t0 = time.time()
    prep, lnet, mnet, fractions = _toy_problem()
    h = 1e-6
    worst = 0.0
    for name, weights in [
        ("occupancy", (1.0, 0.0, 0.0)),
        ("chamfer", (0.0, 1.0, 0.0)),
        ("consistency", (0.0, 0.0, 1.0)),
        ("total", (1.0, 0.1, 1.0)),
    ]:
        d_lnet = np.zeros_like(lnet.values)
        d_mnet = np.zeros_like(mnet.values)
        for bi, batch in enumerate(prep.batches):
            _, gl, gm, _ = TR.batch_forward_backward(
                lnet, mnet, batch, prep.pairwise[bi], prep, fractions, *weights
            )
            d_lnet += gl / len(prep.batches)
            d_mnet += gm / len(prep.batches)
        for vec, grad, which in ((lnet.values, d_lnet, "lnet"), (mnet.values, d_mnet, "mnet")):
            for i in range(vec.size):
                vp, vm = vec.copy(), vec.copy()
                vp[i] += h
                vm[i] -= h
                if which == "lnet":
                    fp = _toy_total(prep, vp, mnet.values, lnet, mnet, weights, fractions)
                    fm = _toy_total(prep, vm, mnet.values, lnet, mnet, weights, fractions)
                else:
                    fp = _toy_total(prep, lnet.values, vp, lnet, mnet, weights, fractions)
                    fm = _toy_total(prep, lnet.values, vm, lnet, mnet, weights, fractions)
                fd = (fp - fm) / (2.0 * h)
                rel = abs(grad[i] - fd) / max(abs(grad[i]), abs(fd), 1e-6)
                worst = max(worst, rel)
    elapsed = time.time() - t0
    report(
        1,
        worst < 1e-4 and elapsed < 10.0,
        f"max relative gradient error {worst:.2e} (< 1e-4), runtime {elapsed:.1f}s (< 10s)",
    )


# ---------------------------------------------------------------------------
# criterion 2: loss oracle equivalence


def test_criterion_2_loss_oracles():
    ok = True
    details = []

    err_bce = abs(losses.bce(0.5, 1) - np.log(2.0))
    ok &= err_bce < 1e-12 and abs(losses.bce(0.5, 0) - np.log(2.0)) < 1e-12
    details.append(f"bce(0.5)=ln2 err {err_bce:.1e}")

    rng = np.random.default_rng(1)
    worst_ch = 0.0
    for _ in range(100):
        x = rng.normal(size=(50, 2))
        y = rng.normal(size=(50, 2)) + rng.normal(scale=0.5, size=2)
        d = np.linalg.norm(x[:, None] - y[None, :], axis=2)
        brute = d.min(axis=1).mean() + d.min(axis=0).mean()
        worst_ch = max(worst_ch, abs(losses.chamfer(x, y) - brute))
    ok &= worst_ch < 1e-12
    details.append(f"chamfer vs brute force {worst_ch:.1e}")

    worst_cons = 0.0
    for trial in range(20):
        trng = np.random.default_rng(100 + trial)
        poses = [
            Pose.se2(*trng.uniform(-2, 2, 2), trng.uniform(-np.pi, np.pi)) for _ in range(4)
        ]
        clouds = [trng.normal(size=(6, 2)) for _ in range(4)]
        batches = []
        for i in range(4):
            nbrs = [(i + 1) % 4, (i + 2) % 4]
            batches.append(
                topology.Batch(
                    anchor=i,
                    neighbors=nbrs,
                    pairwise=[
                        Pose.se2(*trng.uniform(-1, 1, 2), trng.uniform(-1, 1)) for _ in nbrs
                    ],
                )
            )
        val = losses.consistency_loss(batches, poses, clouds)
        acc = 0.0
        for b in batches:
            inner = sum(
                losses.pose_inconsistency(
                    G.compose(poses[j], t), poses[b.anchor], clouds[b.anchor]
                )
                for j, t in zip(b.neighbors, b.pairwise)
            )
            acc += inner / len(b.neighbors)
        worst_cons = max(worst_cons, abs(val - acc / 4.0))
    ok &= worst_cons < 1e-12
    details.append(f"consistency vs double sum {worst_cons:.1e}")

    spec = nets.default_mnet_spec((2, 4, 1))
    half = nets.NetParams(np.zeros(spec.param_count()), spec, "mnet")
    clouds = [rng.normal(size=(7, 2)), rng.normal(size=(11, 2))]
    samples = [
        losses.sample_free_space(c, np.zeros(2), 2, keyed_rng(0, i))
        for i, c in enumerate(clouds)
    ]
    occ = losses.occupancy_loss(half, clouds, [np.zeros(2)] * 2, samples)
    err_occ = abs(occ - 2.0 * np.log(2.0))
    ok &= err_occ < 1e-12
    details.append(f"occupancy(0.5)=2ln2 err {err_occ:.1e}")

    report(2, bool(ok), "; ".join(details))


# ---------------------------------------------------------------------------
# criterion 3: exact consistency is zero


def test_criterion_3_exact_consistency_zero(ref):
    cfg = topology.TopologyConfig(radius=2.0, k=8)
    graph = topology.build_topology(ref.dataset, ref.dataset.gt_poses, cfg)
    batches = topology.organize_batches(graph, cfg)
    for b in batches:
        b.pairwise = [
            G.relative(ref.dataset.gt_poses[j], ref.dataset.gt_poses[b.anchor])
            for j in b.neighbors
        ]
    val = losses.consistency_loss(
        batches, ref.dataset.gt_poses, [c.points for c in ref.dataset.clouds]
    )
    report(3, val < 1e-9, f"consistency with derived pairwise transforms = {val:.2e} (< 1e-9)")


# ---------------------------------------------------------------------------
# criterion 4: ICP recovery


def test_criterion_4_icp_recovery():
    t0 = time.time()
    env = sim2d.default_scene()
    rng = np.random.default_rng(4)
    icp_cfg = register.IcpConfig()
    hits = 0
    trials = 100
    for trial in range(trials):
        while True:
            x = rng.uniform(-6.5, 6.5)
            y = rng.uniform(-3.5, 3.5)
            if not (-5.4 < x < -2.5 and -1.9 < y < 0.2) and not (
                2.5 < x < 4.7 and -0.4 < y < 2.3
            ):
                break
        pose = Pose.se2(x, y, rng.uniform(-np.pi, np.pi))
        scan_cfg = sim2d.ScanConfig(
            num_beams=256, max_range=12.0, range_noise_sigma=0.0, seed=trial
        )
        source = sim2d.simulate_scan(env, pose, scan_cfg, trial)
        angle = np.radians(rng.uniform(-10.0, 10.0))
        shift = rng.uniform(-0.5, 0.5, size=2)
        if np.linalg.norm(shift) > 0.5:
            shift *= 0.5 / np.linalg.norm(shift)
        true_rel = Pose.se2(shift[0], shift[1], angle)
        target = G.transform_cloud(true_rel, source)
        res = register.icp_pairwise(source, target, Pose.identity(), icp_cfg)
        err = np.linalg.norm(res.relative_pose.params() - true_rel.params())
        if res.converged and err < 1e-3:
            hits += 1
    elapsed = time.time() - t0
    report(
        4,
        hits >= 95 and elapsed < 30.0,
        f"recovered {hits}/100 within 1e-3 (>= 95), runtime {elapsed:.1f}s (< 30s)",
    )


# ---------------------------------------------------------------------------
# criterion 5: ATE correctness


def test_criterion_5_ate_correctness():
    rng = np.random.default_rng(5)
    gt = [
        Pose.se2(*rng.uniform(-4, 4, 2), rng.uniform(-np.pi, np.pi)) for _ in range(25)
    ]
    zero = ate(gt, gt)
    rigid = Pose.se2(1.0, -2.0, 0.8)
    moved = ate([G.compose(rigid, p) for p in gt], gt)
    noise = rng.normal(scale=0.03, size=(25, 2))
    est = [
        Pose.se2(p.translation[0] + n[0], p.translation[1] + n[1], p.theta)
        for p, n in zip(gt, noise)
    ]
    rep = ate(est, gt)
    resid = [
        np.linalg.norm(G.compose(rep.alignment, e).translation - p.translation)
        for e, p in zip(est, gt)
    ]
    oracle = float(np.sqrt(np.mean(np.square(resid))))
    ok = (
        zero.t_ate < 1e-12
        and zero.r_ate < 1e-12
        and moved.t_ate < 1e-9
        and moved.r_ate < 1e-9
        and abs(rep.t_ate - oracle) < 1e-9
    )
    report(
        5,
        ok,
        f"ate(gt,gt)=({zero.t_ate:.1e},{zero.r_ate:.1e}); rigid case "
        f"({moved.t_ate:.1e},{moved.r_ate:.1e}); noise vs RMSE oracle err "
        f"{abs(rep.t_ate - oracle):.1e}",
    )


# ---------------------------------------------------------------------------
# criterion 6: pipeline improvement over the warm start


def test_criterion_6_pipeline_improvement(ref, full_runs):
    threshold = 0.5 * ref.warm.t_ate
    ok = full_runs.median <= threshold and full_runs.elapsed < 600.0
    report(
        6,
        ok,
        f"median final T-ATE {full_runs.median:.4f} <= {threshold:.4f} "
        f"(warm {ref.warm.t_ate:.4f}); 3 runs took {full_runs.elapsed:.0f}s (< 600s)",
    )


# ---------------------------------------------------------------------------
# criterion 7: ablation ordering and convergence speed


def test_criterion_7_ablation_ordering(ref, full_runs, nocons_runs, dmonly_runs):
    ordering = full_runs.median <= nocons_runs.median <= dmonly_runs.median
    threshold = 0.5 * ref.warm.t_ate

    def epochs_to(curve):
        return next((i + 1 for i, v in enumerate(curve) if v <= threshold), len(curve) + 1)

    e_full = float(np.median([epochs_to(c) for c in full_runs.curves]))
    e_nocons = float(np.median([epochs_to(c) for c in nocons_runs.curves]))
    ok = ordering and e_full <= e_nocons
    report(
        7,
        ok,
        f"median T-ATE full {full_runs.median:.4f} <= +batch {nocons_runs.median:.4f} "
        f"<= base {dmonly_runs.median:.4f}; epochs-to-threshold full {e_full:.0f} "
        f"<= no-consistency {e_nocons:.0f}",
    )


# ---------------------------------------------------------------------------
# criterion 8: robustness to the topology source


def test_criterion_8_topology_robustness(full_runs, descriptor_runs):
    rel = abs(descriptor_runs.median - full_runs.median) / full_runs.median
    report(
        8,
        rel <= 0.25,
        f"descriptor topology median {descriptor_runs.median:.4f} vs oracle "
        f"{full_runs.median:.4f}: relative difference {rel:.1%} (<= 25%)",
    )


# ---------------------------------------------------------------------------
# criterion 9: bit-identical determinism


def test_criterion_9_determinism(ref, tmp_path):
    cfg_text = reference_config(3).to_text()
    outputs = []
    for name, threads in (("a", "1"), ("b", "1"), ("c", "2")):
        out = tmp_path / name
        old = os.environ.get("MAPFORGE_THREADS")
        os.environ["MAPFORGE_THREADS"] = threads
        try:
            cfg = TR.TrainConfig.from_text(cfg_text)
            cfg.epochs = 3
            TR.run_training(ref.dataset, ref.init, cfg, out_dir=str(out))
        finally:
            if old is None:
                os.environ.pop("MAPFORGE_THREADS", None)
            else:
                os.environ["MAPFORGE_THREADS"] = old
        outputs.append(
            (
                (out / "loss_history.csv").read_bytes(),
                (out / "poses_final.csv").read_bytes(),
            )
        )
    ok = outputs[0] == outputs[1] == outputs[2]
    report(
        9,
        ok,
        "loss_history.csv and poses_final.csv bit-identical across reruns "
        "and MAPFORGE_THREADS=2",
    )


# ---------------------------------------------------------------------------
# criterion 10: batch organization structure


def test_criterion_10_batch_structure(ref):
    k = len(ref.dataset)
    cfg = topology.TopologyConfig(radius=2.0, k=8)
    graph = topology.build_topology(ref.dataset, ref.init, cfg)
    spatial = topology.organize_batches(graph, cfg)
    spatial_long = sum(
        1 for b in spatial for j in b.neighbors if abs(b.anchor - j) > k / 4
    )
    temporal = topology.temporal_batches(k, 8)
    temporal_long = sum(
        1 for b in temporal for j in b.neighbors if abs(b.anchor - j) > k / 4
    )
    ok = spatial_long >= 1 and temporal_long == 0
    report(
        10,
        ok,
        f"spatial batching has {spatial_long} loop-closure pairs (>= 1); "
        f"temporal batching has {temporal_long} (== 0)",
    )
