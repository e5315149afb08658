"""Training loop: batches of anchor+neighbor frames drive one optimizer
step each through the localization and occupancy nets.

The per-frame network inputs (warm-started global clouds recentered at
their centroids) are fixed for the whole run, so each step is: refine
poses for the batch frames, place the raw scans globally, evaluate the
weighted objective, and backpropagate through the pose composition into
both parameter vectors. All stochastic draws are keyed by (seed, epoch,
frame), which makes runs bit-reproducible and resumable.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .. import geometry, losses, nets, topology
from .._rng import STREAM_FREE_SPACE, STREAM_SHUFFLE, keyed_rng
from ..geometry import Pose
from ..losses import LossWeights
from ..nets import NetParams, OptimizerState
from ..register import IcpConfig
from ..sim2d import Dataset
from ..topology import TopologyConfig
from .evaluate import ate


class EngineError(RuntimeError):
    """A training stage failed; the message names the offending piece."""


def worker_count() -> int:
    """Worker cap from MAPFORGE_THREADS (default 1)."""
    try:
        return max(1, int(os.environ.get("MAPFORGE_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class TrainConfig:
    epochs: int = 50
    k: int = 8
    lambda_chamfer: float = 0.1
    lambda_consistency: float = 1.0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    topology_source: str = "oracle_radius"
    radius: float = 2.0
    descriptor_bins: int = 32
    descriptor_threshold: float = 0.15
    use_batch_org: bool = True
    use_consistency: bool = True
    use_chamfer: bool = True
    checkpoint_interval: int = 0  # epochs between checkpoints; 0 = final only
    n_per_ray: int = 2
    resample_free_space: bool = True
    lnet_trunk: tuple = (2, 64, 128)
    lnet_head: tuple = (128, 64, 3)
    mnet_widths: tuple = (2, 64, 64, 1)
    icp_max_iterations: int = 50
    icp_convergence_eps: float = 1e-5
    icp_max_correspondence_dist: float = 1.0
    icp_min_inliers: int = 10

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        self.lnet_trunk = tuple(int(w) for w in self.lnet_trunk)
        self.lnet_head = tuple(int(w) for w in self.lnet_head)
        self.mnet_widths = tuple(int(w) for w in self.mnet_widths)

    def weights(self) -> LossWeights:
        return LossWeights(chamfer=self.lambda_chamfer, consistency=self.lambda_consistency)

    def topology_config(self) -> TopologyConfig:
        return TopologyConfig(
            source=self.topology_source,
            radius=self.radius,
            k=self.k,
            descriptor_bins=self.descriptor_bins,
            descriptor_threshold=self.descriptor_threshold,
        )

    def icp_config(self) -> IcpConfig:
        return IcpConfig(
            max_iterations=self.icp_max_iterations,
            convergence_eps=self.icp_convergence_eps,
            max_correspondence_dist=self.icp_max_correspondence_dist,
            min_inliers=self.icp_min_inliers,
        )

    def to_text(self) -> str:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            out.append(f"{f.name}={v}")
        return "\n".join(out) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#") or "=" not in line:
                continue
            key, val = line.split("=", 1)
            key, val = key.strip(), val.strip()
            if key not in known:
                raise ValueError(f"unknown config key {key!r}")
            ftype = known[key].type
            if ftype == "int":
                kwargs[key] = int(val)
            elif ftype == "float":
                kwargs[key] = float(val)
            elif ftype == "bool":
                kwargs[key] = val.lower() in ("1", "true", "yes", "on")
            elif ftype == "tuple":
                kwargs[key] = tuple(int(x) for x in val.split(","))
            else:
                kwargs[key] = val
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: str) -> "TrainConfig":
        with open(path) as f:
            return cls.from_text(f.read())


@dataclass
class TrainState:
    lnet: NetParams
    mnet: NetParams
    opt_lnet: OptimizerState
    opt_mnet: OptimizerState
    poses: list
    epoch: int
    history: list
    seed: int


@dataclass
class BatchTerms:
    occupancy: float
    chamfer: float
    consistency: float
    total: float


@dataclass
class TrainResult:
    poses: list
    state: TrainState
    history: list
    ate_curve: list


@dataclass
class _Prep:
    """Static per-run tensors: everything the batches reuse every epoch."""

    warm: np.ndarray  # (K, 3) warm-start pose params
    local_pts: list  # raw scan points per frame
    origins: list  # local sensor origins per frame
    inputs: list  # recentered warm-started global clouds (net inputs)
    batches: list
    pairwise: list  # per batch: list of (3,) transform params or None
    overlap: list = None  # per batch: bool per neighbor, Chamfer eligibility


def _prepare_frames(dataset: Dataset, init_poses) -> tuple:
    warm = np.stack([p.params() for p in init_poses])
    local_pts = [c.points for c in dataset.clouds]
    origins = [c.sensor_origin for c in dataset.clouds]
    inputs = []
    for pts, w in zip(local_pts, warm):
        g = nets.transform_points_se2(w, pts)
        inputs.append(g - g.mean(axis=0))
    return warm, local_pts, origins, inputs


def prepare(dataset: Dataset, init_poses, cfg: TrainConfig, threads: int | None = None) -> _Prep:
    """Build batches (spatial topology or temporal windows) and pairwise
    transforms, plus the cached per-frame inputs."""
    if len(init_poses) != len(dataset.clouds):
        raise ValueError("init_poses must match dataset length")
    threads = worker_count() if threads is None else threads
    warm, local_pts, origins, inputs = _prepare_frames(dataset, init_poses)
    if cfg.use_batch_org:
        graph = topology.build_topology(dataset, init_poses, cfg.topology_config())
        batches = topology.organize_batches(graph, cfg.topology_config())
    else:
        batches = topology.temporal_batches(len(dataset.clouds), cfg.k)
    if cfg.use_consistency:
        batches = topology.batch_pairwise_transforms(
            dataset, batches, init_poses, cfg.icp_config(), threads=threads
        )
        pairwise = [[t.params() for t in b.pairwise] for b in batches]
    else:
        pairwise = [None] * len(batches)
    # Chamfer only makes sense between views the init poses say overlap;
    # descriptor topology can pair aliased far-apart frames, and pulling
    # those clouds together corrupts the map
    overlap = [
        [
            float(np.linalg.norm(warm[b.anchor, :2] - warm[j, :2])) <= cfg.radius
            for j in b.neighbors
        ]
        for b in batches
    ]
    return _Prep(
        warm=warm,
        local_pts=local_pts,
        origins=origins,
        inputs=inputs,
        batches=batches,
        pairwise=pairwise,
        overlap=overlap,
    )


def _free_fractions(seed: int, epoch_key: int, frame: int, n_points: int, n_per_ray: int):
    rng = keyed_rng(seed, STREAM_FREE_SPACE, epoch_key, frame)
    return losses.draw_free_fractions(n_points, n_per_ray, rng)


def batch_forward_backward(
    lnet: NetParams,
    mnet: NetParams,
    batch,
    pairwise,
    prep: _Prep,
    fractions: dict,
    w_occ: float,
    w_chamfer: float,
    w_consistency: float,
    threads: int = 1,
    overlap=None,
):
    """Loss terms and parameter gradients for one batch.

    Returns (BatchTerms, d_lnet, d_mnet, d_poses) where the gradients are
    of w_occ*occupancy + w_chamfer*chamfer + w_consistency*consistency and
    d_poses maps frame id -> gradient w.r.t. that frame's (tx, ty, theta).
    Terms that receive weight 0 are skipped and reported as 0. `overlap`
    restricts the Chamfer term to neighbors flagged as overlapping views.
    """
    frame_ids = [batch.anchor] + list(batch.neighbors)
    n_frames = len(frame_ids)
    deltas, lcache = nets.lnet_refine_batch(lnet, [prep.inputs[f] for f in frame_ids])
    poses = [nets.compose_se2(deltas[i], prep.warm[f]) for i, f in enumerate(frame_ids)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            globals_ = list(
                pool.map(
                    lambda i: nets.transform_points_se2(poses[i], prep.local_pts[frame_ids[i]]),
                    range(n_frames),
                )
            )
    else:
        globals_ = [
            nets.transform_points_se2(poses[i], prep.local_pts[f])
            for i, f in enumerate(frame_ids)
        ]
    d_globals = [np.zeros_like(g) for g in globals_]
    d_poses = [np.zeros(3) for _ in frame_ids]
    d_mnet = np.zeros_like(mnet.values)

    # occupancy: stack every coordinate the map net sees into one pass
    occ_value = 0.0
    if w_occ != 0.0:
        origins_g = [
            nets.transform_points_se2(poses[i], prep.origins[f][None, :])[0]
            for i, f in enumerate(frame_ids)
        ]
        free_coords = []
        for i, f in enumerate(frame_ids):
            u, pidx = fractions[f]
            free_coords.append(losses.free_space_coords(globals_[i], origins_g[i], u, pidx))
        coords = np.concatenate(globals_ + free_coords, axis=0)
        probs, mcache = nets.mnet_forward(mnet, coords)
        d_probs = np.empty_like(probs)
        pos = 0
        occ_slices = []
        for i in range(n_frames):
            n = globals_[i].shape[0]
            sl = slice(pos, pos + n)
            occ_slices.append(sl)
            occ_value += float(losses.bce_vec(probs[sl], 1.0).mean())
            d_probs[sl] = losses.bce_vec_grad(probs[sl], 1.0) / (n * n_frames)
            pos += n
        free_slices = []
        for i in range(n_frames):
            m = free_coords[i].shape[0]
            sl = slice(pos, pos + m)
            free_slices.append(sl)
            occ_value += float(losses.bce_vec(probs[sl], 0.0).mean())
            d_probs[sl] = losses.bce_vec_grad(probs[sl], 0.0) / (m * n_frames)
            pos += m
        occ_value /= n_frames
        d_mnet_occ, d_coords = nets.mnet_backward(mnet, mcache, d_probs * w_occ)
        d_mnet += d_mnet_occ
        for i, f in enumerate(frame_ids):
            d_globals[i] += d_coords[occ_slices[i]]
            u, pidx = fractions[f]
            d_free = d_coords[free_slices[i]]
            np.add.at(d_globals[i], pidx, u[:, None] * d_free)
            d_origin = ((1.0 - u)[:, None] * d_free).sum(axis=0)
            d_poses[i] += nets.transform_points_se2_backward(
                poses[i], prep.origins[f][None, :], d_origin[None, :]
            )

    # chamfer between the anchor's global cloud and each overlapping neighbor's
    cham_value = 0.0
    if w_chamfer != 0.0 and n_frames > 1:
        used = [
            i for i in range(1, n_frames) if overlap is None or overlap[i - 1]
        ]
        if used:
            n_pairs = len(used)
            if threads > 1:
                with ThreadPoolExecutor(max_workers=threads) as pool:
                    results = list(
                        pool.map(
                            lambda i: losses.chamfer_with_grad(globals_[0], globals_[i]),
                            used,
                        )
                    )
            else:
                results = [losses.chamfer_with_grad(globals_[0], globals_[i]) for i in used]
            for i, (val, gx, gy) in zip(used, results):
                cham_value += val
                d_globals[0] += (w_chamfer / n_pairs) * gx
                d_globals[i] += (w_chamfer / n_pairs) * gy
            cham_value /= n_pairs

    # consistency: anchor placed via each neighbor vs placed directly;
    # the same overlap gate drops pairs whose registration cannot be trusted
    cons_value = 0.0
    if w_consistency != 0.0 and pairwise is not None and n_frames > 1:
        used = [
            i for i in range(1, n_frames) if overlap is None or overlap[i - 1]
        ]
        anchor_pts = prep.local_pts[batch.anchor]
        for i in used:
            t_ji = pairwise[i - 1]
            via = nets.compose_se2(poses[i], t_ji)
            val, g_via, g_anchor = losses.pose_inconsistency_with_grad(
                via, poses[0], anchor_pts
            )
            cons_value += val
            scale = w_consistency / len(used)
            d_poses[i] += scale * nets.compose_se2_backward_left(poses[i], t_ji, g_via)
            d_poses[0] += scale * g_anchor
        if used:
            cons_value /= len(used)

    # pose gradients from the global clouds, then back into the nets
    d_deltas = np.zeros((n_frames, 3))
    for i, f in enumerate(frame_ids):
        d_poses[i] += nets.transform_points_se2_backward(
            poses[i], prep.local_pts[f], d_globals[i]
        )
        d_deltas[i] = nets.compose_se2_backward_left(deltas[i], prep.warm[f], d_poses[i])
    d_lnet = nets.lnet_refine_batch_backward(lnet, lcache, d_deltas)

    total = w_occ * occ_value + w_chamfer * cham_value + w_consistency * cons_value
    terms = BatchTerms(
        occupancy=occ_value, chamfer=cham_value, consistency=cons_value, total=total
    )
    return terms, d_lnet, d_mnet, dict(zip(frame_ids, d_poses))


def init_state(dataset: Dataset, init_poses, cfg: TrainConfig) -> TrainState:
    lnet = nets.init_params(
        nets.LNetSpec(
            trunk=nets.MlpSpec(cfg.lnet_trunk), head=nets.MlpSpec(cfg.lnet_head)
        ),
        cfg.seed,
        "lnet",
    )
    mnet = nets.init_params(nets.default_mnet_spec(cfg.mnet_widths), cfg.seed, "mnet")
    opt_kwargs = dict(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
    return TrainState(
        lnet=lnet,
        mnet=mnet,
        opt_lnet=OptimizerState.fresh(lnet.values.size, **opt_kwargs),
        opt_mnet=OptimizerState.fresh(mnet.values.size, **opt_kwargs),
        poses=list(init_poses),
        epoch=0,
        history=[],
        seed=cfg.seed,
    )


def predict_all_poses(lnet: NetParams, prep: _Prep) -> list:
    """Current global pose estimates for every frame (one stacked pass)."""
    deltas, _ = nets.lnet_refine_batch(lnet, prep.inputs)
    out = []
    for i in range(prep.warm.shape[0]):
        p = nets.compose_se2(deltas[i], prep.warm[i])
        out.append(Pose.se2(p[0], p[1], p[2]))
    return out


def train_epoch(
    state: TrainState, dataset: Dataset, batches, cfg: TrainConfig, prep: _Prep | None = None,
    threads: int | None = None,
) -> TrainState:
    """One pass over all batches in a seed-shuffled order.

    Each batch takes one optimizer step on both nets. Appends one history
    row (epoch, mean occupancy, mean chamfer, mean consistency, mean total).
    """
    if prep is None:
        prep = prepare(dataset, state.poses, cfg)
    threads = worker_count() if threads is None else threads
    epoch = state.epoch
    epoch_key = epoch if cfg.resample_free_space else 0
    fractions = {
        f: _free_fractions(state.seed, epoch_key, f, prep.local_pts[f].shape[0], cfg.n_per_ray)
        for f in range(len(prep.local_pts))
    }
    order = keyed_rng(state.seed, STREAM_SHUFFLE, epoch).permutation(len(batches))
    w_ch = cfg.lambda_chamfer if cfg.use_chamfer else 0.0
    w_cons = cfg.lambda_consistency if cfg.use_consistency else 0.0
    sums = np.zeros(4)
    for bi in order:
        batch = batches[bi]
        terms, d_lnet, d_mnet, _ = batch_forward_backward(
            state.lnet, state.mnet, batch, prep.pairwise[bi], prep, fractions,
            1.0, w_ch, w_cons, threads=threads,
            overlap=prep.overlap[bi] if prep.overlap else None,
        )
        if not np.isfinite(terms.total):
            raise EngineError(
                f"non-finite loss in epoch {epoch}, batch anchored at frame {batch.anchor}"
            )
        new_lvals, state.opt_lnet = nets.adam_step(state.lnet.values, d_lnet, state.opt_lnet)
        new_mvals, state.opt_mnet = nets.adam_step(state.mnet.values, d_mnet, state.opt_mnet)
        state.lnet = replace(state.lnet, values=new_lvals)
        state.mnet = replace(state.mnet, values=new_mvals)
        sums += (terms.occupancy, terms.chamfer, terms.consistency, terms.total)
    means = sums / len(batches)
    state.history.append((epoch, means[0], means[1], means[2], means[3]))
    state.epoch = epoch + 1
    return state


# ---------------------------------------------------------------------------
# run-level orchestration with checkpointing


def _checkpoint_payload(state: TrainState, cfg: TrainConfig, ate_curve) -> tuple:
    meta = {
        "epoch": state.epoch,
        "seed": state.seed,
        "t_lnet": state.opt_lnet.t,
        "t_mnet": state.opt_mnet.t,
        "lnet_trunk": ",".join(str(w) for w in cfg.lnet_trunk),
        "lnet_head": ",".join(str(w) for w in cfg.lnet_head),
        "mnet_widths": ",".join(str(w) for w in cfg.mnet_widths),
        "history_rows": len(state.history),
        "ate_rows": len(ate_curve),
    }
    arrays = {
        "lnet_values": state.lnet.values,
        "mnet_values": state.mnet.values,
        "lnet_m": state.opt_lnet.m,
        "lnet_v": state.opt_lnet.v,
        "mnet_m": state.opt_mnet.m,
        "mnet_v": state.opt_mnet.v,
        "poses": np.concatenate([p.params() for p in state.poses])
        if state.poses
        else np.zeros(0),
        "history": np.asarray(state.history, dtype=np.float64).ravel(),
        "ate_curve": np.asarray(ate_curve, dtype=np.float64).ravel(),
    }
    return meta, arrays


def _restore_state(path: str, cfg: TrainConfig, dataset: Dataset) -> tuple:
    meta, arrays = nets.load_checkpoint(path)
    for key in ("lnet_trunk", "lnet_head", "mnet_widths"):
        stored = meta[key]
        current = ",".join(str(w) for w in getattr(cfg, key))
        if stored != current:
            raise EngineError(f"checkpoint {key}={stored} does not match config {current}")
    lspec = nets.LNetSpec(trunk=nets.MlpSpec(cfg.lnet_trunk), head=nets.MlpSpec(cfg.lnet_head))
    mspec = nets.default_mnet_spec(cfg.mnet_widths)
    opt_kwargs = dict(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
    opt_l = OptimizerState(
        m=arrays["lnet_m"], v=arrays["lnet_v"], t=int(meta["t_lnet"]), **opt_kwargs
    )
    opt_m = OptimizerState(
        m=arrays["mnet_m"], v=arrays["mnet_v"], t=int(meta["t_mnet"]), **opt_kwargs
    )
    poses = [
        Pose.se2(*arrays["poses"][3 * i : 3 * i + 3]) for i in range(arrays["poses"].size // 3)
    ]
    history = [tuple(row) for row in arrays["history"].reshape(int(meta["history_rows"]), 5)]
    ate_curve = [tuple(row) for row in arrays["ate_curve"].reshape(int(meta["ate_rows"]), 3)]
    state = TrainState(
        lnet=NetParams(arrays["lnet_values"], lspec, "lnet"),
        mnet=NetParams(arrays["mnet_values"], mspec, "mnet"),
        opt_lnet=opt_l,
        opt_mnet=opt_m,
        poses=poses,
        epoch=int(meta["epoch"]),
        history=history,
        seed=int(meta["seed"]),
    )
    return state, ate_curve


def run_training(
    dataset: Dataset,
    init_poses,
    cfg: TrainConfig,
    out_dir: str | None = None,
    resume_from: str | None = None,
    threads: int | None = None,
    log=None,
) -> TrainResult:
    """Full optimization: topology, batches, pairwise transforms, epochs.

    Writes poses_final.csv, loss_history.csv, ate_curve.csv (when ground
    truth is available), checkpoints, and an echo of the config into
    out_dir when given. Resuming from a checkpoint reproduces the
    uninterrupted run bit for bit.
    """
    threads = worker_count() if threads is None else threads
    prep = prepare(dataset, init_poses, cfg, threads=threads)
    if resume_from:
        state, ate_curve = _restore_state(resume_from, cfg, dataset)
    else:
        state = init_state(dataset, init_poses, cfg)
        ate_curve = []
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "config.txt"), "w") as f:
            f.write(cfg.to_text())
    has_gt = dataset.gt_poses is not None and len(dataset.gt_poses) == len(dataset.clouds)
    while state.epoch < cfg.epochs:
        state = train_epoch(state, dataset, prep.batches, cfg, prep, threads=threads)
        state.poses = predict_all_poses(state.lnet, prep)
        if has_gt:
            rep = ate(state.poses, dataset.gt_poses)
            ate_curve.append((state.epoch, rep.t_ate, rep.r_ate))
        if log:
            row = state.history[-1]
            log(f"epoch {state.epoch}/{cfg.epochs} total={row[4]:.6f}")
        if out_dir and (
            state.epoch == cfg.epochs
            or (cfg.checkpoint_interval > 0 and state.epoch % cfg.checkpoint_interval == 0)
        ):
            meta, arrays = _checkpoint_payload(state, cfg, ate_curve)
            nets.save_checkpoint(
                os.path.join(out_dir, f"ckpt_{state.epoch:04d}.bin"), meta, arrays
            )
    if out_dir:
        geometry.save_poses(os.path.join(out_dir, "poses_final.csv"), state.poses)
        write_history(os.path.join(out_dir, "loss_history.csv"), state.history)
        if has_gt:
            write_ate_curve(os.path.join(out_dir, "ate_curve.csv"), ate_curve)
    return TrainResult(poses=state.poses, state=state, history=state.history, ate_curve=ate_curve)


def write_history(path: str, history) -> None:
    with open(path, "w") as f:
        f.write("epoch,occupancy,chamfer,consistency,total\n")
        for row in history:
            f.write(
                f"{int(row[0])}," + ",".join(repr(float(v)) for v in row[1:]) + "\n"
            )


def write_ate_curve(path: str, curve) -> None:
    with open(path, "w") as f:
        f.write("epoch,t_ate_m,r_ate_deg\n")
        for row in curve:
            f.write(f"{int(row[0])},{repr(float(row[1]))},{repr(float(row[2]))}\n")
