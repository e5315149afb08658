"""Command-line pipeline: simulate, init, topology, train, eval, plot, ablate."""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .. import geometry, sim2d, topology
from ..register import incremental_warm_start
from ..sim2d import Dataset, ScanConfig
from .evaluate import ate, write_ate_csv
from .render import render_map, render_trajectories
from .train import EngineError, TrainConfig, run_training, worker_count


def _load_dataset(path: str) -> Dataset:
    if not os.path.isdir(path):
        raise EngineError(f"dataset directory {path!r} does not exist")
    return sim2d.load_dataset(path)


def _ensure_init(dataset: Dataset, data_dir: str, cfg: TrainConfig, quiet: bool = False):
    if dataset.init_poses is not None:
        return dataset.init_poses
    if not quiet:
        print("no init_poses.csv found; running incremental warm start")
    init = incremental_warm_start(dataset, cfg.icp_config())
    geometry.save_poses(os.path.join(data_dir, "init_poses.csv"), init)
    dataset.init_poses = init
    return init


def _train_config(args) -> TrainConfig:
    cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def cmd_simulate(args) -> int:
    scan_cfg = ScanConfig(
        num_beams=args.beams,
        max_range=args.max_range,
        range_noise_sigma=args.noise,
        seed=args.seed if args.seed is not None else 0,
    )
    env = sim2d.default_scene()
    trajectory = sim2d.loop_trajectory(sim2d.default_loop(), args.frames, laps=args.laps)
    dataset = sim2d.generate_dataset(env, trajectory, scan_cfg)
    sim2d.save_dataset(dataset, args.data)
    print(f"wrote {len(dataset)} frames to {args.data}")
    return 0


def cmd_init(args) -> int:
    cfg = _train_config(args)
    dataset = _load_dataset(args.data)
    init = incremental_warm_start(dataset, cfg.icp_config())
    geometry.save_poses(os.path.join(args.data, "init_poses.csv"), init)
    rep = ate(init, dataset.gt_poses)
    print(f"warm start: T-ATE {rep.t_ate:.4f} m, R-ATE {rep.r_ate:.4f} deg")
    return 0


def cmd_topology(args) -> int:
    cfg = _train_config(args)
    if args.source:
        cfg.topology_source = args.source
    dataset = _load_dataset(args.data)
    init = _ensure_init(dataset, args.data, cfg)
    graph = topology.build_topology(dataset, init, cfg.topology_config())
    batches = topology.organize_batches(graph, cfg.topology_config())
    batches = topology.batch_pairwise_transforms(
        dataset, batches, init, cfg.icp_config(), threads=worker_count()
    )
    topology.save_topology(graph, os.path.join(args.data, "topology.csv"))
    topology.save_batches(batches, os.path.join(args.data, "batches.csv"))
    topology.save_pairwise(batches, os.path.join(args.data, "pairwise.csv"))
    iso = graph.isolated_nodes()
    print(
        f"{len(graph.edges())} edges, {len(batches)} batches"
        + (f", {len(iso)} isolated frames padded temporally" if iso else "")
    )
    return 0


def cmd_train(args) -> int:
    cfg = _train_config(args)
    dataset = _load_dataset(args.data)
    init = _ensure_init(dataset, args.data, cfg)
    out_dir = args.out or os.path.join(args.data, "run")
    result = run_training(
        dataset, init, cfg, out_dir=out_dir,
        resume_from=args.resume, log=print if not args.quiet else None,
    )
    rep = ate(result.poses, dataset.gt_poses)
    print(f"final: T-ATE {rep.t_ate:.4f} m, R-ATE {rep.r_ate:.4f} deg -> {out_dir}")
    return 0


def cmd_eval(args) -> int:
    dataset = _load_dataset(args.data)
    out_dir = args.out or os.path.join(args.data, "run")
    poses_path = os.path.join(out_dir, "poses_final.csv")
    if not os.path.exists(poses_path):
        raise EngineError(f"{poses_path} not found; run train first")
    est = geometry.load_poses(poses_path)
    rows = [("trained", ate(est, dataset.gt_poses))]
    if dataset.init_poses is not None:
        rows.append(("warm_start", ate(dataset.init_poses, dataset.gt_poses)))
    write_ate_csv(os.path.join(out_dir, "ate.csv"), rows)
    for method, rep in rows:
        print(f"{method}: T-ATE {rep.t_ate:.4f} m, R-ATE {rep.r_ate:.4f} deg")
    return 0


def cmd_plot(args) -> int:
    dataset = _load_dataset(args.data)
    out_dir = args.out or os.path.join(args.data, "run")
    poses_path = os.path.join(out_dir, "poses_final.csv")
    poses = (
        geometry.load_poses(poses_path)
        if os.path.exists(poses_path)
        else (dataset.init_poses or dataset.gt_poses)
    )
    os.makedirs(out_dir, exist_ok=True)
    render_map(
        dataset.clouds, poses, os.path.join(out_dir, "map.svg"), gt_poses=dataset.gt_poses
    )
    render_trajectories(
        poses, os.path.join(out_dir, "traj.svg"), gt_poses=dataset.gt_poses
    )
    print(f"wrote map.svg and traj.svg to {out_dir}")
    return 0


ABLATION_GRID = (
    ("base", dict(use_batch_org=False, use_consistency=False)),
    ("base+batch_org", dict(use_batch_org=True, use_consistency=False)),
    ("base+consistency", dict(use_batch_org=False, use_consistency=True)),
    ("full", dict(use_batch_org=True, use_consistency=True)),
)


def cmd_ablate(args) -> int:
    cfg = _train_config(args)
    dataset = _load_dataset(args.data)
    init = _ensure_init(dataset, args.data, cfg)
    out_dir = args.out or os.path.join(args.data, "ablation")
    os.makedirs(out_dir, exist_ok=True)
    seeds = [cfg.seed + i for i in range(args.seeds)]
    rows = []
    for name, switches in ABLATION_GRID:
        t_vals, r_vals = [], []
        for seed in seeds:
            run_cfg = TrainConfig.from_text(cfg.to_text())
            run_cfg.seed = seed
            for key, val in switches.items():
                setattr(run_cfg, key, val)
            result = run_training(dataset, init, run_cfg)
            rep = ate(result.poses, dataset.gt_poses)
            t_vals.append(rep.t_ate)
            r_vals.append(rep.r_ate)
            if not args.quiet:
                print(f"  {name} seed={seed}: T-ATE {rep.t_ate:.4f} m")
        rows.append((name, float(np.median(t_vals)), float(np.median(r_vals))))
    with open(os.path.join(out_dir, "ablation.csv"), "w") as f:
        f.write("method,t_ate_m,r_ate_deg\n")
        for name, t, r in rows:
            f.write(f"{name},{repr(t)},{repr(r)}\n")
    width = max(len(r[0]) for r in rows)
    print(f"{'method'.ljust(width)}  T-ATE (m)  R-ATE (deg)   [median of {len(seeds)} seeds]")
    for name, t, r in rows:
        print(f"{name.ljust(width)}  {t:9.4f}  {r:11.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mapforge",
        description="Self-supervised 2D LiDAR map optimization pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--data", required=True, help="dataset directory")
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--quiet", action="store_true")
        if out:
            p.add_argument("--out", help="output directory (default <data>/run)")

    p = sub.add_parser("simulate", help="generate a synthetic loop dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=256)
    p.add_argument("--beams", type=int, default=256)
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--max-range", type=float, default=10.0)
    p.add_argument("--laps", type=int, default=2)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("init", help="incremental ICP warm start")
    common(p, out=False)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("topology", help="build topology, batches, pairwise transforms")
    common(p, out=False)
    p.add_argument("--source", choices=["oracle_radius", "descriptor"])
    p.set_defaults(func=cmd_topology)

    p = sub.add_parser("train", help="run the optimization")
    common(p)
    p.add_argument("--resume", help="checkpoint file to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="trajectory error of the trained poses")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="render map.svg and traj.svg")
    common(p)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("ablate", help="component ablation grid")
    common(p)
    p.add_argument("--seeds", type=int, default=3)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (EngineError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
