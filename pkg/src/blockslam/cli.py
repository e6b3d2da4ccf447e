"""Command-line entry points.

Subcommands: run (SLAM on a dataset), gen (synthetic sequence), eval
(trajectory/mesh metrics), mesh (ground-truth mesh from an analytic scene),
gradcheck (finite-difference verification).

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure (non-finite values or gradient check above tolerance).
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .errors import BlockSlamError, ConfigError, DataError, NumericError

log = logging.getLogger("blockslam")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="config file path")
    p.add_argument("--profile", default="default",
                   help="config profile (default, tum, scannet)")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="config override, repeatable")
    p.add_argument("--seed", type=int, default=None,
                   help="run seed (overrides config)")


def _resolve_config(args):
    from .dataio import load_config, parse_overrides

    overrides = parse_overrides(args.override)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "threads", None) is not None:
        overrides["threads"] = args.threads
    return load_config(args.config, profile=args.profile, overrides=overrides)


def cmd_run(args) -> int:
    from .dataio import (load_tum, resolve_data_dir, write_mesh_ply,
                         write_runlog_csv, write_trajectory)
    from .pipeline import SlamSystem

    cfg = _resolve_config(args)
    seq = load_tum(resolve_data_dir(str(args.data)))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    system = SlamSystem(seq, cfg)
    result = system.run()
    elapsed = time.perf_counter() - t0

    write_trajectory(result.poses, result.timestamps, out_dir / "trajectory.txt")
    records = [vars(r) for r in result.records]
    write_runlog_csv(records, out_dir / "runlog.csv", config_items=cfg.items())
    if args.mesh:
        from .evaluation import cull_mesh, extract_mesh, field_query_adapter

        mesh = extract_mesh(field_query_adapter(system.atlas, system.field),
                            system.atlas, cfg.voxel)
        depths = [f.depth for f in seq.frames]
        mesh = cull_mesh(mesh, result.poses, seq.intrinsics, depths,
                         tr=cfg.truncation)
        write_mesh_ply(mesh, out_dir / "mesh.ply")
        print(f"mesh: {len(mesh.vertices)} vertices, {len(mesh.faces)} faces")

    track_ms = np.array([r.track_ms for r in result.records[1:]])
    if len(track_ms):
        print(f"tracking per frame: mean {track_ms.mean():.0f} ms, "
              f"max {track_ms.max():.0f} ms")
    print(f"frames: {len(result.poses)}  keyframes: {len(system.db)}  "
          f"blocks: {result.n_blocks}  loops: {len(result.loop_events)}  "
          f"wall: {elapsed:.1f} s")
    print(f"trajectory: {out_dir / 'trajectory.txt'}")
    return 0


def cmd_gen(args) -> int:
    from .geometry import Intrinsics
    from .synthetic import (generate_synthetic, make_corridor_scene,
                            make_room_scene, orbit_trajectory)

    cfg = _resolve_config(args)
    if args.scene == "corridor":
        scene = make_corridor_scene()
    elif args.scene == "room-small":
        scene = make_room_scene(4.0, 3.0, 2.5)
    else:  # room1
        scene = make_room_scene(6.0, 4.0, 3.0)
    k = Intrinsics(fx=args.fx, fy=args.fx, cx=(args.width - 1) / 2.0,
                   cy=(args.height - 1) / 2.0, width=args.width,
                   height=args.height)
    traj = orbit_trajectory(scene, args.frames, sweep=args.sweep)
    out = generate_synthetic(scene, traj, k, args.out,
                             depth_noise_sigma=args.noise, seed=cfg.seed)
    print(f"wrote {args.frames} frames to {out}")
    return 0


def cmd_eval(args) -> int:
    from .dataio import load_mesh_ply, load_trajectory
    from .evaluation import MetricReport, acc_comp, ate_rmse, depth_l1
    from .synthetic import SyntheticScene

    cfg = _resolve_config(args)
    t0 = time.perf_counter()
    report = MetricReport()
    report.ate_rmse_cm = ate_rmse(load_trajectory(args.est),
                                  load_trajectory(args.gt))
    if args.rec_mesh and args.gt_mesh:
        rng = np.random.default_rng(cfg.seed)
        rec = load_mesh_ply(args.rec_mesh)
        gt = load_mesh_ply(args.gt_mesh)
        acc, comp, ratio = acc_comp(rec, gt, args.n_points, 0.05, rng)
        report.acc_cm = acc
        report.comp_cm = comp
        report.comp_ratio_pct = ratio
        if args.scene:
            from .geometry import Intrinsics

            scene = SyntheticScene.load(args.scene)
            k = Intrinsics(fx=60.0, fy=60.0, cx=39.5, cy=29.5, width=80, height=60)
            report.depth_l1_cm = depth_l1(rec, gt, scene, k, args.n_views, rng)
    report.runtime_s = time.perf_counter() - t0
    print(report.text())
    if args.csv:
        Path(args.csv).write_text(report.csv())
    return 0


def cmd_mesh(args) -> int:
    from .blocks import BlockAtlas
    from .dataio import load_mesh_ply, load_trajectory, load_tum, write_mesh_ply
    from .encoders import HashGridConfig
    from .evaluation import cull_mesh, extract_mesh
    from .synthetic import SyntheticScene

    cfg = _resolve_config(args)
    scene = SyntheticScene.load(args.scene)
    lo = np.asarray(scene.extent[0]) - 0.5
    hi = np.asarray(scene.extent[1]) + 0.5
    size = float(np.max(hi - lo))
    center = (lo + hi) / 2.0
    atlas = BlockAtlas(HashGridConfig(1, 2, 1, 1, 1, size), None)
    atlas.allocate(center, 0, np.random.default_rng(0))

    def query(pts):
        sdf = scene.sdf(pts)
        cov = np.ones(len(pts), dtype=np.int64)
        colors = np.array([scene.primitives[i].color
                           for i in scene.nearest_primitive(pts)])
        return sdf, cov, colors

    mesh = extract_mesh(query, atlas, args.voxel)
    if args.traj and args.data:
        seq = load_tum(args.data)
        traj = [p for _, p in load_trajectory(args.traj)]
        depths = [f.depth for f in seq.frames]
        mesh = cull_mesh(mesh, traj, seq.intrinsics, depths, tr=cfg.truncation)
    write_mesh_ply(mesh, args.out)
    print(f"wrote {len(mesh.vertices)} vertices, {len(mesh.faces)} faces "
          f"to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOL_REL, run_gradcheck

    cfg = _resolve_config(args)
    results = run_gradcheck(cfg.seed, n_seeds=args.n_seeds)
    width = max(len(r.family) for r in results)
    failed = False
    for r in results:
        status = "pass" if r.passed else "FAIL"
        print(f"{r.family:<{width}}  max rel err {r.max_rel_err:.3e}  {status}")
        failed |= not r.passed
    if failed:
        print(f"gradient check FAILED (tolerance {TOL_REL})")
        return 4
    print(f"all gradients within tolerance {TOL_REL}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="blockslam",
        description="Block-based neural RGB-D SLAM: tracking, mapping, "
                    "loop closure, and evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run SLAM on a TUM-layout dataset")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    p.add_argument("--mesh", action="store_true", help="extract and cull a mesh")
    p.add_argument("--threads", type=int, default=None,
                   help="1 = sequential (default); >1 runs mapping in a worker")
    _add_config_flags(p)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("gen", help="generate a synthetic RGB-D sequence")
    p.add_argument("--scene", default="room1",
                   choices=["room1", "room-small", "corridor"])
    p.add_argument("--frames", type=int, default=100)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--noise", type=float, default=0.0, help="depth sigma (m)")
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=48)
    p.add_argument("--fx", type=float, default=45.0)
    p.add_argument("--sweep", type=float, default=1.2, help="orbit sweep (rad)")
    _add_config_flags(p)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("eval", help="trajectory and reconstruction metrics")
    p.add_argument("--est", required=True, help="estimated trajectory file")
    p.add_argument("--gt", required=True, help="ground-truth trajectory file")
    p.add_argument("--rec-mesh", default=None, help="reconstructed mesh PLY")
    p.add_argument("--gt-mesh", default=None, help="ground-truth mesh PLY")
    p.add_argument("--scene", default=None, help="scene.json for virtual views")
    p.add_argument("--n-points", type=int, default=20000)
    p.add_argument("--n-views", type=int, default=20)
    p.add_argument("--csv", default=None, help="also write the report as CSV")
    _add_config_flags(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("mesh", help="mesh an analytic scene (ground truth)")
    p.add_argument("--scene", required=True, help="scene.json path")
    p.add_argument("--out", required=True, help="output PLY path")
    p.add_argument("--voxel", type=float, default=0.02)
    p.add_argument("--cull", action="store_true")
    p.add_argument("--traj", default=None, help="trajectory for culling")
    p.add_argument("--data", default=None, help="dataset dir (culling depths)")
    _add_config_flags(p)
    p.set_defaults(fn=cmd_mesh)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--n-seeds", type=int, default=3)
    _add_config_flags(p)
    p.set_defaults(fn=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4
    except BlockSlamError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
