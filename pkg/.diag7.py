import numpy as np, tempfile, logging, time
logging.basicConfig(level=logging.ERROR)
from blockslam import synthetic as syn
from blockslam import dataio as dio
from blockslam.geometry import Intrinsics, compose, invert
from blockslam.pipeline import SlamSystem
from blockslam.field import query_points
from blockslam.blocks import compute_tau, maybe_allocate
from blockslam.renderer import sample_depth_batch, render_batch

K = Intrinsics(fx=35.0, fy=35.0, cx=23.5, cy=17.5, width=48, height=36)
scene = syn.make_room_scene(6.0, 4.0, 3.0)
traj = syn.orbit_trajectory(scene, 30, sweep=0.8)
td = tempfile.mkdtemp()
syn.generate_synthetic(scene, traj, K, td, seed=3)
seq = dio.load_tum(td)
cfg = dio.load_config(overrides={
    "block_size": 2.5, "far": 8.0, "n_m": 2048, "n_a": 512,
    "iters_first": 1, "smooth_points": 64, "seed": 1,
    "lambda_sdf": 1e5, "lambda_fs": 1000.0,
})
s = SlamSystem(seq, cfg)
gt_anchor = [compose(invert(traj[0]), p) for p in traj]
s.init_first_frame(seq.frames[0])
for f in seq.frames[1:]:
    pose = gt_anchor[f.index]
    tau = compute_tau(f, pose, K, s.atlas, cfg.n_alloc_samples, s._rng["allocation"])
    maybe_allocate(tau, s.atlas, cfg.tau_th, f.index, s._rng["blocks"])
    if f.index % 5 == 0:
        s._insert_keyframe(f, pose)

f0 = seq.frames[0]
rng = np.random.default_rng(0)
us = rng.integers(0, K.width, 200); vs = rng.integers(0, K.height, 200)
obs_d = f0.depth[vs, us]
def depth_err():
    depths, slot_valid = sample_depth_batch(obs_d, cfg.near, cfg.far, cfg.n1, cfg.n2, cfg.truncation, np.random.default_rng(7))
    dirs_cam = np.stack([(us-K.cx)/K.fx, (vs-K.cy)/K.fy, np.ones(200)], axis=1)
    pts = np.zeros(3) + depths[:, :, None] * dirs_cam[:, None, :]
    sdf, color, cov = query_points(pts.reshape(-1,3), s.atlas.blocks, s.field, train_field=False)
    valid = slot_valid & (cov.reshape(200, -1) > 0)
    rv = __import__("blockslam.renderer", fromlist=["first_surface_mask"]).first_surface_mask(sdf.data.reshape(200,-1), depths, valid, cfg.truncation)
    d_hat, _, _ = render_batch(sdf.reshape(200,-1), color.reshape(200,-1,3), depths, rv, cfg.render_band)
    sel = (obs_d > 0) & valid.any(1)
    err = np.abs(d_hat.data - obs_d)[sel]
    return err.mean()*100, np.quantile(err, 0.9)*100

t0 = time.perf_counter()
for chunk in range(4):
    s.map_step(75, optimize_poses=False)
    m, p90 = depth_err()
    ls = s._last_losses
    print(f"iter {(chunk+1)*75}: sdf={ls['sdf']:.6f} fs={ls['fs']:.6f} color={ls['color']:.5f} "
          f"| f0 depth err mean {m:.2f}cm p90 {p90:.2f}cm ({time.perf_counter()-t0:.0f}s)", flush=True)
