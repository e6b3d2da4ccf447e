import numpy as np, tempfile, logging
logging.basicConfig(level=logging.ERROR)
from blockslam import autodiff as ad
from blockslam import synthetic as syn
from blockslam import dataio as dio
from blockslam.geometry import Intrinsics, compose, invert
from blockslam.pipeline import SlamSystem
from blockslam.field import query_points
from blockslam.renderer import sample_depth_batch, sdf_region_masks

K = Intrinsics(fx=35.0, fy=35.0, cx=23.5, cy=17.5, width=48, height=36)
scene = syn.make_room_scene(6.0, 4.0, 3.0)
traj = syn.orbit_trajectory(scene, 75, sweep=0.8)
td = tempfile.mkdtemp()
syn.generate_synthetic(scene, traj, K, td, seed=3)
seq = dio.load_tum(td)
cfg = dio.load_config(overrides={
    "block_size": 2.5, "far": 8.0, "keep_fraction": 1.0,
    "smooth_points": 64, "seed": 1, "map_every": 999, "keyframe_every": 999, "lambda_smooth": 1e-2,
})
s = SlamSystem(seq, cfg)
gt = [compose(invert(traj[0]), p) for p in traj]
s.init_first_frame(seq.frames[0])

def band_err_map(frame, pose, tag):
    us, vs = np.meshgrid(np.arange(0, K.width, 2), np.arange(0, K.height, 2))
    us = us.ravel(); vs = vs.ravel()
    od = frame.depth[vs, us]
    rng = np.random.default_rng(11)
    depths, slot_valid = sample_depth_batch(od, cfg.near, cfg.far, cfg.n1, cfg.n2, cfg.truncation, rng)
    dirs_cam = np.stack([(us-K.cx)/K.fx, (vs-K.cy)/K.fy, np.ones(len(us))], axis=1)
    o = pose.translation
    d = dirs_cam @ pose.rotation.T
    pts = o + depths[:, :, None] * d[:, None, :]
    sdf, _, cov = query_points(pts.reshape(-1, 3), s.atlas.blocks, s.field, train_field=False)
    valid = slot_valid & (cov.reshape(len(us), -1) > 0)
    s_obs, r_tr, _ = sdf_region_masks(depths, od, valid, cfg.truncation)
    err = (s_obs - sdf.data.reshape(len(us), -1))
    cnt = r_tr.sum(1)
    ray_err = np.where(cnt > 0, (err * r_tr).sum(1) / np.maximum(cnt, 1), np.nan)
    ok = cnt > 0
    print(f"{tag}: band signed err mean {np.nanmean(ray_err)*1000:+.2f}mm "
          f"rms {np.sqrt(np.nanmean(ray_err**2))*1000:.2f}mm  rays {ok.sum()}")
    # spatial pattern: signed error vs pixel column
    cols = us[ok]
    re = ray_err[ok]
    for c0 in range(0, K.width, 12):
        m = (cols >= c0) & (cols < c0 + 12)
        if m.any():
            print(f"   cols {c0:2d}-{c0+11:2d}: {np.mean(re[m])*1000:+7.2f}mm")

band_err_map(seq.frames[0], gt[0], "frame0 (fresh pixels)")
band_err_map(seq.frames[5], gt[5], "frame5 (true pose)  ")
