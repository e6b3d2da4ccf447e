import numpy as np, tempfile, logging
logging.basicConfig(level=logging.ERROR)
from blockslam import autodiff as ad
from blockslam import synthetic as syn
from blockslam import dataio as dio
from blockslam import pose_tape as pt
from blockslam.geometry import Intrinsics, compose, invert, se3_exp
from blockslam.pipeline import SlamSystem
from blockslam.renderer import sample_depth_batch

K = Intrinsics(fx=35.0, fy=35.0, cx=23.5, cy=17.5, width=48, height=36)
scene = syn.make_room_scene(6.0, 4.0, 3.0)
traj = syn.orbit_trajectory(scene, 75, sweep=0.8)
td = tempfile.mkdtemp()
syn.generate_synthetic(scene, traj, K, td, seed=3)
seq = dio.load_tum(td)
cfg = dio.load_config(overrides={
    "block_size": 2.5, "far": 8.0, "keep_fraction": 1.0,
    "smooth_points": 64, "seed": 1, "map_every": 999, "keyframe_every": 999,
})
s = SlamSystem(seq, cfg)
gt = [compose(invert(traj[0]), p) for p in traj]
s.init_first_frame(seq.frames[0])

f5 = seq.frames[5]
true_pose = gt[5]
cam_x_world = true_pose.rotation[:, 0]  # camera x axis in world coords

rngt = np.random.default_rng(5)
n = 1536
us = rngt.integers(0, K.width, n); vs = rngt.integers(0, K.height, n)
od = f5.depth[vs, us]; oc = f5.color[vs, us]
depths, slot_valid = sample_depth_batch(od, cfg.near, cfg.far, cfg.n1, cfg.n2, cfg.truncation, rngt)
dirs_cam = np.stack([(us-K.cx)/K.fx, (vs-K.cy)/K.fy, np.ones(n)], axis=1)

def parts_at(delta):
    pose = compose(se3_exp(np.concatenate([cam_x_world * delta, np.zeros(3)])), true_pose)
    xi = ad.Tensor(np.zeros(6), requires_grad=False)
    o, d = pt.apply_increment_rays(xi, pose, dirs_cam)
    s._losses_from_batch(o, d, depths, slot_valid, oc, od, train_field=False, with_smooth=False, robust=True)
    ls = s._last_losses
    w = s.weights
    return {"color": ls["color"]*w.color, "depth": ls["depth"]*w.depth,
            "sdf": ls["sdf"]*w.sdf, "fs": ls["fs"]*w.free_space, "total": ls["total"]}

print(f"{'delta':>8} {'color':>10} {'depth':>10} {'sdf':>10} {'fs':>10} {'total':>10}")
for delta in (-0.02, -0.01, -0.005, 0.0, 0.005, 0.01, 0.02):
    p = parts_at(delta)
    print(f"{delta:8.3f} {p['color']:10.5f} {p['depth']:10.5f} {p['sdf']:10.5f} {p['fs']:10.5f} {p['total']:10.5f}")
