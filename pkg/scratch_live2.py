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
    "smooth_points": 64, "seed": 1,
})
s = SlamSystem(seq, cfg)
gt_anchor = [compose(invert(traj[0]), p) for p in traj]
s.init_first_frame(seq.frames[0])

f2 = seq.frames[2]
true_pose = gt_anchor[2]
rngt = np.random.default_rng(5)
n = 1536
us = rngt.integers(0, K.width, n); vs = rngt.integers(0, K.height, n)
od = f2.depth[vs, us]; oc = f2.color[vs, us]
depths, slot_valid = sample_depth_batch(od, cfg.near, cfg.far, cfg.n1, cfg.n2, cfg.truncation, rngt)
dirs_cam = np.stack([(us-K.cx)/K.fx, (vs-K.cy)/K.fy, np.ones(n)], axis=1)

def loss_at(offset):
    pose = compose(se3_exp(offset), true_pose)
    xi = ad.Tensor(np.zeros(6), requires_grad=False)
    o, d = pt.apply_increment_rays(xi, pose, dirs_cam)
    t = s._losses_from_batch(o, d, depths, slot_valid, oc, od, train_field=False, with_smooth=False)
    return t.item(), dict(s._last_losses)

deltas = (-0.03, -0.01, -0.003, 0.0, 0.003, 0.01, 0.03)
for axis, name in [(0, "tx"), (1, "ty"), (2, "tz"), (4, "ry")]:
    vals = []
    for delta in deltas:
        off = np.zeros(6); off[axis] = delta
        vals.append(loss_at(off)[0])
    best = deltas[int(np.argmin(vals))]
    print(f"{name}: " + " ".join(f"{v:9.4f}" for v in vals) + f"   min at {best}")
_, parts = loss_at(np.zeros(6))
print("components at truth:", {k: round(v, 6) for k, v in parts.items()})
