import numpy as np, tempfile, logging, time
logging.basicConfig(level=logging.ERROR)
from blockslam import synthetic as syn
from blockslam import dataio as dio
from blockslam.geometry import Intrinsics, compose, invert, se3_log
from blockslam.pipeline import SlamSystem

K = Intrinsics(fx=35.0, fy=35.0, cx=23.5, cy=17.5, width=48, height=36)
scene = syn.make_room_scene(6.0, 4.0, 3.0)
traj = syn.orbit_trajectory(scene, 75, sweep=0.8)
td = tempfile.mkdtemp()
syn.generate_synthetic(scene, traj, K, td, seed=3)
seq = dio.load_tum(td)
cfg = dio.load_config(overrides={
    "block_size": 2.5, "far": 8.0, "keep_fraction": 1.0,
    "smooth_points": 64, "seed": 1
})
s = SlamSystem(seq, cfg)
gt_anchor = [compose(invert(traj[0]), p) for p in traj]

def err_of(pose, i):
    return np.linalg.norm(pose.translation - gt_anchor[i].translation) * 100

s.init_first_frame(seq.frames[0])
for f in seq.frames[1:21]:
    pre = s.tracker.motion_model()
    pose = s.track_frame(f)
    post_track = err_of(s.tracker.poses[f.index], f.index)
    if f.index % cfg.map_every == 0:
        s.map_step(cfg.iters_mapping)
    kf_errs = [err_of(r.pose, r.frame_id) for r in s.db.records]
    print(f"f{f.index:02d}: motion-model err {err_of(pre, f.index):5.2f}  "
          f"tracked {post_track:5.2f}  kf errs {' '.join(f'{e:.1f}' for e in kf_errs)}",
          flush=True)
