import numpy as np, tempfile, logging, time, sys
logging.basicConfig(level=logging.ERROR)
from blockslam import synthetic as syn
from blockslam import dataio as dio
from blockslam.geometry import Intrinsics, compose
from blockslam.pipeline import SlamSystem

n_frames = int(sys.argv[1]) if len(sys.argv) > 1 else 30
K = Intrinsics(fx=35.0, fy=35.0, cx=23.5, cy=17.5, width=48, height=36)
scene = syn.make_room_scene(6.0, 4.0, 3.0)
traj = syn.orbit_trajectory(scene, n_frames, sweep=0.8)
td = tempfile.mkdtemp()
syn.generate_synthetic(scene, traj, K, td, seed=3)
seq = dio.load_tum(td)
cfg = dio.load_config(overrides={
    "block_size": 2.5, "far": 8.0, "keep_fraction": 1.0,
    "smooth_points": 64, "seed": 1,
})
t0 = time.perf_counter()
s = SlamSystem(seq, cfg)
result = s.run()
print(f"run {time.perf_counter()-t0:.0f}s blocks={result.n_blocks} kfs={len(s.db)}")
est = [compose(traj[0], p) for p in result.poses]
err = np.array([np.linalg.norm(e.translation - g.translation) for e, g in zip(est, traj)])
print("translation err (cm):", np.round(err * 100, 2))
print(f"mean {err.mean()*100:.2f}cm  max {err.max()*100:.2f}cm")
