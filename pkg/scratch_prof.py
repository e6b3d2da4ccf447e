import numpy as np, tempfile, logging, time, cProfile, pstats
logging.basicConfig(level=logging.ERROR)
from blockslam import synthetic as syn
from blockslam import dataio as dio
from blockslam.geometry import Intrinsics
from blockslam.pipeline import SlamSystem

K = Intrinsics(fx=35.0, fy=35.0, cx=23.5, cy=17.5, width=48, height=36)
scene = syn.make_room_scene(6.0, 4.0, 3.0)
traj = syn.orbit_trajectory(scene, 8, sweep=0.1)
td = tempfile.mkdtemp()
syn.generate_synthetic(scene, traj, K, td, seed=3)
seq = dio.load_tum(td)
cfg = dio.load_config(overrides={
    "block_size": 2.5, "far": 8.0, "keep_fraction": 1.0,
    "smooth_points": 64, "seed": 1, "iters_first": 10,
})
s = SlamSystem(seq, cfg)
s.init_first_frame(seq.frames[0])

prof = cProfile.Profile()
prof.enable()
t0 = time.perf_counter()
for f in seq.frames[1:6]:
    s.track_frame(f)
s.map_step(5)
dt = time.perf_counter() - t0
prof.disable()
print(f"5 frames tracked + 5 map iters: {dt:.1f}s")
stats = pstats.Stats(prof)
stats.sort_stats("cumulative").print_stats(22)
