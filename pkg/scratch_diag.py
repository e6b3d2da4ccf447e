import numpy as np, tempfile, logging
logging.basicConfig(level=logging.ERROR)
from blockslam import autodiff as ad
from blockslam import synthetic as syn
from blockslam import dataio as dio
from blockslam import pose_tape as pt
from blockslam.geometry import Intrinsics, compose, invert, se3_exp, se3_log
from blockslam.pipeline import SlamSystem
from blockslam.blocks import compute_tau, maybe_allocate
from blockslam.renderer import sample_depth_batch

K = Intrinsics(fx=35.0, fy=35.0, cx=23.5, cy=17.5, width=48, height=36)
scene = syn.make_room_scene(6.0, 4.0, 3.0)
traj = syn.orbit_trajectory(scene, 30, sweep=0.8)
td = tempfile.mkdtemp()
syn.generate_synthetic(scene, traj, K, td, seed=3)
seq = dio.load_tum(td)
cfg = dio.load_config(overrides={
    "block_size": 2.5, "far": 8.0, "n_m": 2048, "n_a": 512,
    "iters_first": 1, "smooth_points": 64, "seed": 1, "keep_fraction": 1.0,
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
s.map_step(120, optimize_poses=False)
print("mapped. losses:", {k: round(v, 6) for k, v in s._last_losses.items()}, flush=True)

# landscape scan with one big fixed batch
f10 = seq.frames[10]
true_pose = gt_anchor[10]
rngt = np.random.default_rng(5)
n = 1536
us = rngt.integers(0, K.width, n); vs = rngt.integers(0, K.height, n)
od = f10.depth[vs, us]; oc = f10.color[vs, us]
depths, slot_valid = sample_depth_batch(od, cfg.near, cfg.far, cfg.n1, cfg.n2, cfg.truncation, rngt)
dirs_cam = np.stack([(us-K.cx)/K.fx, (vs-K.cy)/K.fy, np.ones(n)], axis=1)

def loss_at(offset):
    pose = compose(se3_exp(offset), true_pose)
    xi = ad.Tensor(np.zeros(6), requires_grad=False)
    o, d = pt.apply_increment_rays(xi, pose, dirs_cam)
    return s._losses_from_batch(o, d, depths, slot_valid, oc, od, train_field=False, with_smooth=False).item()

for axis, name in [(0, "tx"), (1, "ty"), (2, "tz"), (4, "ry")]:
    vals = []
    deltas = (-0.03, -0.01, -0.003, 0.0, 0.003, 0.01, 0.03)
    for delta in deltas:
        off = np.zeros(6); off[axis] = delta
        vals.append(loss_at(off))
    best = deltas[int(np.argmin(vals))]
    print(f"{name}: " + " ".join(f"{v:8.4f}" for v in vals) + f"   min at {best}", flush=True)

# pose pull test
cur = compose(se3_exp(np.array([0.01, -0.005, 0.007, 0.002, -0.002, 0.001])), true_pose)
xi = s.store.register("poses", "probe", np.zeros(6))
rng2 = np.random.default_rng(9)
errs = []
for it in range(10):
    uu = rng2.integers(0, K.width, cfg.n_t); vv = rng2.integers(0, K.height, cfg.n_t)
    od2 = f10.depth[vv, uu]; oc2 = f10.color[vv, uu]
    dps, sv = sample_depth_batch(od2, cfg.near, cfg.far, cfg.n1, cfg.n2, cfg.truncation, rng2)
    dc = np.stack([(uu-K.cx)/K.fx, (vv-K.cy)/K.fy, np.ones(cfg.n_t)], axis=1)
    tape = ad.Tape()
    def fwd():
        o, d = pt.apply_increment_rays(xi, cur, dc)
        return s._losses_from_batch(o, d, dps, sv, oc2, od2, train_field=False, with_smooth=False)
    loss = ad.run_forward(tape, fwd)
    ad.backward(tape, loss)
    s.store.adam_step({"poses": cfg.lr_pose_tracking})
    s.store.zero_grad()
    cur = pt.bake(xi.data, cur)
    xi.data[:] = 0
    errs.append(np.linalg.norm(se3_log(compose(cur, invert(true_pose)))))
print("pull test errs (cm-units):", " ".join(f"{e*100:.2f}" for e in errs))
