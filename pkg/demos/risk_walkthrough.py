"""How the dangerousness score is put together, on hand-made lateral traces."""
import numpy as np

from lcgen.risk import EpisodeRisk, calibrate_thresholds, dangerousness, lateral_jerk, traj_smoothness

DT = 0.1

# a smooth lane change and a jittery one
t = np.arange(60) * DT
smooth = 3.7 / (1 + np.exp(-(t - 3.0) * 2))
jittery = smooth + 0.05 * np.sin(t * 25)
print(f"smooth:  jerk {lateral_jerk(smooth, DT):8.3f}  roughness {traj_smoothness(smooth):.5f}")
print(f"jittery: jerk {lateral_jerk(jittery, DT):8.3f}  roughness {traj_smoothness(jittery):.5f}")

# thresholds come from expert motion: here, smooth changes of varying duration
expert = []
for i, k in enumerate(np.linspace(0.8, 3.0, 40)):
    y = 3.7 / (1 + np.exp(-(t - 3.0) * k))
    expert.append(EpisodeRisk.from_lateral(f"expert{i}", y, DT))
th = calibrate_thresholds(expert)
print("thresholds", th.to_dict())

generated = [EpisodeRisk.from_lateral("calm", smooth, DT),
             EpisodeRisk.from_lateral("rough", jittery, DT, collided=True)]
for agg in ("mean", "median"):
    rep = dangerousness(generated, th, aggregation=agg)
    print(f"{agg:6s}  C {rep.c_coll:.2f}  psi_a {rep.psi_a:.2f}  psi_t {rep.psi_t:.2f}  D_risk {rep.d_risk:.3f}")
