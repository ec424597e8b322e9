"""Train the adversary on the straight-road pursuit scenarios and show the learning signal.

A replayed ego drives ahead; the policy controls a follower. The mean
adversarial score should rise between the first and last 50 iterations.

    python demos/pursuit_smoke.py [seed] [iterations]
"""
import sys

import numpy as np

from lcgen.synthetic import pursuit_catalog
from lcgen.trainer import TrainerConfig, train


def main(seed=0, iterations=200):
    cfg = TrainerConfig(embed_dim=16, n_heads=1, hidden=(32, 32), iterations=iterations, seed=seed)
    catalog = pursuit_catalog(16, 0)

    def log(row):
        if row["iteration"] % 20 == 0:
            print(f"iter {row['iteration']:4d}  adv {row['mean_adv_reward']:7.3f}  "
                  f"W {row['w_distance']:.3f}  collisions {row['collision_rate']:.2f}")

    arts = train(cfg, catalog, log=log)
    adv = np.array([r["mean_adv_reward"] for r in arts.metrics])
    k = min(50, len(adv) // 2)
    print(f"first {k}: {adv[:k].mean():.3f}   last {k}: {adv[-k:].mean():.3f}")


if __name__ == "__main__":
    args = [int(a) for a in sys.argv[1:3]]
    main(*args)
