"""Mean active and contributing peers under the default churn model, per seed.

    python scripts/participation_sweep.py --seeds 0 1 2 --rounds 500
"""

import argparse
import dataclasses
import json

import numpy as np

from sparseloco.config import load_config
from sparseloco.swarm import Swarm


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default="logistic-default")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--rounds", type=int, default=500)
    ap.add_argument("--join-rate", type=float, default=None)
    ap.add_argument("--p-leave", type=float, default=None)
    args = ap.parse_args()

    base = load_config(args.config)
    churn = base.churn
    if args.join_rate is not None:
        churn = dataclasses.replace(churn, join_rate=args.join_rate)
    if args.p_leave is not None:
        churn = dataclasses.replace(churn, p_leave=args.p_leave)
    for seed in args.seeds:
        cfg = dataclasses.replace(base, seed=seed, churn=churn).validate()
        logs = Swarm(cfg).run(args.rounds)
        print(json.dumps({
            "seed": seed,
            "mean_active": float(np.mean([log.active_peers for log in logs])),
            "mean_contributing": float(np.mean([log.contributing_peers for log in logs])),
            "stalled": sum(log.stalled for log in logs),
            "final_loss": logs[-1].train_loss,
        }))


if __name__ == "__main__":
    main()
