"""How often a copier is selected, and how often the assigned-vs-random check catches it.

The eval batch size is the lever: small validator batches make the check noisy.

    python scripts/copier_experiment.py --seeds 5 --eval-batch-size 64 512
"""

import argparse
import dataclasses
import json

from sparseloco.config import load_config
from sparseloco.swarm import Swarm


def run(base, seed, honest, rounds, burn_in):
    churn = dataclasses.replace(base.churn, initial_behaviors=["honest"] * honest + ["copier"], p_leave=0.0, join_rate=0.0)
    sw = Swarm(dataclasses.replace(base, seed=seed, churn=churn).validate())
    copier = next(p for p, peer in sw.peers.items() if peer.behavior == "copier")
    selected = counted = caught = evaluated = 0
    for r in range(rounds):
        log = sw.step()
        rec = sw.validator_log[-1]
        if copier in rec.scores:
            evaluated += 1
            caught += "assigned-vs-random" in rec.failed.get(copier, [])
        if r >= burn_in:
            counted += 1
            selected += copier in log.selected_ids
    return selected, counted, caught, evaluated


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default="logistic-default")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--honest", type=int, default=23)
    ap.add_argument("--rounds", type=int, default=30)
    ap.add_argument("--burn-in", type=int, default=10)
    ap.add_argument("--eval-batch-size", type=int, nargs="+", default=[512])
    args = ap.parse_args()

    base = load_config(args.config)
    for size in args.eval_batch_size:
        cfg = dataclasses.replace(base, gauntlet=dataclasses.replace(base.gauntlet, eval_batch_size=size))
        totals = [0, 0, 0, 0]
        for seed in range(args.seeds):
            for i, v in enumerate(run(cfg, seed, args.honest, args.rounds, args.burn_in)):
                totals[i] += v
        sel, cnt, caught, ev = totals
        print(json.dumps({
            "eval_batch_size": size,
            "copier_selected_fraction": sel / cnt,
            "copier_caught_when_evaluated": caught / ev if ev else None,
        }))


if __name__ == "__main__":
    main()
