"""Final loss of compressed vs lossless communication on a fixed honest swarm.

    python scripts/convergence.py --peers 4 --rounds 100 --seeds 0 1 2
"""

import argparse
import dataclasses
import json

from sparseloco.config import CompressionSection, ChurnSection, load_config
from sparseloco.swarm import Swarm


def final_loss(base, seed, peers, rounds, compression):
    churn = ChurnSection(initial_behaviors=["honest"] * peers, p_leave=0.0, join_rate=0.0)
    cfg = dataclasses.replace(base, seed=seed, compression=compression, churn=churn).validate()
    return Swarm(cfg).run(rounds)[-1].train_loss


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default="logistic-default")
    ap.add_argument("--peers", type=int, default=4)
    ap.add_argument("--rounds", type=int, default=100)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--topk", type=int, nargs="+", default=[16, 64, 256])
    args = ap.parse_args()

    base = load_config(args.config)
    for seed in args.seeds:
        lossless = final_loss(base, seed, args.peers, args.rounds, CompressionSection(chunk=4096, topk=4096, quant_bits=0))
        row = {"seed": seed, "lossless": lossless}
        for k in args.topk:
            loss = final_loss(base, seed, args.peers, args.rounds, CompressionSection(chunk=4096, topk=k, quant_bits=2))
            row[f"k={k}"] = loss
            row[f"k={k}/lossless"] = loss / lossless
        print(json.dumps(row))


if __name__ == "__main__":
    main()
