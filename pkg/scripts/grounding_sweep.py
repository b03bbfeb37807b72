"""Train grounding models over a small grid and report held-out retrieval.

usage: python3 scripts/grounding_sweep.py --episodes 400 --steps 3000 \
           --lr 1e-3 3e-4 --logit-scale 0.1 10 --out sweep.csv
"""

import argparse
import csv
import itertools
import time

from gpla import grounding as G
from gpla import synthenv
from gpla.text import Tokenizer


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--episodes", type=int, default=400)
    ap.add_argument("--steps", type=int, default=3000)
    ap.add_argument("--lr", type=float, nargs="+", default=[1e-3])
    ap.add_argument("--logit-scale", type=float, nargs="+", default=[10.0])
    ap.add_argument("--gamma-div", type=float, nargs="+", default=[0.01])
    ap.add_argument("--micro-batch", type=int, default=64)
    ap.add_argument("--eval-every", type=int, default=250)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="grounding_sweep.csv")
    args = ap.parse_args()

    episodes = synthenv.generate_dataset(args.episodes, seed=args.seed)
    tr, va, _ = synthenv.split_episodes(episodes, (0.8, 0.1, 0.1), seed=args.seed)
    train, val = synthenv.SampleSet.from_episodes(tr), synthenv.SampleSet.from_episodes(va)
    print(f"train {len(train)} samples, val {len(val)} samples", flush=True)

    rows = []
    for lr, scale, gamma in itertools.product(args.lr, args.logit_scale, args.gamma_div):
        model = G.GroundingModel(G.GroundingConfig(initial_logit_scale=scale, gamma_div=gamma),
                                 Tokenizer(), seed=args.seed)
        start = time.time()

        def evaluate(step, m, hist):
            if step % args.eval_every:
                return
            r = G.evaluate_retrieval(m, val, args.micro_batch, n_batches=8, seed=args.seed)
            row = {"lr": lr, "logit_scale": scale, "gamma_div": gamma, "step": step,
                   "train_loss": hist.rows[-1]["loss"], "tau": hist.rows[-1]["tau"],
                   "val_acc": r["accuracy"], "pos_offdiag_va": r["pos_offdiag_va"],
                   "seconds": round(time.time() - start, 1)}
            rows.append(row)
            print(row, flush=True)

        cfg = G.GroundingTrainConfig(steps=args.steps, lr=lr, micro_batch=args.micro_batch, n_micro=1,
                                     log_every=args.eval_every, seed=args.seed)
        G.train_grounding(model, train, cfg, callback=evaluate)

    with open(args.out, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    best = max(rows, key=lambda r: r["val_acc"])
    print("best", best, "chance", 1 / args.micro_batch, "ratio", best["val_acc"] * args.micro_batch)


if __name__ == "__main__":
    main()
