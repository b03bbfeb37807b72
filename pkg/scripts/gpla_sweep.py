"""Sweep the alignment learning rate on a finished pipeline run.

Loads the grounding model and supervised policy from a run directory
produced by the CLI, runs the alignment loop once per learning rate, and
reports the greedy grounding score and pipeline MSE on val and test prompts.

usage: python3 scripts/gpla_sweep.py RUN_DIR --config configs/desk.toml \
           --lr 1e-7 1e-6 1e-5 --prompts 300 --out gpla_sweep.csv
"""

import argparse
import csv
import dataclasses
import time
from pathlib import Path

import numpy as np
from scipy import stats

from gpla import align as A
from gpla import grounding as G
from gpla import policy as P
from gpla import synthenv
from gpla.config import load_config


def held_out(root, split, cfg, n, seed):
    samples = synthenv.SampleSet.from_episodes(synthenv.load_dataset(root / "gen" / split),
                                               cfg.data.idle_threshold, cfg.grounding.horizon,
                                               cfg.data.image_size)
    rng = np.random.default_rng(seed)
    return samples, samples.subset(np.sort(rng.choice(len(samples), min(n, len(samples)), replace=False)))


def evaluate(policy, grounding, samples):
    scores, _, chunks = A.greedy_grounding(policy, grounding, samples)
    return scores, float(np.mean((chunks - samples.chunks) ** 2))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("run", type=Path)
    ap.add_argument("--config", type=Path, default=None)
    ap.add_argument("--lr", type=float, nargs="+", default=[1e-7, 1e-6, 1e-5])
    ap.add_argument("--prompts", type=int, default=300)
    ap.add_argument("--out", default="gpla_sweep.csv")
    args = ap.parse_args()

    cfg = load_config(args.config)
    g = G.load_grounding(args.run / "train-grounding" / "grounding.ckpt")
    lm = P.load_module(args.run / "train-sup" / "lm.ckpt", "lm")
    dec = P.load_module(args.run / "train-sup" / "decoder.ckpt", "decoder")
    train, _ = held_out(args.run, "train", cfg, 1, 0)
    _, val = held_out(args.run, "val", cfg, args.prompts, 1)
    _, test = held_out(args.run, "test", cfg, args.prompts, 2)

    base = P.Policy(lm, dec)
    v0, _ = evaluate(base, g, val)
    t0, m0 = evaluate(base, g, test)
    rows = []
    for lr in args.lr:
        pol = P.Policy(lm.clone(), dec)
        start = time.time()
        A.gpla_train(pol, g, train, dataclasses.replace(cfg.gpla, lr=lr, seed=cfg.stream("sampling/gpla")))
        v1, _ = evaluate(pol, g, val)
        t1, m1 = evaluate(pol, g, test)
        d = t1 - t0
        p = stats.wilcoxon(d[d != 0], alternative="greater").pvalue if np.any(d != 0) else 1.0
        row = {"lr": lr, "val_score": v1.mean(), "val_gain": v1.mean() - v0.mean(),
               "test_score": t1.mean(), "test_gain": d.mean(), "wilcoxon_p": p,
               "mse_ratio": m1 / m0, "seconds": round(time.time() - start, 1)}
        rows.append(row)
        print(row, flush=True)

    with open(args.out, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    best = max(rows, key=lambda r: r["val_score"])
    print("selected on val:", best)


if __name__ == "__main__":
    main()
