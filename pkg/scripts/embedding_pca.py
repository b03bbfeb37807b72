"""Project an `embed` export onto its top-2 principal axes, per modality.

usage: python3 scripts/embedding_pca.py RUN/embeddings.jsonl --out pca.csv
"""

import argparse
import csv
import json

import numpy as np

from gpla.evalkit import pca_project


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("embeddings")
    ap.add_argument("--out", default="embedding_pca.csv")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rows = [json.loads(line) for line in open(args.embeddings)]
    vectors = np.array([r["vector"] for r in rows])
    # one shared basis so the two modalities land in the same plane
    coords = pca_project(vectors, 2, seed=args.seed)
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["id", "modality", "pc1", "pc2"])
        for r, (x, y) in zip(rows, coords):
            w.writerow([r["id"], r["modality"], repr(float(x)), repr(float(y))])
    for mod in ("va", "text"):
        sel = np.array([r["modality"] == mod for r in rows])
        if sel.any():
            e = vectors[sel]
            s = e @ e.T
            off = s[~np.eye(len(s), dtype=bool)]
            print(f"{mod}: n={sel.sum()} mean positive off-diagonal cosine "
                  f"{np.maximum(off, 0).mean():.4f}")


if __name__ == "__main__":
    main()
