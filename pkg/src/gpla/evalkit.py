"""Instruction and trajectory metrics, rollout evaluation, and PCA export."""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError
from .text import normalize

log = logging.getLogger(__name__)

REPORT_COLUMNS = ("model", "bleu", "bleu_std", "rouge1", "rouge1_std", "meteor", "meteor_std",
                  "mse", "mse_std", "mae", "mae_std", "cossim", "cossim_std", "ground_score")
ROLLOUT_FIELDS = ("episode_id", "step", "high_level", "generated_low_level", "chunk",
                  "gt_low_level", "gt_chunk")


def tokens(text: str | Sequence[str]) -> list[str]:
    if isinstance(text, str):
        return normalize(text).split()
    return [w for t in text for w in normalize(t).split()]


def _ngrams(words: Sequence[str], n: int) -> Counter:
    return Counter(tuple(words[i:i + n]) for i in range(len(words) - n + 1))


def bleu(hypothesis, reference, max_n: int = 4) -> float:
    """Sentence BLEU with add-one smoothing of zero counts for n >= 2.

    Orders longer than the hypothesis have no n-grams and are left out of the
    geometric mean rather than treated as zero precision.
    """
    hyp, ref = tokens(hypothesis), tokens(reference)
    if not hyp:
        log.warning("bleu: empty hypothesis scores 0")
        return 0.0
    if not ref:
        raise ContractError("bleu: empty reference")
    logs = []
    for n in range(1, max_n + 1):
        total = len(hyp) - n + 1
        if total <= 0:
            break
        h, r = _ngrams(hyp, n), _ngrams(ref, n)
        match = sum(min(c, r[g]) for g, c in h.items())
        if match == 0:
            if n == 1:
                return 0.0
            logs.append(math.log(1.0 / (total + 1)))
        else:
            logs.append(math.log(match / total))
    bp = 1.0 if len(hyp) > len(ref) else math.exp(1.0 - len(ref) / len(hyp))
    return float(min(1.0, bp * math.exp(sum(logs) / len(logs))))


def rouge1_f1(hypothesis, reference) -> float:
    hyp, ref = tokens(hypothesis), tokens(reference)
    if not hyp or not ref:
        raise ContractError("rouge1_f1: empty input")
    overlap = sum((Counter(hyp) & Counter(ref)).values())
    if overlap == 0:
        return 0.0
    p, r = overlap / len(hyp), overlap / len(ref)
    return 2 * p * r / (p + r)


def _align(hyp: Sequence[str], ref: Sequence[str]) -> list[tuple[int, int]]:
    """Exact-match alignment: each hypothesis word, left to right, takes the
    leftmost still-unused identical reference word."""
    used = [False] * len(ref)
    pairs = []
    for i, w in enumerate(hyp):
        for j, v in enumerate(ref):
            if not used[j] and v == w:
                used[j] = True
                pairs.append((i, j))
                break
    return pairs


def meteor(hypothesis, reference, alpha: float = 0.9, beta: float = 3.0, gamma: float = 0.5) -> float:
    hyp, ref = tokens(hypothesis), tokens(reference)
    if not hyp or not ref:
        raise ContractError("meteor: empty input")
    pairs = _align(hyp, ref)
    m = len(pairs)
    if m == 0:
        return 0.0
    p, r = m / len(hyp), m / len(ref)
    f_mean = p * r / (alpha * p + (1 - alpha) * r)  # = 10PR / (R + 9P)
    chunks = 1
    for (i0, j0), (i1, j1) in zip(pairs, pairs[1:]):
        if not (i1 == i0 + 1 and j1 == j0 + 1):
            chunks += 1
    penalty = gamma * (chunks / m) ** beta
    return float(f_mean * (1.0 - penalty))


def traj_metrics(predicted, target) -> tuple[float, float, float]:
    """(mse, mae, mean per-step cosine); steps where either vector is zero
    contribute a cosine of 0."""
    p = np.asarray(predicted, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ContractError(f"trajectory shapes differ: {p.shape} vs {t.shape}")
    if p.ndim != 2:
        raise ContractError(f"expected a (horizon, dims) array, got shape {p.shape}")
    diff = p - t
    mse = float(np.mean(diff * diff))
    mae = float(np.mean(np.abs(diff)))
    norms = np.linalg.norm(p, axis=1) * np.linalg.norm(t, axis=1)
    dots = np.sum(p * t, axis=1)
    cos = np.divide(dots, norms, out=np.zeros_like(dots), where=norms > 0)
    return mse, mae, float(np.mean(np.clip(cos, -1.0, 1.0)))


def pca_project(embeddings, k: int = 2, seed: int = 0, iters: int = 1000,
                tol: float = 1e-12) -> np.ndarray:
    """Project mean-centred rows onto the top-``k`` principal axes, found by
    power iteration with deflation on the covariance matrix."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or len(x) < k + 1:
        raise ContractError(f"pca_project needs at least {k + 1} vectors, got shape {x.shape}")
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / len(xc)
    scale = np.trace(cov)
    rng = np.random.default_rng(seed)
    axes = np.zeros((k, x.shape[1]))
    for a in range(k):
        v = rng.normal(size=x.shape[1])
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(iters):
            w = cov @ v
            norm = np.linalg.norm(w)
            if norm <= 1e-12 * max(scale, 1e-300):
                lam = 0.0
                break
            w /= norm
            done = np.linalg.norm(w - v) < tol
            v, lam = w, norm
            if done:
                break
        if lam <= 1e-10 * max(scale, 1e-300):
            log.warning("pca_project: input has rank < %d; axis %d is zero-padded", k, a + 1)
            continue
        v = v * np.sign(v[np.argmax(np.abs(v))])
        axes[a] = v
        cov = cov - lam * np.outer(v, v)
    return xc @ axes.T


# ---------------------------------------------------------------------------
# rollouts


@dataclass
class RolloutRow:
    episode_id: int
    step: int
    high_level: str
    generated_low_level: str
    chunk: np.ndarray
    gt_low_level: str
    gt_chunk: np.ndarray

    def to_json(self) -> dict:
        return {"episode_id": self.episode_id, "step": self.step, "high_level": self.high_level,
                "generated_low_level": self.generated_low_level,
                "chunk": np.asarray(self.chunk, np.float64).tolist(),
                "gt_low_level": self.gt_low_level,
                "gt_chunk": np.asarray(self.gt_chunk, np.float64).tolist()}


def _parse_row(obj, lineno: int) -> RolloutRow:
    if not isinstance(obj, dict):
        raise ContractError(f"rollout line {lineno}: expected a JSON object")
    missing = [f for f in ROLLOUT_FIELDS if f not in obj]
    if missing:
        raise ContractError(f"rollout line {lineno}: missing field(s) {', '.join(missing)}")
    try:
        chunk = np.asarray(obj["chunk"], dtype=np.float64)
        gt = np.asarray(obj["gt_chunk"], dtype=np.float64)
    except (TypeError, ValueError) as e:
        raise ContractError(f"rollout line {lineno}: chunk is not numeric ({e})") from None
    if chunk.ndim != 2 or chunk.shape != gt.shape:
        raise ContractError(f"rollout line {lineno}: chunk shape {chunk.shape} vs gt {gt.shape}")
    for f in ("high_level", "generated_low_level", "gt_low_level"):
        if not isinstance(obj[f], str):
            raise ContractError(f"rollout line {lineno}: {f} must be a string")
    if not isinstance(obj["episode_id"], int) or not isinstance(obj["step"], int):
        raise ContractError(f"rollout line {lineno}: episode_id and step must be integers")
    return RolloutRow(obj["episode_id"], obj["step"], obj["high_level"], obj["generated_low_level"],
                      chunk, obj["gt_low_level"], gt)


def read_rollouts(path) -> list[RolloutRow]:
    rows = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ContractError(f"rollout line {lineno}: invalid JSON ({e.msg})") from None
            rows.append(_parse_row(obj, lineno))
    if not rows:
        raise ContractError(f"rollout file {path} is empty")
    return rows


def write_rollouts(rows: Iterable[RolloutRow], path):
    with open(path, "w") as f:
        for r in rows:
            f.write(json.dumps(r.to_json()) + "\n")


@dataclass
class Report:
    model: str
    values: dict
    n: int

    def row(self) -> dict:
        return {"model": self.model, **{c: self.values[c] for c in REPORT_COLUMNS[1:]}}


def _mean_std(x) -> tuple[float, float]:
    x = np.asarray(x, dtype=np.float64)
    return float(np.mean(x)), float(np.std(x))


def evaluate_run(rollouts, grounding=None, samples=None, model: str = "model") -> Report:
    """Aggregate metrics over rollout rows (or a rollout file path).

    The grounding score needs the observation of each row, looked up in
    ``samples`` by (episode_id, step); without both it is reported as NaN.
    """
    rows = read_rollouts(rollouts) if isinstance(rollouts, (str, Path)) else list(rollouts)
    if not rows:
        raise ContractError("cannot evaluate an empty rollout set")
    text = np.array([(bleu(r.generated_low_level, r.gt_low_level),
                      rouge1_f1(r.generated_low_level, r.gt_low_level) if tokens(r.generated_low_level) else 0.0,
                      meteor(r.generated_low_level, r.gt_low_level) if tokens(r.generated_low_level) else 0.0)
                     for r in rows])
    traj = np.array([traj_metrics(r.chunk, r.gt_chunk) for r in rows])
    vals = {}
    for j, name in enumerate(("bleu", "rouge1", "meteor")):
        vals[name], vals[name + "_std"] = _mean_std(text[:, j])
    for j, name in enumerate(("mse", "mae", "cossim")):
        vals[name], vals[name + "_std"] = _mean_std(traj[:, j])
    vals["ground_score"] = math.nan
    if grounding is not None and samples is not None:
        lookup = {(int(e), int(s)): i for i, (e, s) in enumerate(zip(samples.episode_id, samples.step))}
        try:
            idx = np.array([lookup[(r.episode_id, r.step)] for r in rows])
        except KeyError as e:
            raise ContractError(f"rollout row {e.args[0]} has no matching sample") from None
        unk = grounding.tokenizer.vocab[grounding.tokenizer.unk_id]
        scores = grounding.score_batch(samples.float_images(idx), samples.effector[idx],
                                       np.stack([r.chunk for r in rows]).astype(np.float32),
                                       [r.generated_low_level or unk for r in rows])
        vals["ground_score"] = float(np.mean(scores))
    return Report(model, vals, len(rows))


def write_report(reports: Sequence[Report], path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for rep in reports:
            row = rep.row()
            w.writerow([row["model"]] + [repr(float(row[c])) for c in REPORT_COLUMNS[1:]])
