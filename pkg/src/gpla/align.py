"""Grounded preference alignment of the high-level LM.

Each step samples (task, observation) pairs, draws several instruction
candidates per pair, decodes their action chunks, scores every candidate with
the frozen grounding model, and applies a reference-free, length-normalised
preference loss (SimPO) to the best/worst candidate of each pair.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensorcore as T
from .errors import ConfigError, ContractError
from .grounding import GroundingModel
from .policy import Candidate, Policy, answer_ids, build_prompt, generate_candidates_batch, \
    lm_cross_entropy, score_sequences
from .synthenv import SampleSet
from .tensorcore import optim
from .tensorcore.tensor import Tensor

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "mean_g_chosen", "mean_g_rejected", "pairs_used", "simpo_loss", "ce_loss")


@dataclass
class GplaConfig:
    n_s: int = 5
    n_i: int = 100
    batch: int = 64
    lr: float = 1e-7
    beta_simpo: float = 2.0
    gamma_simpo: float = 0.5
    mix_weight: float = 0.0
    temperature: float = 1.0
    clip_norm: float | None = 1.0
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_s < 2:
            raise ConfigError(f"gpla.n_s must be >= 2, got {self.n_s}")
        if self.n_i < 0 or self.batch < 1:
            raise ConfigError("gpla.n_i must be >= 0 and gpla.batch >= 1")
        if self.lr < 0 or self.temperature <= 0 or self.beta_simpo <= 0:
            raise ConfigError("gpla.lr must be >= 0; temperature and beta_simpo must be > 0")
        if self.gamma_simpo < 0 or self.mix_weight < 0:
            raise ConfigError("gpla.gamma_simpo and gpla.mix_weight must be >= 0")


@dataclass
class PreferencePair:
    prompt: list[int]
    chosen: Candidate
    rejected: Candidate
    g_chosen: float
    g_rejected: float
    high_level: str = ""
    image: np.ndarray | None = field(default=None, repr=False)

    def to_json(self) -> dict:
        return {"prompt": self.high_level, "chosen": self.chosen.low_level,
                "rejected": self.rejected.low_level, "g_chosen": self.g_chosen,
                "g_rejected": self.g_rejected}


def select_pair(candidates: Sequence[Candidate], scores: Sequence[float], prompt=(),
                high_level: str = "", image=None) -> PreferencePair | None:
    """Best vs worst candidate; ties resolve to the lowest index. Returns
    None when the two picks have the same text."""
    if len(candidates) != len(scores):
        raise ContractError(f"{len(candidates)} candidates but {len(scores)} scores")
    if len(candidates) < 2:
        raise ContractError("need at least two candidates")
    s = np.asarray(scores, dtype=np.float64)
    c, r = int(np.argmax(s)), int(np.argmin(s))
    if candidates[c].low_level == candidates[r].low_level:
        return None
    return PreferencePair(list(prompt), candidates[c], candidates[r], float(s[c]), float(s[r]),
                          high_level, image)


def simpo_from_logprobs(logp_c, n_c, logp_r, n_r, beta: float, gamma: float) -> Tensor:
    """-log sigmoid(beta*logp_c/n_c - beta*logp_r/n_r - gamma), elementwise."""
    if beta <= 0 or gamma < 0:
        raise ContractError("simpo requires beta > 0 and gamma >= 0")
    n_c = np.asarray(n_c, dtype=np.float64)
    n_r = np.asarray(n_r, dtype=np.float64)
    if np.any(n_c <= 0) or np.any(n_r <= 0):
        raise ContractError("token_count must be positive")
    logp_c, logp_r = T.astensor(logp_c), T.astensor(logp_r)
    r_c = logp_c * np.asarray(beta / n_c, dtype=logp_c.dtype)
    r_r = logp_r * np.asarray(beta / n_r, dtype=logp_r.dtype)
    return -T.log_sigmoid(r_c - r_r - gamma)


def simpo_scalar(logp_c: float, n_c: int, logp_r: float, n_r: int, beta: float, gamma: float) -> float:
    """Float64 evaluation of the same formula, used as an independent check."""
    if n_c <= 0 or n_r <= 0:
        raise ContractError("token_count must be positive")
    m = beta * logp_c / n_c - beta * logp_r / n_r - gamma
    return float(np.logaddexp(0.0, -m))


def pair_logprobs(pairs: Sequence[PreferencePair], lm) -> tuple[Tensor, np.ndarray, Tensor, np.ndarray]:
    """Teacher-forced log-probabilities of chosen and rejected answers under ``lm``."""
    prompts = [p.prompt for p in pairs]
    images = None
    if lm.prefix is not None:
        images = np.stack([p.image for p in pairs])
    both, counts = score_sequences(lm, prompts + prompts,
                                   [p.chosen.ids for p in pairs] + [p.rejected.ids for p in pairs],
                                   None if images is None else np.concatenate([images, images]))
    n = len(pairs)
    return both[:n], counts[:n], both[n:], counts[n:]


def simpo_loss(pairs: PreferencePair | Sequence[PreferencePair], lm, beta: float = 2.0,
               gamma: float = 0.5) -> Tensor:
    """Mean SimPO loss over preference pairs with log-probabilities re-scored
    under the current LM (so gradients flow into it)."""
    if isinstance(pairs, PreferencePair):
        pairs = [pairs]
    if not pairs:
        raise ContractError("no preference pairs")
    lc, nc, lr_, nr = pair_logprobs(pairs, lm)
    return T.mean(simpo_from_logprobs(lc, nc, lr_, nr, beta, gamma))


def _score_candidates(grounding: GroundingModel, groups, images, effector) -> list[np.ndarray]:
    unk = grounding.tokenizer.vocab[grounding.tokenizer.unk_id]
    flat_img, flat_eff, flat_chunk, flat_text = [], [], [], []
    for b, group in enumerate(groups):
        for cand in group:
            flat_img.append(b)
            flat_chunk.append(cand.chunk.deltas)
            flat_text.append(cand.low_level or unk)
    idx = np.asarray(flat_img)
    scores = grounding.score_batch(images[idx], effector[idx], np.stack(flat_chunk), flat_text)
    out, k = [], 0
    for group in groups:
        out.append(scores[k:k + len(group)])
        k += len(group)
    return out


@dataclass
class GplaLog:
    rows: list[dict] = field(default_factory=list)

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=LOG_COLUMNS, lineterminator="\n")
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def build_pairs(policy: Policy, grounding: GroundingModel, samples: SampleSet, idx, cfg: GplaConfig,
                rng) -> list[PreferencePair]:
    """Candidate generation, grounding scores and pair selection for one batch."""
    images = samples.float_images(idx)
    effector = samples.effector[idx]
    hl = [samples.high_level[i] for i in idx]
    groups = generate_candidates_batch(policy, hl, images, effector, cfg.n_s, cfg.temperature, rng)
    scores = _score_candidates(grounding, groups, images, effector)
    tok = policy.lm.tokenizer
    pairs = []
    for b, (group, s) in enumerate(zip(groups, scores)):
        pair = select_pair(group, s, build_prompt(hl[b], tok), hl[b], images[b])
        if pair is not None:
            pairs.append(pair)
    return pairs


def gpla_train(policy: Policy, grounding: GroundingModel, samples: SampleSet, cfg: GplaConfig,
               log_path=None, pairs_path=None) -> GplaLog:
    """Run the alignment loop, updating only ``policy.lm`` in place.

    Steps whose batch yields no usable pair still count towards ``n_i``.
    """
    if len(samples) == 0:
        raise ContractError("alignment needs a nonempty dataset")
    lm = policy.lm
    rng = np.random.default_rng(cfg.seed)
    opt = optim.for_module(lm, kind="adamw", lr=cfg.lr, weight_decay=cfg.weight_decay)
    history = GplaLog()
    pair_file = open(pairs_path, "w") if pairs_path is not None else None
    try:
        for step in range(cfg.n_i):
            idx = rng.integers(0, len(samples), size=cfg.batch)
            pairs = build_pairs(policy, grounding, samples, idx, cfg, rng)
            row = {"step": step, "mean_g_chosen": math.nan, "mean_g_rejected": math.nan,
                   "pairs_used": len(pairs), "simpo_loss": math.nan, "ce_loss": math.nan}
            if not pairs:
                log.warning("gpla step %d: every candidate set was degenerate; skipping", step)
                history.rows.append(row)
                continue
            loss = simpo_loss(pairs, lm, cfg.beta_simpo, cfg.gamma_simpo)
            row["simpo_loss"] = loss.item()
            if cfg.mix_weight > 0:
                images = samples.float_images(idx) if lm.prefix is not None else None
                ce = lm_cross_entropy(lm, [samples.high_level[i] for i in idx],
                                      [samples.low_level[i] for i in idx], images)
                row["ce_loss"] = ce.item()
                loss = ce + cfg.mix_weight * loss
            if not np.isfinite(loss.item()):
                raise FloatingPointError(f"non-finite alignment loss at step {step}")
            loss.backward()
            opt.step(cfg.clip_norm)
            row["mean_g_chosen"] = float(np.mean([p.g_chosen for p in pairs]))
            row["mean_g_rejected"] = float(np.mean([p.g_rejected for p in pairs]))
            history.rows.append(row)
            if pair_file is not None:
                for p in pairs:
                    pair_file.write(json.dumps({"step": step, **p.to_json()}) + "\n")
            log.info("gpla step %d pairs %d simpo %.4f g+ %.3f g- %.3f", step, len(pairs),
                     row["simpo_loss"], row["mean_g_chosen"], row["mean_g_rejected"])
    finally:
        if pair_file is not None:
            pair_file.close()
    if log_path is not None:
        history.write_csv(Path(log_path))
    return history


def combined_loss(policy: Policy, pairs, samples: SampleSet, idx, cfg: GplaConfig):
    """(total, ce, simpo) for the regulariser variant, evaluated once."""
    lm = policy.lm
    images = samples.float_images(idx) if lm.prefix is not None else None
    ce = lm_cross_entropy(lm, [samples.high_level[i] for i in idx],
                          [samples.low_level[i] for i in idx], images)
    sp = simpo_loss(pairs, lm, cfg.beta_simpo, cfg.gamma_simpo)
    return ce + cfg.mix_weight * sp, ce, sp


def greedy_grounding(policy: Policy, grounding: GroundingModel, samples: SampleSet,
                     batch_size: int = 256) -> tuple[np.ndarray, list[str], np.ndarray]:
    """Greedy instruction per sample, its decoded chunk, and its grounding score."""
    scores, texts, chunks = [], [], []
    for s in range(0, len(samples), batch_size):
        idx = np.arange(s, min(s + batch_size, len(samples)))
        groups = generate_candidates_batch(policy, [samples.high_level[i] for i in idx],
                                           samples.float_images(idx), samples.effector[idx], 1,
                                           greedy=True)
        sc = _score_candidates(grounding, groups, samples.float_images(idx), samples.effector[idx])
        scores.extend(float(x[0]) for x in sc)
        texts.extend(g[0].low_level for g in groups)
        chunks.extend(g[0].chunk.deltas for g in groups)
    return np.asarray(scores), texts, np.asarray(chunks)


__all__ = ["GplaConfig", "PreferencePair", "select_pair", "simpo_loss", "simpo_from_logprobs",
           "simpo_scalar", "gpla_train", "build_pairs", "combined_loss", "greedy_grounding",
           "answer_ids", "LOG_COLUMNS"]
