"""Action-conditioned grounding model.

Vision-action inputs and low-level instructions are mapped into one
L2-normalised embedding space. Each vision transformer block is followed
by a FiLM residual layer whose scale/shift come from a small
transformer over the action chunk (plus effector state). Training minimises
symmetric InfoNCE plus a penalty on positive off-diagonal similarities.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import synthenv
from . import tensorcore as T
from .errors import ConfigError, ContractError
from .synthenv import ActionChunk, Observation, SampleSet
from .tensorcore import nn, optim
from .tensorcore.tensor import Tensor
from .text import Tokenizer

log = logging.getLogger(__name__)


@dataclass
class GroundingConfig:
    d_model: int = 64
    n_film_layers: int = 4
    # multiplier applied to cosine logits at init, i.e. tau_0 = 1 / initial_logit_scale
    initial_logit_scale: float = 0.1
    gamma_div: float = 0.01
    horizon: int = 8
    patch_size: int = 8
    image_size: int = 64
    depth: int = 2
    n_heads: int = 4
    mlp_ratio: int = 2
    max_text_len: int = 24
    delta_max: float = synthenv.DELTA_MAX

    def __post_init__(self):
        for name in ("d_model", "n_film_layers", "initial_logit_scale", "horizon", "patch_size",
                     "image_size", "depth", "n_heads", "max_text_len", "delta_max"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"grounding.{name} must be positive, got {getattr(self, name)}")
        if self.gamma_div < 0:
            raise ConfigError(f"grounding.gamma_div must be >= 0, got {self.gamma_div}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"patch_size {self.patch_size} must divide image_size {self.image_size}")


class GroundingModel(nn.Module):
    def __init__(self, config: GroundingConfig, tokenizer: Tokenizer, seed: int = 0):
        rng = np.random.default_rng(seed)
        c = config
        d = c.d_model
        self.config = c
        self.tokenizer = tokenizer

        # patch embedding only; the vision blocks are interleaved with FiLM below
        self.vision = nn.PatchEncoder(c.image_size, c.patch_size, d, 0, c.n_heads, rng)

        self.action_in = nn.Linear(2, d, rng)
        self.effector_in = nn.Linear(2, d, rng)
        self.action_pos = nn.param(rng.normal(0.0, 0.02, size=(c.horizon + 1, d)))
        self.action_encoder = nn.Transformer(d, c.depth, c.n_heads, rng, c.mlp_ratio)

        self.vision_blocks = [nn.TransformerBlock(d, c.n_heads, rng, c.mlp_ratio)
                              for _ in range(c.n_film_layers)]
        self.film_mix = [nn.Linear(d, d, rng, init_scale=0.5) for _ in range(c.n_film_layers)]
        self.film = [nn.FiLM(d, d, rng) for _ in range(c.n_film_layers)]
        self.va_norm = nn.LayerNorm(d)
        self.vision_projection = nn.Linear(d, d, rng)

        self.text_embed = nn.Embedding(len(tokenizer), d, rng)
        self.text_pos = nn.param(rng.normal(0.0, 0.02, size=(c.max_text_len, d)))
        self.text_encoder = nn.Transformer(d, c.depth, c.n_heads, rng, c.mlp_ratio)
        self.text_projection = nn.Linear(d, d, rng)

        self.log_tau = nn.param(np.array(math.log(1.0 / c.initial_logit_scale)))

    # -- encoders ----------------------------------------------------------
    def encode_actions(self, chunks: np.ndarray, effector: np.ndarray) -> Tensor:
        chunks = np.asarray(chunks)
        if chunks.ndim != 3 or chunks.shape[1:] != (self.config.horizon, 2):
            raise T.DimensionError(
                f"action chunk shape {chunks.shape[1:]} != ({self.config.horizon}, 2)")
        steps = self.action_in(chunks / self.config.delta_max)
        eff = self.effector_in(np.asarray(effector))
        x = T.concat([steps, eff.reshape(eff.shape[0], 1, -1)], axis=1) + self.action_pos
        return T.mean(self.action_encoder(x), axis=1)

    def va_features(self, images: np.ndarray, effector: np.ndarray, chunks: np.ndarray,
                    condition: bool = True) -> Tensor:
        """Pre-normalisation vision-action features, (B, d_model).

        With ``condition=False`` the FiLM modulation is skipped, giving the
        unconditioned vision pathway.
        """
        h = self.vision(images)
        a = self.encode_actions(chunks, effector) if condition else None
        for block, mix, film in zip(self.vision_blocks, self.film_mix, self.film):
            h = block(h)
            z = mix(h)
            if condition:
                z = film(z, a)
            h = h + T.gelu(z)
        return self.vision_projection(T.mean(self.va_norm(h), axis=1))

    def encode_va_batch(self, images, effector, chunks, condition: bool = True) -> Tensor:
        return T.l2_normalize(self.va_features(images, effector, chunks, condition))

    def text_features(self, texts) -> Tensor:
        ids, valid = self.tokenizer.batch(texts, self.config.max_text_len)
        return self._text_from_ids(ids, valid)

    def _text_from_ids(self, ids: np.ndarray, valid: np.ndarray) -> Tensor:
        L = ids.shape[1]
        x = self.text_embed(ids) + self.text_pos[:L]
        x = self.text_encoder(x, nn.padding_mask(valid))
        return self.text_projection(nn.masked_mean(x, valid))

    def encode_text_batch(self, texts) -> Tensor:
        return T.l2_normalize(self.text_features(texts))

    def tau(self) -> Tensor:
        return T.exp(self.log_tau)

    # -- single-item API -----------------------------------------------------
    def encode_va(self, observation: Observation, chunk: ActionChunk) -> np.ndarray:
        with T.no_grad():
            out = self.encode_va_batch(observation.image[None], observation.effector_state[None],
                                       np.asarray(chunk.deltas)[None])
        return out.data[0]

    def encode_text(self, low_level: str) -> np.ndarray:
        with T.no_grad():
            return self.encode_text_batch([low_level]).data[0]

    def score_batch(self, images, effector, chunks, texts, batch_size: int = 256) -> np.ndarray:
        """Cosine similarity between VA and text embeddings, row by row."""
        out = []
        with T.no_grad():
            for s in range(0, len(texts), batch_size):
                sl = np.s_[s:s + batch_size]
                va = self.encode_va_batch(images[sl], effector[sl], chunks[sl]).data
                tx = self.encode_text_batch(list(texts[sl])).data
                out.append(np.sum(va.astype(np.float64) * tx, axis=1))
        return np.clip(np.concatenate(out), -1.0, 1.0) if out else np.zeros(0)


def grounding_score(model: GroundingModel, observation: Observation, chunk: ActionChunk,
                    low_level: str) -> float:
    va = model.encode_va(observation, chunk).astype(np.float64)
    tx = model.encode_text(low_level).astype(np.float64)
    return float(np.clip(va @ tx, -1.0, 1.0))


# ---------------------------------------------------------------------------
# losses


def similarity_logits(va: Tensor, t: Tensor, tau) -> Tensor:
    return T.matmul(va, T.transpose(t)) / tau


def contrastive_loss(va, t, tau=1.0) -> Tensor:
    """Symmetric InfoNCE over an in-batch similarity matrix; row i of ``va``
    and row i of ``t`` form the positive pair. Rows are assumed unit-norm so
    the dot product is the cosine. Each direction is averaged over the batch."""
    va, t = T.astensor(va), T.astensor(t)
    n = va.shape[0]
    if n < 2:
        raise ContractError("contrastive loss needs at least two pairs")
    if t.shape != va.shape:
        raise T.DimensionError(f"embedding batches differ: {va.shape} vs {t.shape}")
    logits = similarity_logits(va, t, tau)
    diag = np.arange(n)
    l_va2t = -T.mean(T.take_last(T.log_softmax(logits, axis=1), diag))
    l_t2va = -T.mean(T.take_last(T.transpose(T.log_softmax(logits, axis=0)), diag))
    return 0.5 * (l_va2t + l_t2va)


def diversity_loss(va, t) -> Tensor:
    """Mean positive off-diagonal self-similarity, summed over both modalities."""
    va, t = T.astensor(va), T.astensor(t)
    n = va.shape[0]
    if n < 2:
        raise ContractError("diversity loss needs at least two rows")
    off = 1.0 - np.eye(n, dtype=va.dtype)
    total = 0.0
    for e in (va, t):
        s = T.matmul(e, T.transpose(e))
        total = total + T.sum(T.relu(s) * off)
    return total / (n * (n - 1))


def total_loss(va, t, tau, gamma_div: float) -> tuple[Tensor, Tensor, Tensor]:
    lc = contrastive_loss(va, t, tau)
    ld = diversity_loss(va, t)
    return lc + gamma_div * ld, lc, ld


def retrieval_accuracy(va: np.ndarray, t: np.ndarray) -> float:
    """Top-1 text->VA retrieval accuracy within one batch."""
    sims = np.asarray(t, np.float64) @ np.asarray(va, np.float64).T
    return float(np.mean(np.argmax(sims, axis=1) == np.arange(len(sims))))


def mean_positive_offdiag(e: np.ndarray) -> float:
    """Mean of max(0, cos) over off-diagonal pairs of one embedding batch."""
    e = np.asarray(e, np.float64)
    s = e @ e.T
    n = len(s)
    return float(np.maximum(s, 0)[~np.eye(n, dtype=bool)].mean())


# ---------------------------------------------------------------------------
# training


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class GroundingTrainConfig:
    steps: int = 50_000
    lr: float = 1e-4
    micro_batch: int = 64
    n_micro: int = 4
    clip_norm: float | None = 1.0
    augment: bool = True
    log_every: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.lr < 0:
            raise ConfigError("grounding_train.steps and grounding_train.lr must be >= 0")
        if self.micro_batch < 2 or self.n_micro < 1 or self.log_every < 1:
            raise ConfigError("grounding_train.micro_batch must be >= 2; n_micro and log_every >= 1")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError("grounding_train.clip_norm must be > 0")


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)

    def append(self, **row):
        self.rows.append(row)

    def column(self, key: str) -> np.ndarray:
        return np.array([r[key] for r in self.rows])


def sample_unique_batch(low_level: list[str], size: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of ``size`` samples whose captions are pairwise distinct, so no
    in-batch negative is secretly a positive."""
    order = rng.permutation(len(low_level))
    seen, picked = set(), []
    for i in order:
        cap = low_level[i]
        if cap in seen:
            continue
        seen.add(cap)
        picked.append(int(i))
        if len(picked) == size:
            break
    if len(picked) < 2:
        raise ContractError("need at least two distinct captions to form a contrastive batch")
    return np.array(picked)


def batch_arrays(samples: SampleSet, idx, rng=None, augment: bool = False):
    images = samples.float_images(idx)
    chunks = samples.chunks[idx]
    if augment:
        images, chunks = synthenv.augment_batch(images, chunks, rng)
    return images, samples.effector[idx], chunks, [samples.low_level[i] for i in idx]


def batch_loss(model: GroundingModel, images, effector, chunks, texts, gamma_div: float):
    va = model.encode_va_batch(images, effector, chunks)
    tx = model.encode_text_batch(texts)
    loss, lc, ld = total_loss(va, tx, model.tau(), gamma_div)
    return loss, lc, ld, va, tx


def train_grounding(model: GroundingModel, samples: SampleSet, cfg: GroundingTrainConfig,
                    checkpoint_path=None, callback=None) -> TrainLog:
    if len(samples) == 0:
        raise ContractError("grounding training needs a nonempty dataset")
    rng = np.random.default_rng(cfg.seed)
    opt = optim.for_module(model, kind="adam", lr=cfg.lr)
    acc = optim.GradAccumulator(opt, cfg.n_micro, cfg.clip_norm)
    gamma = model.config.gamma_div
    history = TrainLog()
    last_good = model.state_dict()
    for step in range(cfg.steps):
        window = []
        for _ in range(cfg.n_micro):
            idx = sample_unique_batch(samples.low_level, cfg.micro_batch, rng)
            images, eff, chunks, texts = batch_arrays(samples, idx, rng, cfg.augment)
            loss, lc, ld, va, tx = batch_loss(model, images, eff, chunks, texts, gamma)
            if not np.isfinite(loss.item()):
                model.load_state_dict(last_good)
                if checkpoint_path is not None:
                    save_grounding(model, checkpoint_path)
                raise NonFiniteLossError(f"non-finite grounding loss at step {step}")
            acc.backward(loss)
            window.append((loss.item(), lc.item(), ld.item(), retrieval_accuracy(va.data, tx.data)))
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            w = np.mean(window, axis=0)
            history.append(step=step, loss=float(w[0]), contrastive=float(w[1]),
                           diversity=float(w[2]), batch_acc=float(w[3]),
                           tau=float(model.tau().item()))
            log.info("grounding step %d loss %.4f acc %.3f tau %.3f", step, w[0], w[3],
                     model.tau().item())
            last_good = model.state_dict()
            if callback is not None:
                callback(step, model, history)
    return history


def evaluate_retrieval(model: GroundingModel, samples: SampleSet, batch_size: int = 64,
                       n_batches: int = 10, seed: int = 0) -> dict:
    """Held-out in-batch text->VA top-1 retrieval over unique-caption batches."""
    rng = np.random.default_rng(seed)
    hits, n = 0, 0
    offdiag_va, offdiag_t = [], []
    with T.no_grad():
        for _ in range(n_batches):
            idx = sample_unique_batch(samples.low_level, batch_size, rng)
            images, eff, chunks, texts = batch_arrays(samples, idx)
            va = model.encode_va_batch(images, eff, chunks).data
            tx = model.encode_text_batch(texts).data
            sims = tx.astype(np.float64) @ va.astype(np.float64).T
            hits += int(np.sum(np.argmax(sims, axis=1) == np.arange(len(idx))))
            n += len(idx)
            offdiag_va.append(mean_positive_offdiag(va))
            offdiag_t.append(mean_positive_offdiag(tx))
    return {"accuracy": hits / n, "hits": hits, "queries": n, "batch_size": batch_size,
            "pos_offdiag_va": float(np.mean(offdiag_va)), "pos_offdiag_t": float(np.mean(offdiag_t))}


# ---------------------------------------------------------------------------
# persistence


def save_grounding(model: GroundingModel, path, optimizer=None, meta: dict | None = None):
    meta = dict(meta or {})
    meta.update(kind="grounding", config=asdict(model.config), vocab=model.tokenizer.vocab)
    T.checkpoint.save(path, model.state_dict(), optimizer, meta)


def load_grounding(path) -> GroundingModel:
    params, _, meta = T.checkpoint.load(path)
    if meta.get("kind") != "grounding":
        raise ConfigError(f"{path} is not a grounding checkpoint")
    tok = Tokenizer(meta["vocab"][4:])
    model = GroundingModel(GroundingConfig(**meta["config"]), tok)
    model.load_state_dict(params)
    return model
