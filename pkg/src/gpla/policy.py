"""Hierarchical policy: a small high-level LM that rewrites a task into a
sub-task instruction, and a low-level decoder that turns (image, effector,
instructions) into an action chunk."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import synthenv
from . import tensorcore as T
from .errors import ConfigError, ContractError
from .synthenv import ActionChunk, Observation, SampleSet
from .tensorcore import nn, optim
from .tensorcore.tensor import Tensor
from .text import Tokenizer, build_prompt, render_prompt  # noqa: F401  (re-exported)

log = logging.getLogger(__name__)


@dataclass
class LMConfig:
    d_model: int = 64
    depth: int = 2
    n_heads: int = 4
    mlp_ratio: int = 2
    max_new_tokens: int = 24
    max_positions: int = 128
    vision_prefix: bool = False
    image_size: int = 64
    prefix_patch: int = 16

    def __post_init__(self):
        for name in ("d_model", "depth", "n_heads", "max_new_tokens", "max_positions", "image_size",
                     "prefix_patch"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"lm.{name} must be positive, got {getattr(self, name)}")
        if self.image_size % self.prefix_patch:
            raise ConfigError("lm.prefix_patch must divide image_size")


class HighLevelLM(nn.Module):
    """Decoder-only transformer over prompt + answer tokens.

    With ``vision_prefix`` the image is patch-embedded into a short token
    prefix that every text position can attend to.
    """

    def __init__(self, config: LMConfig, tokenizer: Tokenizer, seed: int = 0):
        rng = np.random.default_rng(seed)
        c = config
        self.config = c
        self.tokenizer = tokenizer
        self.embed = nn.Embedding(len(tokenizer), c.d_model, rng)
        self.pos = nn.param(rng.normal(0.0, 0.02, size=(c.max_positions, c.d_model)))
        self.prefix = (nn.PatchEncoder(c.image_size, c.prefix_patch, c.d_model, 0, c.n_heads, rng)
                       if c.vision_prefix else None)
        self.body = nn.Transformer(c.d_model, c.depth, c.n_heads, rng, c.mlp_ratio)
        self.head = nn.Linear(c.d_model, len(tokenizer), rng, init_scale=0.1)

    @property
    def n_prefix(self) -> int:
        if self.prefix is None:
            return 0
        return (self.config.image_size // self.config.prefix_patch) ** 2

    def logits(self, ids: np.ndarray, valid: np.ndarray, images: np.ndarray | None = None) -> Tensor:
        """(B, L) ids with validity mask -> (B, L, V) next-token logits."""
        ids = np.asarray(ids)
        valid = np.asarray(valid, dtype=bool)
        B, L = ids.shape
        positions = np.clip(np.cumsum(valid, axis=1) - 1, 0, None)
        if positions.max(initial=0) >= self.config.max_positions:
            raise T.DimensionError(f"sequence of {positions.max() + 1} tokens exceeds max_positions")
        x = self.embed(ids) + T.getitem(self.pos, positions)
        keys = valid
        if self.prefix is not None:
            if images is None:
                raise ContractError("this LM was built with a vision prefix; images are required")
            x = T.concat([self.prefix(images), x], axis=1)
            keys = np.concatenate([np.ones((B, self.n_prefix), bool), valid], axis=1)
        n = keys.shape[1]
        mask = nn.causal_mask(n)[None, None] & keys[:, None, None, :]
        h = self.body(x, mask)
        if self.prefix is not None:
            h = h[:, self.n_prefix:]
        return self.head(h)

    def stepper(self, images: np.ndarray | None = None) -> "_CachedStepper":
        return _CachedStepper(self, images)


class _CachedStepper:
    """Inference-only next-token logits with a key/value cache.

    The first call encodes the whole (prefix +) prompt; each later call is
    assumed to append exactly one column and only that column is computed.
    Matches ``HighLevelLM.logits(...)[:, -1]`` up to float rounding.
    """

    def __init__(self, lm: HighLevelLM, images):
        self.lm = lm
        self.images = images
        self.kv = None
        self.keys = None
        self.n_valid = None

    def _blocks(self, x: np.ndarray, mask: np.ndarray) -> np.ndarray:
        body = self.lm.body
        B, L, d = x.shape
        for i, blk in enumerate(body.blocks):
            h = blk.attn.n_heads
            a = blk.ln1(x)
            qkv = blk.attn.qkv(a).data.reshape(B, L, 3, h, d // h).transpose(2, 0, 3, 1, 4)
            q, k, v = qkv[0], qkv[1], qkv[2]
            if self.kv[i] is not None:
                k = np.concatenate([self.kv[i][0], k], axis=2)
                v = np.concatenate([self.kv[i][1], v], axis=2)
            self.kv[i] = (k, v)
            att = T.masked_attention(q, k, v, mask).data
            x = x + blk.attn.out(att.transpose(0, 2, 1, 3).reshape(B, L, d)).data
            x = x + blk.mlp(blk.ln2(x)).data
        return self.lm.head(body.ln_f(x)[:, -1]).data

    def __call__(self, ids: np.ndarray, valid: np.ndarray) -> np.ndarray:
        lm = self.lm
        with T.no_grad():
            if self.kv is None:
                self.kv = [None] * len(lm.body.blocks)
                B = ids.shape[0]
                self.n_valid = valid.sum(axis=1)
                positions = np.clip(np.cumsum(valid, axis=1) - 1, 0, None)
                x = (lm.embed(ids) + T.getitem(lm.pos, positions)).data
                keys = valid
                if lm.prefix is not None:
                    if self.images is None:
                        raise ContractError("this LM was built with a vision prefix; images are required")
                    x = np.concatenate([lm.prefix(self.images).data, x], axis=1)
                    keys = np.concatenate([np.ones((B, lm.n_prefix), bool), valid], axis=1)
                self.keys = keys
                mask = nn.causal_mask(keys.shape[1])[None, None] & keys[:, None, None, :]
                return self._blocks(x, mask)
            new_valid = valid[:, -1]
            self.n_valid = self.n_valid + new_valid
            if self.n_valid.max() > lm.config.max_positions:
                raise T.DimensionError("sequence exceeds max_positions")
            pos = np.clip(self.n_valid - 1, 0, None)
            x = (lm.embed(ids[:, -1:]) + T.getitem(lm.pos, pos[:, None])).data
            self.keys = np.concatenate([self.keys, new_valid[:, None]], axis=1)
            return self._blocks(x, self.keys[:, None, None, :])


# ---------------------------------------------------------------------------
# sequence packing


def pack(prompts: Sequence[Sequence[int]], answers: Sequence[Sequence[int]] | None, pad_id: int):
    """Left-pad prompts so they all end at the same column, then append
    right-padded answers. Returns ids, valid, and the first answer column."""
    B = len(prompts)
    P = max(len(p) for p in prompts)
    A = max((len(a) for a in answers), default=0) if answers is not None else 0
    ids = np.full((B, P + A), pad_id, dtype=np.int64)
    valid = np.zeros((B, P + A), dtype=bool)
    for i, p in enumerate(prompts):
        ids[i, P - len(p):P] = p
        valid[i, P - len(p):P] = True
        if answers is not None:
            a = answers[i]
            ids[i, P:P + len(a)] = a
            valid[i, P:P + len(a)] = True
    return ids, valid, P


def answer_ids(text: str, tokenizer: Tokenizer, max_new: int) -> list[int]:
    """Answer tokens followed by <eos>, truncated to ``max_new``."""
    ids = tokenizer.encode(text)
    if not ids:
        raise ContractError("cannot use an empty instruction as a target")
    return (ids + [tokenizer.eos_id])[:max_new]


def score_sequences(lm: HighLevelLM, prompts, answers, images=None) -> tuple[Tensor, np.ndarray]:
    """Teacher-forced total log-probability of each answer given its prompt.

    Returns a (B,) tensor (differentiable) and the per-row token counts.
    """
    if any(len(a) == 0 for a in answers):
        raise ContractError("answer sequences must contain at least one token")
    ids, valid, P = pack(prompts, answers, lm.tokenizer.pad_id)
    logp = T.log_softmax(lm.logits(ids[:, :-1], valid[:, :-1], images), axis=-1)
    # column t predicts token t+1
    target = ids[:, P:]
    picked = T.take_last(logp[:, P - 1:], target)
    mask = valid[:, P:].astype(picked.dtype)
    return T.sum(picked * mask, axis=1), valid[:, P:].sum(axis=1)


def lm_cross_entropy(lm: HighLevelLM, high_level: Sequence[str], low_level: Sequence[str],
                     images=None) -> Tensor:
    """Mean next-token cross-entropy over answer tokens (including <eos>)."""
    tok = lm.tokenizer
    prompts = [build_prompt(h, tok) for h in high_level]
    answers = [answer_ids(s, tok, lm.config.max_new_tokens) for s in low_level]
    total, counts = score_sequences(lm, prompts, answers, images)
    return -T.sum(total) / float(np.sum(counts))


# ---------------------------------------------------------------------------
# sampling


@dataclass
class Generation:
    text: str
    sum_logprob: float
    token_count: int
    truncated: bool
    ids: list[int]

    def __iter__(self):
        # unpacks as (text, sum_logprob, token_count)
        return iter((self.text, self.sum_logprob, self.token_count))


def sample_tokens(next_logits: Callable[[np.ndarray, np.ndarray], np.ndarray], prompts, eos_id: int,
                  pad_id: int, max_new: int, rng: np.random.Generator | None,
                  temperature: float = 1.0, greedy: bool = False) -> list[tuple[list[int], float, bool]]:
    """Batched autoregressive sampling.

    ``next_logits(ids, valid)`` returns unscaled (B, V) logits for the next
    token. Sampling uses ``softmax(logits / temperature)`` while the recorded
    log-probability is always under the unscaled distribution.
    """
    if not greedy and not temperature > 0:
        raise ContractError(f"temperature must be > 0, got {temperature}")
    if not greedy and rng is None:
        raise ContractError("stochastic sampling needs an rng")
    ids, valid, _ = pack(prompts, None, pad_id)
    B = len(prompts)
    out = [[] for _ in range(B)]
    logp = np.zeros(B)
    done = np.zeros(B, dtype=bool)
    for _ in range(max_new):
        z = np.asarray(next_logits(ids, valid), dtype=np.float64)
        lsm = z - z.max(axis=1, keepdims=True)
        lsm = lsm - np.log(np.exp(lsm).sum(axis=1, keepdims=True))
        if greedy:
            nxt = np.argmax(z, axis=1)
        else:
            s = z / temperature
            p = np.exp(s - s.max(axis=1, keepdims=True))
            p /= p.sum(axis=1, keepdims=True)
            u = rng.random(B)
            nxt = np.minimum((np.cumsum(p, axis=1) < u[:, None]).sum(axis=1), z.shape[1] - 1)
        col = np.where(done, pad_id, nxt)
        for i in np.flatnonzero(~done):
            out[i].append(int(nxt[i]))
            logp[i] += lsm[i, nxt[i]]
        ids = np.concatenate([ids, col[:, None]], axis=1)
        valid = np.concatenate([valid, ~done[:, None]], axis=1)
        done |= nxt == eos_id
        if done.all():
            break
    return [(out[i], float(logp[i]), bool(out[i][-1] != eos_id)) for i in range(B)]


def generate(lm: HighLevelLM, high_level: Sequence[str], rng=None, temperature: float = 1.0,
             greedy: bool = False, images=None) -> list[Generation]:
    tok = lm.tokenizer
    prompts = [build_prompt(h, tok) for h in high_level]

    rows = sample_tokens(lm.stepper(images), prompts, tok.eos_id, tok.pad_id, lm.config.max_new_tokens,
                         rng, temperature, greedy)
    return [Generation(tok.decode(ids), lp, len(ids), trunc, ids) for ids, lp, trunc in rows]


def sample_low_level(lm: HighLevelLM, high_level: str, temperature: float = 1.0, rng=None,
                     greedy: bool = False, image: np.ndarray | None = None) -> Generation:
    """Sample one instruction. The result unpacks as (text, sum_logprob, token_count);
    ``truncated`` is set when no <eos> was produced within the budget."""
    images = None if image is None else np.asarray(image)[None]
    return generate(lm, [high_level], rng, temperature, greedy, images)[0]


# ---------------------------------------------------------------------------
# low-level decoder


@dataclass
class DecoderConfig:
    d_model: int = 64
    depth: int = 2
    n_heads: int = 4
    mlp_ratio: int = 2
    patch_size: int = 8
    image_size: int = 64
    horizon: int = synthenv.HORIZON
    max_text_len: int = 24
    delta_max: float = synthenv.DELTA_MAX

    def __post_init__(self):
        for name in ("d_model", "depth", "n_heads", "patch_size", "image_size", "horizon",
                     "max_text_len", "delta_max"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"decoder.{name} must be positive, got {getattr(self, name)}")
        if self.image_size % self.patch_size:
            raise ConfigError("decoder.patch_size must divide image_size")


class LowLevelDecoder(nn.Module):
    """Image patches, both instructions, the effector state and a readout
    token go through one transformer; the readout feeds a linear chunk head."""

    def __init__(self, config: DecoderConfig, tokenizer: Tokenizer, seed: int = 0):
        rng = np.random.default_rng(seed)
        c = config
        d = c.d_model
        self.config = c
        self.tokenizer = tokenizer
        self.patches = nn.PatchEncoder(c.image_size, c.patch_size, d, 0, c.n_heads, rng)
        self.text_embed = nn.Embedding(len(tokenizer), d, rng)
        self.text_pos = nn.param(rng.normal(0.0, 0.02, size=(2 * c.max_text_len, d)))
        self.segment = nn.param(rng.normal(0.0, 0.02, size=(2, d)))
        self.effector_in = nn.Linear(2, d, rng)
        self.readout = nn.param(rng.normal(0.0, 0.02, size=(1, d)))
        self.body = nn.Transformer(d, c.depth, c.n_heads, rng, c.mlp_ratio)
        self.head = nn.Linear(d, c.horizon * 2, rng, init_scale=0.1)

    def raw(self, images, effector, high_level: Sequence[str], low_level: Sequence[str]) -> Tensor:
        """Unclamped (B, horizon, 2) prediction, used as the regression output."""
        c = self.config
        images = np.asarray(images)
        B = images.shape[0]
        hi, hv = self.tokenizer.batch(high_level, c.max_text_len)
        lo, lv = self.tokenizer.batch(low_level, c.max_text_len)
        ids = np.concatenate([hi, lo], axis=1)
        tv = np.concatenate([hv, lv], axis=1)
        seg = np.concatenate([np.zeros(hi.shape[1], np.int64), np.ones(lo.shape[1], np.int64)])
        pos = np.concatenate([np.arange(hi.shape[1]), c.max_text_len + np.arange(lo.shape[1])])
        text = self.text_embed(ids) + self.text_pos[pos] + self.segment[seg]
        eff = self.effector_in(np.asarray(effector)).reshape(B, 1, -1)
        ro = T.broadcast_to(self.readout, (B, 1, c.d_model))
        x = T.concat([ro, eff, self.patches(images), text], axis=1)
        keys = np.concatenate([np.ones((B, 2 + self.patches.pos.shape[0]), bool), tv], axis=1)
        h = self.body(x, nn.padding_mask(keys))
        out = self.head(h[:, 0]) * c.delta_max
        return out.reshape(B, c.horizon, 2)

    def predict(self, images, effector, high_level, low_level) -> np.ndarray:
        with T.no_grad():
            out = self.raw(images, effector, high_level, low_level).data
        return np.clip(out, -self.config.delta_max, self.config.delta_max)


def decode_chunk(dec: LowLevelDecoder, observation: Observation, effector, high_level: str,
                 low_level: str) -> ActionChunk:
    """Deterministic chunk prediction clamped to ``[-delta_max, delta_max]``."""
    eff = observation.effector_state if effector is None else effector
    out = dec.predict(observation.image[None], np.asarray(eff, np.float32)[None], [high_level],
                      [low_level])
    return ActionChunk(out[0])


def decoder_mse(dec: LowLevelDecoder, images, effector, high_level, low_level, chunks) -> Tensor:
    diff = dec.raw(images, effector, high_level, low_level) - np.asarray(chunks, np.float32)
    return T.mean(diff * diff)


# ---------------------------------------------------------------------------
# supervised training


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class SupervisedConfig:
    lm_steps: int = 1500
    dec_steps: int = 15000
    lm_lr: float = 1e-5
    dec_lr: float = 1e-5
    batch: int = 64
    clip_norm: float | None = 1.0
    weight_decay: float = 0.01
    augment: bool = False
    log_every: int = 50
    seed: int = 0

    def __post_init__(self):
        if min(self.lm_steps, self.dec_steps) < 0 or min(self.lm_lr, self.dec_lr) < 0:
            raise ConfigError("sup step counts and learning rates must be >= 0")
        if self.batch < 1 or self.log_every < 1 or self.weight_decay < 0:
            raise ConfigError("sup.batch and sup.log_every must be >= 1; weight_decay >= 0")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError("sup.clip_norm must be > 0")


@dataclass
class SupervisedLog:
    lm: list[dict] = field(default_factory=list)
    dec: list[dict] = field(default_factory=list)


def _fit(module, loss_fn, steps, lr, cfg: SupervisedConfig, rng, rows, tag, checkpoint=None):
    opt = optim.for_module(module, kind="adamw", lr=lr, weight_decay=cfg.weight_decay)
    last_good = module.state_dict()
    for step in range(steps):
        loss = loss_fn(rng)
        value = loss.item()
        if not np.isfinite(value):
            module.load_state_dict(last_good)
            if checkpoint is not None:
                checkpoint(module)
            raise NonFiniteLossError(f"non-finite {tag} loss at step {step}")
        loss.backward()
        opt.step(cfg.clip_norm)
        if step % cfg.log_every == 0 or step == steps - 1:
            rows.append({"step": step, "loss": value})
            log.info("%s step %d loss %.5f", tag, step, value)
            last_good = module.state_dict()


def train_supervised(lm: HighLevelLM | None, dec: LowLevelDecoder | None, samples: SampleSet,
                     cfg: SupervisedConfig, checkpoint=None) -> SupervisedLog:
    """Next-token CE for the LM and chunk MSE for the decoder (trained
    independently, ground-truth instructions fed to the decoder)."""
    if len(samples) == 0:
        raise ContractError("supervised training needs a nonempty dataset")
    history = SupervisedLog()
    root = np.random.SeedSequence(cfg.seed)
    lm_rng, dec_rng = (np.random.default_rng(s) for s in root.spawn(2))
    n = len(samples)

    def batch_idx(rng):
        return rng.choice(n, size=min(cfg.batch, n), replace=n < cfg.batch)

    if lm is not None and cfg.lm_steps > 0:
        def lm_loss(rng):
            idx = batch_idx(rng)
            images = samples.float_images(idx) if lm.prefix is not None else None
            return lm_cross_entropy(lm, [samples.high_level[i] for i in idx],
                                    [samples.low_level[i] for i in idx], images)
        _fit(lm, lm_loss, cfg.lm_steps, cfg.lm_lr, cfg, lm_rng, history.lm, "lm",
             None if checkpoint is None else (lambda m: checkpoint("lm", m)))

    if dec is not None and cfg.dec_steps > 0:
        def dec_loss(rng):
            idx = batch_idx(rng)
            images, chunks = samples.float_images(idx), samples.chunks[idx]
            if cfg.augment:
                images, chunks = synthenv.augment_batch(images, chunks, rng)
            return decoder_mse(dec, images, samples.effector[idx],
                               [samples.high_level[i] for i in idx],
                               [samples.low_level[i] for i in idx], chunks)
        _fit(dec, dec_loss, cfg.dec_steps, cfg.dec_lr, cfg, dec_rng, history.dec, "decoder",
             None if checkpoint is None else (lambda m: checkpoint("decoder", m)))
    return history


# ---------------------------------------------------------------------------
# candidates


@dataclass
class Candidate:
    low_level: str
    chunk: ActionChunk
    sum_logprob: float
    token_count: int
    ids: list[int] = field(default_factory=list)
    truncated: bool = False


@dataclass
class Policy:
    """The hierarchical pair π_θ = (high-level LM, low-level decoder)."""

    lm: HighLevelLM
    decoder: LowLevelDecoder

    def lm_images(self, images):
        return images if self.lm.prefix is not None else None


def generate_candidates_batch(policy: Policy, high_level: Sequence[str], images: np.ndarray,
                              effector: np.ndarray, n: int, temperature: float = 1.0, rng=None,
                              greedy: bool = False) -> list[list[Candidate]]:
    """``n`` candidates for each of B (high-level, observation) inputs."""
    if n < 1:
        raise ContractError("need at least one candidate")
    B = len(high_level)
    rep = np.repeat(np.arange(B), n)
    hl = [high_level[i] for i in rep]
    imgs = np.asarray(images)[rep]
    gens = generate(policy.lm, hl, rng, temperature, greedy, policy.lm_images(imgs))
    # empty generations (immediate <eos>) cannot be encoded; give the decoder a placeholder
    texts = [g.text if g.text else policy.lm.tokenizer.vocab[policy.lm.tokenizer.unk_id]
             for g in gens]
    chunks = policy.decoder.predict(imgs, np.asarray(effector)[rep], hl, texts)
    out = [[] for _ in range(B)]
    for k, (g, b) in enumerate(zip(gens, rep)):
        out[b].append(Candidate(g.text, ActionChunk(chunks[k]), g.sum_logprob, g.token_count,
                                g.ids, g.truncated))
    return out


def generate_candidates(policy: Policy, high_level: str, observation: Observation, n: int,
                        temperature: float = 1.0, rng=None, greedy: bool = False) -> list[Candidate]:
    if n < 2:
        raise ContractError(f"need n >= 2 candidates, got {n}")
    return generate_candidates_batch(policy, [high_level], observation.image[None],
                                     observation.effector_state[None], n, temperature, rng,
                                     greedy)[0]


# ---------------------------------------------------------------------------
# persistence


def save_module(module, kind: str, path, optimizer=None, meta: dict | None = None):
    meta = dict(meta or {})
    meta.update(kind=kind, config=asdict(module.config), vocab=module.tokenizer.vocab)
    T.checkpoint.save(path, module.state_dict(), optimizer, meta)


def load_module(path, kind: str):
    params, _, meta = T.checkpoint.load(path)
    if meta.get("kind") != kind:
        raise ConfigError(f"{path} holds a {meta.get('kind')!r} checkpoint, expected {kind!r}")
    tok = Tokenizer(meta["vocab"][4:])
    if kind == "lm":
        module = HighLevelLM(LMConfig(**meta["config"]), tok)
    elif kind == "decoder":
        module = LowLevelDecoder(DecoderConfig(**meta["config"]), tok)
    else:
        raise ConfigError(f"unknown module kind {kind!r}")
    module.load_state_dict(params)
    return module
