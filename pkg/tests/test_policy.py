import numpy as np
import pytest
from hypothesis import given, strategies as st

from gpla import policy as P
from gpla import tensorcore as T
from gpla.errors import ContractError
from gpla.tensorcore import gradcheck
from gpla.text import PROMPT_TEMPLATE, Tokenizer, build_prompt, render_prompt

GOLDEN_PROMPT = ("System: You are controlling a robotic agent. Your task is to put all the blocks "
                 "in a vertical line.\nUser: What should the robot do next?\nAnswer:")


@pytest.fixture(scope="module")
def tok():
    return Tokenizer()


@pytest.fixture(scope="module")
def lm(tok):
    return P.HighLevelLM(P.LMConfig(), tok, seed=1)


@pytest.fixture(scope="module")
def vlm(tok):
    return P.HighLevelLM(P.LMConfig(vision_prefix=True), tok, seed=2)


@pytest.fixture(scope="module")
def dec(tok):
    return P.LowLevelDecoder(P.DecoderConfig(), tok, seed=3)


# ---------------------------------------------------------------------------
# tokenizer and prompt


def test_prompt_golden_bytes():
    assert render_prompt("put all the blocks in a vertical line") == GOLDEN_PROMPT
    assert PROMPT_TEMPLATE.format(task="X").encode() == (
        b"System: You are controlling a robotic agent. Your task is to X.\n"
        b"User: What should the robot do next?\nAnswer:")


def test_prompt_contains_task_after_marker(tok):
    text = render_prompt("put all the blocks in a vertical line")
    assert text.split("Your task is to ")[1].startswith("put all the blocks in a vertical line.")
    assert build_prompt("put all the blocks in a vertical line", tok) == \
        build_prompt("put all the blocks in a vertical line", tok)


@pytest.mark.parametrize("bad", ["", "   "])
def test_empty_high_level_rejected(bad, tok):
    with pytest.raises(ContractError):
        build_prompt(bad, tok)


def test_prompt_tokens_are_in_vocabulary(tok):
    ids = build_prompt("make a 'parallelogram' shape out of all the blocks", tok)
    assert tok.unk_id not in ids
    assert ids[0] == tok.bos_id


@given(st.lists(st.sampled_from(Tokenizer().vocab[4:]), min_size=1, max_size=20))
def test_round_trip_on_vocabulary_text(words):
    t = Tokenizer()
    text = " ".join(words)
    assert t.decode(t.encode(text)) == text


def test_unknown_words_map_to_unk(tok):
    assert tok.encode("zebra") == [tok.unk_id]


def test_batch_pads_and_masks(tok):
    ids, valid = tok.batch(["push the red star", "push"])
    assert ids.shape == (2, 4) and valid.sum(axis=1).tolist() == [4, 1]
    assert (ids[1, 1:] == tok.pad_id).all()


# ---------------------------------------------------------------------------
# LM


def test_initial_cross_entropy_is_near_uniform(lm, small_samples):
    idx = np.arange(32)
    ce = P.lm_cross_entropy(lm, [small_samples.high_level[i] for i in idx],
                            [small_samples.low_level[i] for i in idx]).item()
    assert abs(ce - np.log(len(lm.tokenizer))) / np.log(len(lm.tokenizer)) < 0.10


def test_teacher_forced_score_equals_stepwise_sum(lm, tok):
    prompt = build_prompt("put all the blocks in the center of the board", tok)
    answer = tok.encode("push the red star towards the center") + [tok.eos_id]
    total, counts = P.score_sequences(lm, [prompt], [answer])
    # independent oracle: feed growing prefixes one at a time
    acc = 0.0
    for j, token in enumerate(answer):
        seq = np.array([prompt + answer[:j]])
        with T.no_grad():
            z = lm.logits(seq, np.ones_like(seq, bool)).data[0, -1].astype(np.float64)
        acc += z[token] - np.log(np.exp(z - z.max()).sum()) - z.max()
    assert counts[0] == len(answer)
    assert total.item() == pytest.approx(acc, abs=1e-4)


def test_sampled_logprob_matches_rescoring(lm, tok):
    rng = np.random.default_rng(0)
    hl = "put all the blocks in a vertical line"
    for _ in range(5):
        g = P.sample_low_level(lm, hl, 1.0, rng)
        total, counts = P.score_sequences(lm, [build_prompt(hl, tok)], [g.ids])
        assert g.token_count == counts[0] >= 1
        assert g.sum_logprob == pytest.approx(total.item(), abs=1e-4)
        assert g.sum_logprob <= 0


def test_sampling_at_temperature_one_follows_model_distribution():
    # hand-set 2-token model: token 0 ("a") with probability 0.9, token 1 ends
    logits = np.log([0.9, 0.1])
    rows = P.sample_tokens(lambda ids, valid: np.tile(logits, (ids.shape[0], 1)), [[5]] * 1000,
                           eos_id=1, pad_id=2, max_new=1, rng=np.random.default_rng(7))
    freq = np.mean([r[0][0] == 0 for r in rows])
    assert abs(freq - 0.9) < 0.03


def test_greedy_sampling_is_deterministic_and_argmax(lm):
    a = P.sample_low_level(lm, "put all the blocks in a vertical line", greedy=True)
    b = P.sample_low_level(lm, "put all the blocks in a vertical line", greedy=True)
    assert a.ids == b.ids
    logits = np.array([[0.1, 2.0, 2.0, -1.0]])
    rows = P.sample_tokens(lambda ids, v: logits, [[3]], eos_id=2, pad_id=3, max_new=1, rng=None,
                           greedy=True)
    assert rows[0][0] == [1]  # ties break to the lowest id


def test_truncation_is_flagged(tok):
    never_eos = np.zeros(len(tok))
    never_eos[tok.eos_id] = -1e9
    rows = P.sample_tokens(lambda ids, v: np.tile(never_eos, (ids.shape[0], 1)), [[tok.bos_id]],
                           tok.eos_id, tok.pad_id, max_new=6, rng=np.random.default_rng(0))
    ids, _, truncated = rows[0]
    assert truncated and len(ids) == 6


def test_sampling_requires_positive_temperature(lm):
    with pytest.raises(ContractError):
        P.sample_low_level(lm, "put all the blocks in a vertical line", 0.0, np.random.default_rng(0))


def test_generation_unpacks_as_triple(lm):
    text, logp, n = P.sample_low_level(lm, "put all the blocks in a vertical line", 1.0,
                                       np.random.default_rng(1))
    assert isinstance(text, str) and logp <= 0 and n >= 1


def test_kv_cache_matches_full_forward(vlm, small_samples, tok):
    imgs = small_samples.float_images(np.arange(3))
    prompts = [build_prompt(h, tok) for h in small_samples.high_level[:3]]
    ids, valid, _ = P.pack(prompts, None, tok.pad_id)
    step = vlm.stepper(imgs)
    rng = np.random.default_rng(0)
    for k in range(4):
        cached = step(ids, valid)
        with T.no_grad():
            full = vlm.logits(ids, valid, imgs).data[:, -1]
        np.testing.assert_allclose(cached, full, atol=1e-5)
        nxt = rng.integers(4, len(tok), size=3)
        keep = np.array([True, k < 2, True])
        ids = np.concatenate([ids, nxt[:, None]], axis=1)
        valid = np.concatenate([valid, keep[:, None]], axis=1)


def test_vision_prefix_requires_images(vlm, tok):
    with pytest.raises(ContractError):
        P.score_sequences(vlm, [build_prompt("put all the blocks in a vertical line", tok)], [[5, 2]])


def test_lm_cross_entropy_gradcheck(tok, small_samples):
    lm = P.HighLevelLM(P.LMConfig(d_model=16, n_heads=2, depth=1, vision_prefix=True,
                                  prefix_patch=32), tok, seed=4)
    idx = np.arange(3)
    imgs = small_samples.float_images(idx)
    hl = [small_samples.high_level[i] for i in idx]
    ll = [small_samples.low_level[i] for i in idx]
    res = gradcheck.check_module(lambda m: P.lm_cross_entropy(m, hl, ll, imgs), lm, n_coords=24,
                                 rng=np.random.default_rng(1), h=1e-4, min_abs=1e-6)
    assert len(res) >= 20
    assert max(r.rel_error for r in res) < 1e-3


# ---------------------------------------------------------------------------
# decoder


def test_decode_chunk_is_deterministic_and_clamped(dec, small_samples):
    s = small_samples[0]
    a = P.decode_chunk(dec, s.observation, None, s.high_level, s.low_level)
    b = P.decode_chunk(dec, s.observation, None, s.high_level, s.low_level)
    assert np.array_equal(a.deltas, b.deltas)
    assert a.deltas.shape == (8, 2) and np.abs(a.deltas).max() <= 0.2


def test_decoder_clamps_large_outputs(tok, small_samples):
    d = P.LowLevelDecoder(P.DecoderConfig(), tok, seed=0)
    d.head.bias.data[:] = 50.0
    s = small_samples[0]
    out = P.decode_chunk(d, s.observation, None, s.high_level, s.low_level)
    assert np.allclose(out.deltas, 0.2)


def test_decoder_mse_gradcheck(tok, small_samples):
    d = P.LowLevelDecoder(P.DecoderConfig(d_model=16, n_heads=2, depth=1, patch_size=16), tok, seed=5)
    idx = np.arange(3)
    args = (small_samples.float_images(idx), small_samples.effector[idx],
            [small_samples.high_level[i] for i in idx], [small_samples.low_level[i] for i in idx],
            small_samples.chunks[idx])
    res = gradcheck.check_module(lambda m: P.decoder_mse(m, *args), d, n_coords=24,
                                 rng=np.random.default_rng(2), h=1e-4, min_abs=1e-7)
    assert len(res) >= 20
    assert max(r.rel_error for r in res) < 1e-3


# ---------------------------------------------------------------------------
# training


def test_zero_lr_leaves_weights_unchanged(tok, small_samples):
    lm = P.HighLevelLM(P.LMConfig(), tok, seed=0)
    dec = P.LowLevelDecoder(P.DecoderConfig(), tok, seed=0)
    before = {**lm.state_dict(), **{"d." + k: v for k, v in dec.state_dict().items()}}
    P.train_supervised(lm, dec, small_samples, P.SupervisedConfig(lm_steps=2, dec_steps=2, lm_lr=0.0,
                                                                  dec_lr=0.0, batch=8))
    after = {**lm.state_dict(), **{"d." + k: v for k, v in dec.state_dict().items()}}
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_decoder_fits_constant_zero_targets(tok, small_samples):
    zero = small_samples.subset(np.arange(64))
    zero.chunks = np.zeros_like(zero.chunks)
    dec = P.LowLevelDecoder(P.DecoderConfig(), tok, seed=0)
    log = P.train_supervised(None, dec, zero, P.SupervisedConfig(lm_steps=0, dec_steps=40, dec_lr=3e-3,
                                                                 batch=16, log_every=1))
    first, last = log.dec[0]["loss"], log.dec[-1]["loss"]
    assert last < 0.1 * first and last < 1e-4


def test_lm_training_lowers_cross_entropy(tok, small_samples):
    lm = P.HighLevelLM(P.LMConfig(), tok, seed=0)
    log = P.train_supervised(lm, None, small_samples, P.SupervisedConfig(lm_steps=30, dec_steps=0,
                                                                         lm_lr=3e-3, batch=16,
                                                                         log_every=1))
    assert np.mean([r["loss"] for r in log.lm[-5:]]) < 0.7 * log.lm[0]["loss"]


def test_empty_dataset_rejected(tok, small_samples):
    with pytest.raises(ContractError):
        P.train_supervised(None, None, small_samples.subset([]), P.SupervisedConfig())


# ---------------------------------------------------------------------------
# candidates


def test_generate_candidates_contract(lm, dec, small_samples):
    pol = P.Policy(lm, dec)
    s = small_samples[0]
    cands = P.generate_candidates(pol, s.high_level, s.observation, 5, 1.0, np.random.default_rng(0))
    assert len(cands) == 5
    for c in cands:
        assert c.token_count >= 1 and c.sum_logprob <= 0
        again = P.decode_chunk(dec, s.observation, None, s.high_level, c.low_level or "<unk>")
        assert np.allclose(again.deltas, c.chunk.deltas, atol=1e-6)
    by_text = {}
    for c in cands:
        if c.low_level in by_text:
            assert np.array_equal(by_text[c.low_level], c.chunk.deltas)
        by_text[c.low_level] = c.chunk.deltas


def test_greedy_candidates_collapse(lm, dec, small_samples):
    pol = P.Policy(lm, dec)
    s = small_samples[1]
    cands = P.generate_candidates(pol, s.high_level, s.observation, 4, greedy=True)
    assert len({c.low_level for c in cands}) == 1
    assert all(np.array_equal(c.chunk.deltas, cands[0].chunk.deltas) for c in cands)


def test_generate_candidates_needs_two(lm, dec, small_samples):
    with pytest.raises(ContractError):
        P.generate_candidates(P.Policy(lm, dec), small_samples.high_level[0],
                              small_samples[0].observation, 1)


def test_module_checkpoint_round_trip(tmp_path, vlm, dec):
    P.save_module(vlm, "lm", tmp_path / "lm.ckpt")
    P.save_module(dec, "decoder", tmp_path / "dec.ckpt")
    lm2 = P.load_module(tmp_path / "lm.ckpt", "lm")
    dec2 = P.load_module(tmp_path / "dec.ckpt", "decoder")
    assert lm2.config == vlm.config and lm2.tokenizer.vocab == vlm.tokenizer.vocab
    for k, v in vlm.state_dict().items():
        assert np.array_equal(lm2.state_dict()[k], v)
    for k, v in dec.state_dict().items():
        assert np.array_equal(dec2.state_dict()[k], v)
