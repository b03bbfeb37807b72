import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from gpla import tensorcore as T
from gpla.tensorcore import checkpoint, gradcheck, nn, optim
from gpla.tensorcore.tensor import Tensor

TOL = 1e-3


def leaf(a, dtype=np.float32):
    return Tensor(np.asarray(a, dtype=dtype), requires_grad=True)


def rand(rng, *shape):
    return leaf(rng.normal(size=shape))


# ---------------------------------------------------------------------------
# op-level gradients (float32 autodiff vs float64 finite differences)

UNARY = {
    "exp": lambda x: T.sum(T.exp(x) * 0.3),
    "tanh": lambda x: T.sum(T.tanh(x) * np.arange(x.size, dtype=np.float32).reshape(x.shape)),
    "sigmoid": lambda x: T.sum(T.sigmoid(x) * x),
    "log_sigmoid": lambda x: T.sum(T.log_sigmoid(x)),
    "gelu": lambda x: T.sum(T.gelu(x) * x),
    "softmax": lambda x: T.sum(T.softmax(x, axis=-1) * np.linspace(-1, 1, x.shape[-1], dtype=np.float32)),
    "log_softmax": lambda x: T.sum(T.take_last(T.log_softmax(x, axis=-1), np.zeros(x.shape[:-1], int))),
    "l2_normalize": lambda x: T.sum(T.l2_normalize(x) * np.linspace(-1, 2, x.shape[-1], dtype=np.float32)),
    "mean": lambda x: T.mean(x * x, axis=0).sum(),
    "transpose": lambda x: T.sum(T.transpose(x) * np.arange(x.size, dtype=np.float32).reshape(x.shape[::-1])),
    "slice": lambda x: T.sum(T.getitem(x, (slice(1, 3), slice(None, None, 2))) ** 2),
    "fancy_index": lambda x: T.sum(T.getitem(x, np.array([0, 2, 2])) ** 2),
    "power": lambda x: T.sum(T.power(x * x + 1.0, 1.5)),
    "log": lambda x: T.sum(T.log(x * x + 0.5)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_op_gradients(name, rng):
    x = rand(rng, 4, 5)
    err = gradcheck.check_inputs(UNARY[name], [x], h=1e-4)
    assert err < TOL, name


def test_binary_broadcast_gradients(rng):
    a, b = rand(rng, 3, 4), rand(rng, 4)
    for fn in (lambda a, b: T.sum((a + b) * (a - b)),
               lambda a, b: T.sum(a * b * a),
               lambda a, b: T.sum(a / (b * b + 1.0))):
        assert gradcheck.check_inputs(fn, [a, b], h=1e-4) < TOL


def test_matmul_and_concat_gradients(rng):
    a, b, c = rand(rng, 2, 3, 4), rand(rng, 4, 5), rand(rng, 2, 1, 5)
    fn = lambda a, b, c: T.sum(T.concat([T.matmul(a, b), c], axis=1) ** 2)
    assert gradcheck.check_inputs(fn, [a, b, c], h=1e-4) < TOL


def test_layer_norm_gradient(rng):
    x, g, b = rand(rng, 3, 6), rand(rng, 6), rand(rng, 6)
    w = rng.normal(size=(3, 6)).astype(np.float32)
    fn = lambda x, g, b: T.sum(T.layer_norm(x, g, b) * w)
    assert gradcheck.check_inputs(fn, [x, g, b], h=1e-4) < TOL


def test_attention_gradient_with_mask(rng):
    q, k, v = rand(rng, 2, 3, 4), rand(rng, 2, 5, 4), rand(rng, 2, 5, 4)
    mask = np.ones((2, 3, 5), bool)
    mask[0, :, 3:] = False
    w = rng.normal(size=(2, 3, 4)).astype(np.float32)
    fn = lambda q, k, v: T.sum(T.masked_attention(q, k, v, mask) * w)
    assert gradcheck.check_inputs(fn, [q, k, v], h=1e-4) < TOL


def test_embedding_gradient_accumulates_repeats(rng):
    table = rand(rng, 5, 3)
    ids = np.array([[0, 2, 2], [4, 0, 1]])
    fn = lambda t: T.sum(T.embedding_lookup(t, ids) ** 2)
    assert gradcheck.check_inputs(fn, [table], h=1e-4) < TOL


# ---------------------------------------------------------------------------
# layer-level checks on >= 20 parameter coordinates


def _check(module, loss_fn, n=24, min_abs=1e-6):
    results = gradcheck.check_module(loss_fn, module, n_coords=n, rng=np.random.default_rng(0),
                                     h=1e-4, min_abs=min_abs)
    assert len(results) >= 20
    worst = max(results, key=lambda r: r.rel_error)
    assert worst.rel_error < TOL, worst


def test_linear_layer_gradcheck(rng):
    layer = nn.Linear(5, 4, rng)
    x = rng.normal(size=(3, 5))
    _check(layer, lambda m: T.sum(T.tanh(m(x))))


def test_layernorm_module_gradcheck(rng):
    ln = nn.LayerNorm(6)
    ln.gamma.data[:] = rng.normal(size=6)
    x = rng.normal(size=(4, 6))
    w = rng.normal(size=(4, 6))
    _check(ln, lambda m: T.sum(m(x) * w), n=12 * 2)


def test_attention_layer_gradcheck(rng):
    attn = nn.MultiHeadAttention(8, 2, rng)
    x = rng.normal(size=(2, 5, 8))
    mask = nn.causal_mask(5)[None, None]
    _check(attn, lambda m: T.sum(T.tanh(m(x, mask))))


def test_transformer_gradcheck(rng):
    tr = nn.Transformer(8, 2, 2, rng, mlp_ratio=2)
    x = rng.normal(size=(2, 4, 8))
    valid = np.array([[1, 1, 1, 0], [1, 1, 1, 1]], bool)
    w = rng.normal(size=(2, 8))
    _check(tr, lambda m: T.sum(nn.masked_mean(m(x, nn.padding_mask(valid)), valid) * w))


def test_film_gradcheck(rng):
    film = nn.FiLM(3, 4, rng, init_scale=1.0)
    x = rng.normal(size=(2, 5, 4))
    cond = rng.normal(size=(2, 3))
    _check(film, lambda m: T.sum(T.gelu(m(x, cond))))


def test_patch_encoder_gradcheck(rng):
    enc = nn.PatchEncoder(8, 4, 8, 1, 2, rng, mlp_ratio=2)
    images = rng.random((2, 8, 8, 3))
    _check(enc, lambda m: T.sum(T.tanh(T.mean(m(images), axis=1))))


def test_embedding_module_gradcheck(rng):
    emb = nn.Embedding(7, 4, rng, std=1.0)
    ids = rng.integers(0, 7, size=(3, 6))
    w = rng.normal(size=(3, 6, 4))
    _check(emb, lambda m: T.sum(T.tanh(m(ids)) * w))


# ---------------------------------------------------------------------------
# engine semantics


def test_backward_requires_scalar(rng):
    with pytest.raises(T.DimensionError):
        (rand(rng, 2, 2) * 2.0).backward()


def test_gradients_accumulate_across_backward_calls():
    x = leaf([1.0, 2.0])
    y = T.sum(x * x)
    y.backward()
    y.backward()
    np.testing.assert_allclose(x.grad, [4.0, 8.0])


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with T.no_grad():
        y = x * 3.0
    assert not y.requires_grad and y._parents == ()


def test_shape_mismatch_names_the_op():
    with pytest.raises(T.DimensionError, match="matmul"):
        T.matmul(T.astensor(np.ones((2, 3))), T.astensor(np.ones((4, 2))))


def test_scalars_do_not_promote_float32():
    x = leaf(np.ones(3))
    assert (x * 2.5 + 1).dtype == np.float32


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=5),
                  elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(a):
    p = T.softmax(T.astensor(a.astype(np.float32)), axis=-1).data
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-5)
    assert np.all(p >= 0)


@given(hnp.arrays(np.float64, (4, 3), elements=st.floats(-10, 10)))
def test_reduction_uses_wide_accumulator(a):
    big = np.full(100_000, 1e-4, np.float32)
    assert abs(T.sum(T.astensor(big)).item() - 10.0) < 1e-4
    np.testing.assert_allclose(T.mean(T.astensor(a), axis=0).data, a.mean(axis=0), rtol=1e-6)


# ---------------------------------------------------------------------------
# optimizer


def test_adam_matches_reference_update():
    p = leaf([1.0, -2.0])
    opt = optim.Adam([p], lr=0.1, betas=(0.9, 0.999), eps=1e-8)
    g = np.array([0.5, -1.0])
    p.grad = g.astype(np.float32)
    opt.step(clip_norm=None)
    # first step with bias correction moves each coordinate by lr * sign(g)
    np.testing.assert_allclose(p.data, [0.9, -1.9], rtol=1e-6)


def test_adamw_decouples_weight_decay():
    p = leaf([1.0])
    opt = optim.AdamW([p], lr=0.1, weight_decay=0.5)
    p.grad = np.zeros(1, np.float32)
    opt.step(clip_norm=None)
    np.testing.assert_allclose(p.data, [1.0 - 0.1 * 0.5], rtol=1e-6)


def test_zero_lr_leaves_weights_bit_identical(rng):
    layer = nn.Linear(4, 3, rng)
    before = {k: v.copy() for k, v in layer.state_dict().items()}
    opt = optim.for_module(layer, kind="adamw", lr=0.0, weight_decay=0.1)
    for _ in range(3):
        T.sum(layer(rng.normal(size=(2, 4))) ** 2).backward()
        opt.step()
    for k, v in layer.state_dict().items():
        assert np.array_equal(v, before[k])


def test_clip_caps_global_norm():
    a, b = leaf([0.0, 0.0]), leaf([0.0])
    a.grad = np.array([3.0, 0.0], np.float32)
    b.grad = np.array([4.0], np.float32)
    pre = optim.clip_grad_norm([a, b], 1.0)
    assert pre == pytest.approx(5.0)
    total = np.sqrt((a.grad ** 2).sum() + (b.grad ** 2).sum())
    assert total == pytest.approx(1.0, rel=1e-6)


def test_non_finite_gradient_names_parameter(rng):
    layer = nn.Linear(2, 2, rng)
    opt = optim.for_module(layer, lr=1e-3)
    layer.weight.grad = np.full((2, 2), np.nan, np.float32)
    with pytest.raises(optim.NonFiniteGradientError, match="weight"):
        opt.step()


def test_accumulation_matches_one_large_batch(rng):
    x = rng.normal(size=(8, 3)).astype(np.float32)
    y = rng.normal(size=(8, 2)).astype(np.float32)
    big = nn.Linear(3, 2, np.random.default_rng(0))
    small = nn.Linear(3, 2, np.random.default_rng(0))

    def loss(m, xs, ys):
        d = m(xs) - ys
        return T.mean(d * d)

    opt = optim.for_module(big, lr=1e-2)
    loss(big, x, y).backward()
    opt.step(clip_norm=None)

    acc = optim.GradAccumulator(optim.for_module(small, lr=1e-2), n_micro=4, clip_norm=None)
    stepped = [acc.backward(loss(small, x[i:i + 2], y[i:i + 2])) for i in range(0, 8, 2)]
    assert stepped == [False, False, False, True]
    for (k, a), (_, b) in zip(big.named_parameters(), small.named_parameters()):
        np.testing.assert_allclose(a.data, b.data, rtol=1e-5, atol=1e-7, err_msg=k)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip_with_optimizer(tmp_path, rng):
    layer = nn.Linear(3, 2, rng)
    opt = optim.for_module(layer, kind="adamw", lr=1e-3)
    T.sum(layer(rng.normal(size=(1, 3)))).backward()
    opt.step()
    path = tmp_path / "m.ckpt"
    checkpoint.save(path, layer.state_dict(), opt, {"note": "x"})
    params, state, meta = checkpoint.load(path)
    assert meta["note"] == "x"
    for k, v in layer.state_dict().items():
        assert np.array_equal(params[k], v)
    assert state["step_count"] == 1 and state["kind"] == "adamw"


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load(path)


def test_load_state_dict_checks_shapes(rng):
    layer = nn.Linear(3, 2, rng)
    state = layer.state_dict()
    state["weight"] = np.zeros((2, 2), np.float32)
    with pytest.raises(ValueError, match="weight"):
        layer.load_state_dict(state)
