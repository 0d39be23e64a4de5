import numpy as np
import pytest

from oracles import central_diff, max_rel_err
from ttmoe.errors import ShapeError
from ttmoe.model import (
    PAD,
    BaseModel,
    ModelConfig,
    adapted_linear_forward,
    count_trainable,
    head_forward,
    init_head,
    new_expert,
    new_lora_adapter,
)
from ttmoe.tt import TtShape, init_cores, tt_reconstruct

TOY = ModelConfig()
Q_SHAPE = TtShape([8, 8], [8, 8], 3)
V_SHAPE = TtShape([8, 8], [4, 4], 3)


def random_tokens(rng, b, t, vocab=64):
    toks = rng.integers(0, vocab, (b, t))
    lengths = rng.integers(1, t + 1, b)
    toks[np.arange(t)[None, :] >= lengths[:, None]] = PAD
    return toks


def perturbed(adapter, seed, scale=0.3):
    rng = np.random.default_rng(seed)
    for p in adapter.trainable_params():
        p[...] = scale * rng.standard_normal(p.shape)
    return adapter


@pytest.fixture(scope="module")
def base():
    return BaseModel(TOY)


def test_adapted_linear_zero_delta_is_exact():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((5, 6)).astype(np.float32)
    w0 = rng.standard_normal((6, 4)).astype(np.float32)
    fresh = init_cores(TtShape([2, 3], [2, 2], 2), seed=1)
    assert np.array_equal(adapted_linear_forward(x, w0, fresh), x @ w0)
    assert np.array_equal(adapted_linear_forward(x, w0, None), adapted_linear_forward(x, w0, fresh))


def test_adapted_linear_delta_part_matches_reconstruction():
    rng = np.random.default_rng(1)
    tt = init_cores(TtShape([2, 3], [2, 2], 2), seed=1, std=0.5, dtype=np.float64)
    tt.cores[-1][...] = rng.standard_normal(tt.cores[-1].shape)
    tt.alpha = 2.0
    x, w0 = rng.standard_normal((5, 6)), rng.standard_normal((6, 4))
    delta = adapted_linear_forward(x, w0, tt) - x @ w0
    assert max_rel_err(delta, 2.0 * x @ tt_reconstruct(tt)) < 1e-5


def test_base_is_deterministic_and_read_only(base):
    toks = random_tokens(np.random.default_rng(2), 4, 16)
    h1, logits = base.forward(toks)
    h2, _ = BaseModel(TOY).forward(toks)
    assert logits is None and np.array_equal(h1, h2)
    with pytest.raises(ValueError):
        base.layers[0]["wq"][0, 0] = 1.0


def test_zero_init_adapter_leaves_hidden_unchanged(base):
    toks = random_tokens(np.random.default_rng(3), 6, 16)
    adapter = new_expert(TOY, Q_SHAPE, V_SHAPE, 2, seed=4)
    assert np.array_equal(base.forward(toks)[0], base.forward(toks, adapter)[0])


def test_last_real_token_pooling(base):
    single = np.array([[17]])
    padded = np.array([[17] + [PAD] * 7])
    assert np.array_equal(base.forward(single)[0], base.forward(padded)[0])


def test_padding_changes_nothing_before_it(base):
    toks = np.array([[3, 9, 4, 22]])
    longer = np.array([[3, 9, 4, 22, 5, 6]])
    assert not np.array_equal(base.forward(toks)[0], base.forward(longer)[0])


def test_token_range_checked(base):
    with pytest.raises(IndexError):
        base.forward(np.array([[64]]))
    with pytest.raises(ShapeError):
        base.forward(np.array([[PAD, 3]]))


def test_head_forward():
    head = init_head(8, 3, seed=0)
    np.testing.assert_array_equal(head_forward(np.zeros((2, 8), np.float32), head), np.tile(head.bias, (2, 1)))
    one_hot = np.zeros((1, 8), np.float32)
    one_hot[0, 5] = 1
    np.testing.assert_allclose(head_forward(one_hot, head)[0], head.weight[5] + head.bias, rtol=1e-6)
    h = np.random.default_rng(0).standard_normal((4, 8))
    ref = np.array([[sum(h[i, k] * head.weight[k, j] for k in range(8)) + head.bias[j]
                     for j in range(3)] for i in range(4)])
    assert np.max(np.abs(head_forward(h, head) - ref)) < 1e-6
    with pytest.raises(ShapeError):
        head_forward(np.zeros((1, 7)), head)


def test_count_trainable_full_dims():
    full = ModelConfig(vocab=8, d_model=2048, d_v=512, n_layers=16, n_heads=32, max_len=4, d_ff=8)
    q = TtShape([16, 8, 4, 4], [4, 4, 8, 16], 5)
    v = TtShape([16, 16, 4, 2], [2, 16, 16], 5)
    assert count_trainable(new_expert(full, q, v, 2, seed=0, alpha=16)) == 33_920
    assert count_trainable(new_lora_adapter(full, 16, 2, seed=0)) == 1_703_936


def test_count_trainable_toy():
    q = 1 * 8 * 3 + 3 * 8 * 3 + 3 * 8 * 3 + 3 * 8 * 1
    v = 1 * 8 * 3 + 3 * 8 * 3 + 3 * 4 * 3 + 3 * 4 * 1
    assert count_trainable(new_expert(TOY, Q_SHAPE, V_SHAPE, 2, seed=0)) == 2 * (q + v) == 672


@pytest.mark.parametrize("kind", ["tt", "lora"])
def test_model_backward_matches_finite_differences(kind):
    cfg = ModelConfig(vocab=10, d_model=8, d_v=4, n_layers=2, n_heads=2, max_len=5, d_ff=6, precision="f64")
    base = BaseModel(cfg)
    if kind == "tt":
        adapter = new_expert(cfg, TtShape([2, 4], [4, 2], 2), TtShape([2, 4], [2, 2], 2), 3, seed=1, alpha=1.5)
    else:
        adapter = new_lora_adapter(cfg, 2, 3, seed=1, alpha=1.5)
    perturbed(adapter, seed=2)
    rng = np.random.default_rng(5)
    toks = random_tokens(rng, 3, 5, vocab=10)
    up = rng.standard_normal((3, 3))
    _, grads = base.forward_backward(toks, adapter, up)
    fd = central_diff(lambda: float(np.sum(base.forward(toks, adapter)[1] * up)), adapter.trainable_params())
    for g, ref in zip(grads, fd):
        assert max_rel_err(g, ref) < 1e-6


def test_logits_do_not_depend_on_batch_composition(base):
    adapter = perturbed(new_expert(TOY, Q_SHAPE, V_SHAPE, 3, seed=1), 1)
    tokens = random_tokens(np.random.default_rng(8), 9, 12)
    _, logits = base.forward(tokens, adapter)
    for i in range(len(tokens)):
        assert np.array_equal(base.forward(tokens[i:i + 1], adapter)[1][0], logits[i])
