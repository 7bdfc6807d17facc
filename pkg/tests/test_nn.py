# test_nn.py
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from errors import NonFiniteError, PivotError, ShapeMismatchError
from nn import (LN_EPS, Dropout, LayerNorm, Linear, Module, MultiHeadAttention, OptimizerConfig, Optimizer,
                TransformerLayer, TransformerStack, attention_forward, check_gradients, gradient_error, layer_forward,
                optimizer_step, read_checkpoint, softmax, write_checkpoint)


def naive_attention(q, k, v, heads):
    L, d = q.shape
    dh = d // heads
    out = np.zeros_like(q)
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(L):
            scores = np.array([q[i, sl] @ k[j, sl] / np.sqrt(dh) for j in range(k.shape[0])])
            w = np.exp(scores - scores.max())
            w /= w.sum()
            for j in range(k.shape[0]):
                out[i, sl] += w[j] * v[j, sl]
    return out


def test_attention_matches_naive_reference():
    rng = np.random.default_rng(0)
    q, k, v = (rng.normal(size=(4, 8)) for _ in range(3))
    np.testing.assert_allclose(attention_forward(q, k, v, heads=2), naive_attention(q, k, v, 2), atol=1e-10)


def test_single_key_returns_value_for_any_query():
    rng = np.random.default_rng(1)
    v = rng.normal(size=(1, 8))
    out = attention_forward(rng.normal(size=(3, 8)), rng.normal(size=(1, 8)), v, heads=4)
    np.testing.assert_allclose(out, np.repeat(v, 3, axis=0), atol=1e-12)


def test_uniform_keys_give_uniform_weights():
    rng = np.random.default_rng(2)
    keys = np.tile(rng.normal(size=(1, 8)), (5, 1))
    _, weights = attention_forward(rng.normal(size=(2, 8)), keys, rng.normal(size=(5, 8)), 2, return_weights=True)
    np.testing.assert_allclose(weights, 0.2, atol=1e-12)


def test_attention_shape_errors():
    x = np.zeros((3, 8))
    with pytest.raises(ShapeMismatchError):
        attention_forward(x, x, x, heads=3)
    with pytest.raises(ShapeMismatchError):
        attention_forward(x, x, np.zeros((2, 8)), heads=2)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 9), st.integers(0, 10_000))
def test_softmax_rows_are_distributions(rows, cols, seed):
    scores = np.random.default_rng(seed).normal(scale=20.0, size=(rows, cols))
    p = softmax(scores)
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)


def test_zero_initialized_layer_is_identity():
    rng = np.random.default_rng(3)
    layer = TransformerLayer(8, 2, rng, init="zeros")
    x, context = rng.normal(size=(1, 4, 8)), rng.normal(size=(1, 3, 8))
    np.testing.assert_array_equal(layer_forward(layer, x, context), x)


def _ln(x, gamma, beta):
    mu = x.mean(-1, keepdims=True)
    return gamma * (x - mu) / np.sqrt(x.var(-1, keepdims=True) + LN_EPS) + beta


def _mha(attn, x, source):
    p = lambda lin: (lin.params["W"], lin.params.get("b", 0.0))
    (wq, bq), (wk, bk), (wv, bv), (wo, bo) = p(attn.wq), p(attn.wk), p(attn.wv), p(attn.wo)
    assert "b" not in attn.wk.params
    heads_out = naive_attention(x @ wq + bq, source @ wk + bk, source @ wv + bv, attn.heads)
    return heads_out @ wo + bo


def test_layer_matches_straight_line_reference():
    rng = np.random.default_rng(4)
    layer = TransformerLayer(8, 2, rng, ffn_mult=2).eval()
    x, ctx = rng.normal(size=(3, 8)), rng.normal(size=(2, 8))
    g = lambda ln: (ln.params["gamma"], ln.params["beta"])
    x1 = x + _mha(layer.self_attn, _ln(x, *g(layer.ln1)), _ln(x, *g(layer.ln1)))
    x2 = x1 + _mha(layer.cross_attn, _ln(x1, *g(layer.ln2)), ctx)
    h = _ln(x2, *g(layer.ln3)) @ layer.ffn.fc1.params["W"] + layer.ffn.fc1.params["b"]
    h = 0.5 * h * (1 + np.tanh(np.sqrt(2 / np.pi) * (h + 0.044715 * h ** 3)))
    expected = x2 + h @ layer.ffn.fc2.params["W"] + layer.ffn.fc2.params["b"]
    np.testing.assert_allclose(layer.forward(x[None], ctx[None])[0], expected, atol=1e-10)


def test_eval_mode_is_deterministic_and_batch_invariant():
    rng = np.random.default_rng(5)
    stack = TransformerStack(2, 8, 2, rng, dropout=0.3).eval()
    x, ctx = rng.normal(size=(3, 4, 8)), rng.normal(size=(3, 2, 8))
    batched = stack.forward(x, ctx)
    np.testing.assert_array_equal(batched, stack.forward(x, ctx))
    for i in range(3):
        np.testing.assert_allclose(stack.forward(x[i:i + 1], ctx[i:i + 1])[0], batched[i], atol=1e-10)


def test_dropout_mask_is_keyed_by_seed_and_step():
    drop = Dropout(0.5)
    x = np.ones((4, 16))
    drop.seed, drop.step = 9, 3
    a = drop.forward(x)
    b = drop.forward(x)
    drop.step = 4
    c = drop.forward(x)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_dropout_rate_must_be_below_one():
    with pytest.raises(ValueError):
        Dropout(1.0)


def test_non_finite_output_raises():
    layer = TransformerLayer(4, 2, np.random.default_rng(0))
    with pytest.raises(NonFiniteError):
        layer.forward(np.full((1, 2, 4), np.nan), np.zeros((1, 1, 4)))


class _Quadratic(Module):
    def __init__(self, w):
        super().__init__()
        self.add_param("w", w)

    def loss(self):
        return 0.5 * float((self.params["w"] ** 2).sum())

    def backward(self):
        self.grads["w"] += self.params["w"]


def test_quadratic_gradient_equals_parameter():
    module = _Quadratic(np.array([1.0, -2.0, 3.0]))
    module.backward()
    np.testing.assert_array_equal(module.grads["w"], module.params["w"])


def _layer_loss(layer, x, ctx, weight):
    return float((layer.forward(x, ctx) * weight).sum())


@pytest.mark.parametrize("make", [
    lambda rng: Linear(5, 4, rng),
    lambda rng: LayerNorm(4),
])
def test_simple_layer_gradients(make):
    rng = np.random.default_rng(6)
    layer = make(rng)
    x = rng.normal(size=(2, 3, layer.params["W"].shape[0] if "W" in layer.params else 4))
    weight = rng.normal(size=layer.forward(x).shape)
    layer.zero_grad()
    layer.forward(x)
    layer.backward(weight)
    report = check_gradients(lambda: float((layer.forward(x) * weight).sum()), layer.parameters(), layer.gradients())
    assert report.max_error < 1e-4


def test_attention_module_gradients():
    rng = np.random.default_rng(7)
    attn = MultiHeadAttention(8, 2, rng)
    x, src = rng.normal(size=(2, 3, 8)), rng.normal(size=(2, 4, 8))
    weight = rng.normal(size=(2, 3, 8))
    attn.zero_grad()
    attn.forward(x, src)
    attn.backward(weight)
    report = check_gradients(lambda: float((attn.forward(x, src) * weight).sum()), attn.parameters(),
                             attn.gradients(), max_per_param=10)
    assert report.max_error < 1e-4


def test_transformer_layer_gradients_including_context():
    rng = np.random.default_rng(8)
    layer = TransformerLayer(8, 2, rng, ffn_mult=2)
    x, ctx = rng.normal(size=(1, 3, 8)), rng.normal(size=(1, 2, 8))
    weight = rng.normal(size=(1, 3, 8))
    layer.zero_grad()
    layer.forward(x, ctx)
    dx, dctx = layer.backward(weight)
    report = check_gradients(lambda: _layer_loss(layer, x, ctx, weight), layer.parameters(), layer.gradients(),
                             max_per_param=6)
    assert report.max_error < 1e-4
    inputs = check_gradients(lambda: _layer_loss(layer, x, ctx, weight), {"x": x, "ctx": ctx},
                             {"x": dx, "ctx": dctx})
    assert inputs.max_error < 1e-4


def test_plain_descent_is_exact():
    p = {"w": np.array([1.0, 2.0])}
    assert np.array_equal(optimizer_step(p, {"w": np.zeros(2)}, OptimizerConfig(lr=0.1, algorithm="sgd"))["w"],
                          p["w"])
    zeroed = optimizer_step(p, {"w": p["w"].copy()}, OptimizerConfig(lr=1.0, algorithm="sgd"))
    assert np.array_equal(zeroed["w"], np.zeros(2))


@pytest.mark.parametrize("algorithm", ["sgd", "adam"])
def test_optimizer_descends_quadratic_monotonically(algorithm):
    module = _Quadratic(np.array([2.0]))
    optimizer = Optimizer(module, OptimizerConfig(lr=0.1, algorithm=algorithm))
    losses = []
    for _ in range(10):
        module.zero_grad()
        losses.append(module.loss())
        module.backward()
        optimizer.step()
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_optimizer_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        optimizer_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, OptimizerConfig(lr=0.1))


def test_checkpoint_roundtrip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(9)
    blocks = {"a.W": rng.normal(size=(3, 4)), "b": np.array([np.pi, -0.0, 1e-300]), "scalar": np.array(2.5)}
    write_checkpoint(tmp_path / "c.bin", blocks, {"epoch": 3})
    loaded, meta = read_checkpoint(tmp_path / "c.bin")
    assert meta == {"epoch": 3}
    for name, value in blocks.items():
        assert loaded[name].tobytes() == value.tobytes()


def test_checkpoint_header_and_truncation(tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"something else\n{}\n")
    with pytest.raises(PivotError):
        read_checkpoint(bad)
    write_checkpoint(tmp_path / "c.bin", {"w": np.ones(100)})
    data = (tmp_path / "c.bin").read_bytes()
    (tmp_path / "cut.bin").write_bytes(data[:-40])
    with pytest.raises(PivotError):
        read_checkpoint(tmp_path / "cut.bin")


def test_gradient_error_is_relative_even_for_tiny_values():
    assert gradient_error(1e-7, 1.05e-7) > 1e-4
    assert gradient_error(5e-7, 0.0) == pytest.approx(1.0)
    assert gradient_error(1e-3, 1e-3 * (1 + 1e-6)) < 1e-4


def test_check_gradients_catches_wrong_tiny_gradient():
    w = np.array([1e-3, 2.0])
    loss = lambda: float(0.5e-4 * w[0] ** 2 + w[1])
    report = check_gradients(loss, {"w": w}, {"w": np.array([1.05e-7, 1.0])})
    assert report.max_error > 1e-4
    assert report.worst_parameter == "w[0]"


def test_check_gradients_skips_unused_parameters():
    w = np.array([1.0, 3.0])
    report = check_gradients(lambda: float(w[0] ** 2), {"w": w}, {"w": np.array([2.0, 0.0])})
    assert report.checked == 1
    assert report.max_error < 1e-4
