"""
张量引擎测试 - 基础运算、反向传播与有限差分梯度检查
"""
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from utils import tensor as T
from utils.errors import ConfigError, ParameterError, ShapeError, UsageError


def _random(rng, *shape):
    return T.parameter(rng.normal(size=shape))


def _weighted_sum(out: T.Node, seed: int = 99) -> T.Node:
    """用固定随机权重把任意输出收缩为标量"""
    weights = np.random.default_rng(seed).normal(size=out.shape)
    return T.sum_all(T.mul(T.constant(weights), out))


def _entropy(p):
    return float(-(p * np.log(p)).sum())


# ==================== 前向 ====================

def test_matmul_identity_and_hand_case():
    """单位阵与手算示例"""
    a = T.constant([[1.0, 2.0], [3.0, 4.0]])
    assert_allclose(T.matmul(T.constant(np.eye(2)), a).value, a.value)
    out = T.matmul(a, T.constant([[0.0], [1.0]]))
    assert_allclose(out.value, [[2.0], [4.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as exc:
        T.matmul(T.constant(np.ones((2, 3))), T.constant(np.ones((2, 3))))
    assert '(2, 3)' in str(exc.value)


def test_add_broadcasts_rows_and_rejects_mismatch():
    x = T.parameter(np.ones((3, 2)))
    b = T.parameter([[1.0, 2.0]])
    out = T.add(x, b)
    assert_allclose(out.value, [[2.0, 3.0]] * 3)
    T.backward(T.sum_all(out))
    assert_allclose(b.grad, [[3.0, 3.0]])
    with pytest.raises(ShapeError):
        T.add(x, T.constant(np.ones((2, 2))))


def test_softmax_examples():
    """对称行与解析值"""
    assert_allclose(T.softmax_rows(T.constant([[0.0, 0.0, 0.0]])).value, [[1 / 3] * 3])
    assert_allclose(T.softmax_rows(T.constant([[math.log(2), 0.0]])).value, [[2 / 3, 1 / 3]])


def test_softmax_temperature_raises_entropy():
    row = T.constant([[5.0, 1.0, -2.0]])
    sharp = T.softmax_rows(row, 1.0).value
    soft = T.softmax_rows(row, 5.0).value
    assert _entropy(soft) > _entropy(sharp)


@pytest.mark.parametrize('temperature', [0.0, -1.0])
def test_softmax_rejects_non_positive_temperature(temperature):
    with pytest.raises(ParameterError):
        T.softmax_rows(T.constant([[1.0, 2.0]]), temperature)
    with pytest.raises(ParameterError):
        T.log_softmax_rows(T.constant([[1.0, 2.0]]), temperature)


def test_log_softmax_matches_softmax_and_is_shift_invariant():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(6, 4)) * 3
    log_p = T.log_softmax_rows(T.constant(x)).value
    assert_allclose(np.exp(log_p), T.softmax_rows(T.constant(x)).value, atol=1e-12)
    shifted = T.log_softmax_rows(T.constant(x + 17.0)).value
    assert_allclose(shifted, log_p, atol=1e-12)
    assert_allclose(T.log_softmax_rows(T.constant([[0.0, 0.0]])).value, [[-math.log(2)] * 2])


def test_log_softmax_is_finite_for_extreme_logits():
    out = T.log_softmax_rows(T.constant([[1000.0, 0.0]])).value
    assert np.all(np.isfinite(out))
    assert out[0, 1] == pytest.approx(-1000.0)


def test_gelu_values():
    x = T.constant([[0.0, 10.0, 1.0]])
    y = T.gelu(x).value[0]
    expected_one = 0.5 * (1 + math.tanh(math.sqrt(2 / math.pi) * (1 + 0.044715)))
    assert y[0] == 0.0
    assert y[1] == pytest.approx(10.0, abs=1e-6)
    assert y[2] == pytest.approx(expected_one, abs=1e-15)


def test_relu_values_and_zero_gradient_at_zero():
    x = T.parameter([[-1.0, 2.0, 0.0]])
    out = T.relu(x)
    assert_allclose(out.value, [[0.0, 2.0, 0.0]])
    T.backward(T.sum_all(out))
    assert_allclose(x.grad, [[0.0, 1.0, 0.0]])


def test_layer_norm_examples():
    ones, zeros = T.constant(np.ones((1, 3))), T.constant(np.zeros((1, 3)))
    assert_allclose(T.layer_norm(T.constant([[4.0, 4.0, 4.0]]), ones, zeros).value, np.zeros((1, 3)))
    out = T.layer_norm(T.constant([[1.0, -1.0]]), T.constant([[1.0, 1.0]]),
                       T.constant([[0.0, 0.0]]), epsilon=1e-14)
    assert_allclose(out.value, [[1.0, -1.0]], atol=1e-9)


def test_layer_norm_rejects_wrong_gain_width():
    with pytest.raises(ShapeError):
        T.layer_norm(T.constant(np.ones((2, 3))), T.constant(np.ones((1, 2))), T.constant(np.zeros((1, 3))))


def test_dropout_identity_cases_and_keep_rate():
    rng = np.random.default_rng(0)
    x = T.constant(np.ones((1, 100_000)))
    assert T.dropout(x, 0.0, True, rng) is x
    assert T.dropout(x, 0.5, False, rng) is x
    out = T.dropout(x, 0.1, True, np.random.default_rng(3))
    kept = np.mean(out.value > 0)
    assert abs(kept - 0.9) <= 0.01
    assert_allclose(out.value[out.value > 0], 1.0 / 0.9)


@pytest.mark.parametrize('rate', [-0.1, 1.0])
def test_dropout_rejects_rate_out_of_range(rate):
    with pytest.raises(ParameterError):
        T.dropout(T.constant([[1.0]]), rate, True, np.random.default_rng(0))


def _attention_weights(rng, d):
    return {name: T.parameter(rng.normal(size=(d, d)) if name.startswith('w') else rng.normal(size=(1, d)))
            for name in ('w_q', 'b_q', 'w_k', 'b_k', 'w_v', 'b_v', 'w_o', 'b_o')}


def test_attention_single_token_passes_value_through():
    rng = np.random.default_rng(1)
    w = _attention_weights(rng, 4)
    x = T.constant(rng.normal(size=(1, 4)))
    out = T.self_attention(x, w, heads=2)
    v = x.value @ w['w_v'].value + w['b_v'].value
    assert_allclose(out.value, v @ w['w_o'].value + w['b_o'].value, atol=1e-12)


def test_attention_zero_query_weights_average_values():
    rng = np.random.default_rng(2)
    w = _attention_weights(rng, 4)
    w['w_q'] = T.parameter(np.zeros((4, 4)))
    w['b_q'] = T.parameter(np.zeros((1, 4)))
    x = T.constant(rng.normal(size=(3, 4)))
    out = T.self_attention(x, w, heads=2)
    v = x.value @ w['w_v'].value + w['b_v'].value
    expected = v.mean(axis=0, keepdims=True) @ w['w_o'].value + w['b_o'].value
    assert_allclose(out.value, np.repeat(expected, 3, axis=0), atol=1e-12)


def test_attention_keeps_stacked_sequences_independent():
    rng = np.random.default_rng(3)
    w = _attention_weights(rng, 4)
    x = rng.normal(size=(6, 4))
    first = T.self_attention(T.constant(x), w, heads=2, seq_len=3).value
    x[3:] += 5.0
    second = T.self_attention(T.constant(x), w, heads=2, seq_len=3).value
    assert_allclose(first[:3], second[:3], atol=1e-12)


def test_attention_rejects_indivisible_heads():
    q = T.constant(np.ones((2, 5)))
    with pytest.raises(ConfigError):
        T.scaled_dot_attention(q, q, q, heads=2)


def test_token_embed_and_mean_pool_shapes():
    features = T.constant([[1.0, 0.0, 1.0], [0.0, 1.0, 1.0]])
    weight = T.constant(np.ones((3, 4)))
    position = T.constant(np.full((3, 4), 0.5))
    tokens = T.token_embed(features, weight, position)
    assert tokens.shape == (6, 4)
    assert_allclose(tokens.value[1], np.full(4, 0.5))
    pooled = T.mean_pool(tokens, 3)
    assert pooled.shape == (2, 4)
    assert_allclose(pooled.value[0], np.full(4, (1.5 + 0.5 + 1.5) / 3))


# ==================== 反向传播 ====================

def test_backward_sum_and_quadratic():
    p = T.parameter([[1.0, -2.0], [3.0, 0.5]])
    T.backward(T.sum_all(p))
    assert_allclose(p.grad, np.ones((2, 2)))
    T.zero_grad([p])
    T.backward(T.scale(T.sum_all(T.mul(p, p)), 0.5))
    assert_allclose(p.grad, p.value)


def test_sub_and_mean_all_gradients():
    a = T.parameter([[1.0, 4.0], [2.0, 3.0]])
    b = T.parameter([[0.5, 1.0]])
    out = T.mean_all(T.sub(a, b))
    assert out.item() == pytest.approx(1.75)
    T.backward(out)
    assert_allclose(a.grad, np.full((2, 2), 0.25))
    assert_allclose(b.grad, [[-0.5, -0.5]])


def test_backward_accumulates_without_zero_grad():
    p = T.parameter([[2.0]])
    T.backward(T.mul(p, p))
    T.backward(T.mul(p, p))
    assert_allclose(p.grad, [[8.0]])


def test_backward_requires_scalar_root():
    with pytest.raises(UsageError):
        T.backward(T.parameter(np.ones((2, 2))))


def test_detach_blocks_gradient():
    p = T.parameter([[1.0, 2.0]])
    T.backward(T.sum_all(T.add(T.detach(p), p)))
    assert_allclose(p.grad, [[1.0, 1.0]])


# ==================== 梯度检查 ====================

def _check(fn, params, tol=1e-4):
    report = T.gradient_check(fn, params)
    assert report.passed, report.errors
    return report


@pytest.mark.parametrize('seed', range(20))
def test_gradient_matmul_and_linear(seed):
    rng = np.random.default_rng(seed)
    a, b, bias = _random(rng, 5, 7), _random(rng, 7, 3), _random(rng, 1, 3)
    _check(lambda: _weighted_sum(T.linear(a, b, bias)), {'a': a, 'b': b, 'bias': bias})


@pytest.mark.parametrize('seed', range(20))
def test_gradient_softmax_family(seed):
    rng = np.random.default_rng(seed)
    x = _random(rng, 3, 4)
    tau = float(rng.uniform(0.5, 5.0))
    _check(lambda: _weighted_sum(T.softmax_rows(x, tau)), {'x': x})
    _check(lambda: _weighted_sum(T.log_softmax_rows(x, tau)), {'x': x})


@pytest.mark.parametrize('seed', range(20))
def test_gradient_gelu_and_layer_norm(seed):
    rng = np.random.default_rng(seed)
    x, gain, bias = _random(rng, 3, 5), _random(rng, 1, 5), _random(rng, 1, 5)
    _check(lambda: _weighted_sum(T.gelu(x)), {'x': x})
    _check(lambda: _weighted_sum(T.layer_norm(x, gain, bias)), {'x': x, 'gain': gain, 'bias': bias})


@pytest.mark.parametrize('seed', range(20))
def test_gradient_attention(seed):
    rng = np.random.default_rng(seed)
    x = _random(rng, 6, 4)
    w = _attention_weights(rng, 4)
    _check(lambda: _weighted_sum(T.self_attention(x, w, heads=2, seq_len=3)), dict(w, x=x))


@pytest.mark.parametrize('seed', range(5))
def test_gradient_embedding_pool_chain(seed):
    """嵌入 → 注意力 → 池化 → MLP 的组合图"""
    rng = np.random.default_rng(seed)
    features = T.constant(rng.integers(0, 2, size=(2, 3)).astype(float))
    weight, position = _random(rng, 3, 4), _random(rng, 3, 4)
    w = _attention_weights(rng, 4)
    head = _random(rng, 4, 2)

    def fn():
        tokens = T.token_embed(features, weight, position)
        z = T.add(tokens, T.self_attention(tokens, w, heads=2, seq_len=3))
        pooled = T.mean_pool(T.gelu(z), 3)
        return _weighted_sum(T.log_softmax_rows(T.matmul(pooled, head)))

    _check(fn, dict(w, weight=weight, position=position, head=head))


def test_gradient_check_exact_for_linear_function():
    p = T.parameter([[1.0, 2.0, 3.0]])
    report = T.gradient_check(lambda: T.sum_all(T.scale(p, 3.0)), {'p': p})
    assert report.max_error < 1e-9


def test_gradient_check_detects_wrong_rule():
    p = T.parameter([[0.5, -1.0]])

    def broken(x):
        return T.Node(x.value ** 2, (x,), lambda g: (g * x.value,))

    report = T.gradient_check(lambda: T.sum_all(broken(p)), {'p': p})
    assert not report.passed
