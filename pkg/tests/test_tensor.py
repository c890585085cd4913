import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deskbert import tensor as T
from deskbert.tensor import Tensor


def leaf(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def test_product_rule():
    x = Tensor(np.array(2.0), requires_grad=True)
    y = Tensor(np.array(3.0), requires_grad=True)
    g = T.backward(x * y)
    assert g[x] == 3.0 and g[y] == 2.0


def test_shared_node_accumulates():
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    g = T.backward(T.tsum(x * x + x))
    np.testing.assert_allclose(g[x], 2 * x.data + 1)


def test_broadcast_add_reduces_gradient(rng):
    a, b = leaf(rng, 3, 4), leaf(rng, 4)
    g = T.backward(T.tsum(a + b))
    np.testing.assert_array_equal(g[b], np.full(4, 3.0))


def test_softmax_cross_entropy_gradient_is_probs_minus_onehot(rng):
    logits = leaf(rng, 5, 7)
    targets = rng.integers(0, 7, size=5)
    g = T.backward(T.cross_entropy(logits, targets))
    p = np.exp(logits.data - logits.data.max(-1, keepdims=True))
    p /= p.sum(-1, keepdims=True)
    expected = (p - np.eye(7)[targets]) / 5
    np.testing.assert_allclose(g[logits], expected, rtol=1e-10, atol=1e-12)
    num = T.finite_difference_gradient(lambda: T.cross_entropy(logits, targets), [logits], eps=1e-3)[0]
    assert np.all(T.relative_error(g[logits], num) < 1e-3)


def test_layer_norm_sum_matches_finite_differences(rng):
    x = leaf(rng, 4, 8)
    gamma, beta = leaf(rng, 8), leaf(rng, 8)
    assert T.gradcheck(lambda: T.tsum(T.layer_norm(x, gamma, beta) * T.Tensor(np.arange(8.0))), [x, gamma, beta]) == 1.0


def test_finite_difference_of_square():
    x = Tensor(np.array([3.0]))
    g = T.finite_difference_gradient(lambda: x * x, [x], eps=1e-4)[0]
    assert abs(g[0] - 6.0) < 1e-6


def test_finite_difference_of_constant_is_zero(rng):
    x = leaf(rng, 3)
    g = T.finite_difference_gradient(lambda: Tensor(np.array(4.0)), [x])[0]
    assert np.all(g == 0)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_finite_difference_rejects_nonfinite():
    x = Tensor(np.array([0.0]))
    with pytest.raises(T.NonFiniteError):
        T.finite_difference_gradient(lambda: np.log(x.data - 1.0).sum(), [x])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_forward_is_an_error():
    with pytest.raises(T.NonFiniteError):
        T.log(Tensor(np.array([0.0, 1.0])))


def test_backward_requires_scalar(rng):
    with pytest.raises(ValueError):
        T.backward(leaf(rng, 3) * 2.0)


def test_two_backward_passes_are_identical(rng):
    x, w = leaf(rng, 4, 6), leaf(rng, 6, 3)
    loss = T.mean(T.gelu(x @ w))
    g1, g2 = T.backward(loss), T.backward(loss)
    for k in g1:
        assert np.array_equal(g1[k], g2[k])


def test_stop_gradient_blocks(rng):
    x = leaf(rng, 3)
    g = T.backward(T.tsum(T.stop_gradient(x) * x))
    np.testing.assert_array_equal(g[x], x.data)


def test_topological_order_visits_each_node_once(rng):
    x = leaf(rng, 3)
    y = x * 2.0
    z = T.tsum(y + y * y)
    order = T.topological_order(z)
    assert len(order) == len({id(n) for n in order})
    pos = {id(n): i for i, n in enumerate(order)}
    for n in order:
        for p in n._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(n)]


def test_softmax_rows_sum_to_one(rng):
    p = T.softmax(Tensor(rng.standard_normal((6, 9)) * 30)).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-6)


def test_float32_default():
    assert Tensor([1, 2, 3]).dtype == np.float32


def test_dropout_identity_when_not_training(rng):
    x = leaf(rng, 4, 4)
    assert T.dropout(x, 0.5, rng, training=False) is x


def test_dropout_is_seeded():
    x = Tensor(np.ones((8, 8)))
    a = T.dropout(x, 0.3, np.random.default_rng(0)).data
    b = T.dropout(x, 0.3, np.random.default_rng(0)).data
    assert np.array_equal(a, b)
    assert set(np.unique(a)) <= {0.0, 1 / 0.7}


def _op_cases(rng):
    """(name, f, params) for every differentiable op, on small float64 tensors."""
    a, b = leaf(rng, 3, 4), leaf(rng, 4, 2)
    c, d = leaf(rng, 3, 4), leaf(rng, 4)
    pos = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
    table = leaf(rng, 6, 3)
    ids = rng.integers(0, 6, size=(2, 5))
    gamma, beta = leaf(rng, 4), leaf(rng, 4)
    targets = rng.integers(0, 4, size=3)
    idx = rng.integers(0, 4, size=(3, 5))
    bce_t = rng.integers(0, 2, size=(3, 4))
    w = Tensor(rng.standard_normal((3, 4)))
    bias = leaf(rng, 2)
    return [
        ("matmul", lambda: T.tsum((a @ b) * (a @ b)), [a, b]),
        ("add", lambda: T.tsum((a + d) * w), [a, d]),
        ("sub", lambda: T.tsum((a - c) * w), [a, c]),
        ("mul", lambda: T.tsum(a * c * w), [a, c]),
        ("div", lambda: T.tsum(a / pos), [a, pos]),
        ("exp", lambda: T.tsum(T.exp(a) * w), [a]),
        ("log", lambda: T.tsum(T.log(pos) * w), [pos]),
        ("sigmoid", lambda: T.tsum(T.sigmoid(a) * w), [a]),
        ("tanh", lambda: T.tsum(T.tanh(a) * w), [a]),
        ("gelu", lambda: T.tsum(T.gelu(a) * w), [a]),
        ("softmax", lambda: T.tsum(T.softmax(a) * w), [a]),
        ("log_softmax", lambda: T.tsum(T.log_softmax(a) * w), [a]),
        ("layer_norm", lambda: T.tsum(T.layer_norm(a, gamma, beta) * w), [a, gamma, beta]),
        ("embedding", lambda: T.tsum(T.embedding(table, ids) * T.embedding(table, ids)), [table]),
        ("take_along_last", lambda: T.tsum(T.take_along_last(a, idx) * T.take_along_last(a, idx)), [a]),
        ("getitem", lambda: T.tsum(a[1:, ::2] * a[1:, ::2]), [a]),
        ("transpose", lambda: T.tsum(T.transpose(a) @ a), [a]),
        ("mean", lambda: T.mean(a * a, axis=0).sum(), [a]),
        ("cross_entropy", lambda: T.cross_entropy(a, targets), [a]),
        ("bce_with_logits", lambda: T.bce_with_logits(a, bce_t), [a]),
        ("linear", lambda: T.tsum(T.linear(a, b, bias) * T.linear(a, b, bias)), [a, b, bias]),
    ]


OP_NAMES = [name for name, _, _ in _op_cases(np.random.default_rng(0))]


@pytest.mark.parametrize("op", OP_NAMES)
@settings(max_examples=5, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_op_gradients_match_finite_differences(op, seed):
    cases = {name: (f, params) for name, f, params in _op_cases(np.random.default_rng(seed))}
    f, params = cases[op]
    assert T.gradcheck(f, params, eps=1e-6, rtol=1e-3) == 1.0
