import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ila_lab import autodiff as ad
from ila_lab.autodiff import Tensor, backward, count_kernel_flops, matmul, no_grad
from ila_lab.errors import DimensionError, InputError, UsageError
from ila_lab.gradcheck import check_gradients
from ila_lab.ops import (
    batch_norm,
    cross_entropy_loss,
    depthwise_conv2d,
    gelu,
    layer_norm,
    pointwise_conv2d,
    softmax,
)

finite = st.floats(-50, 50, allow_nan=False, width=64)


def leaf(data, grad=True):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=grad)


# ---------------------------------------------------------------- matmul


def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(matmul(Tensor(np.eye(2)), Tensor(a)).data, a)


def test_matmul_hand_computed():
    out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
    assert out.data.tolist() == [[17.0], [39.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))


def test_matmul_grad_matches_formula(rng):
    a, b = leaf(rng.standard_normal((3, 4))), leaf(rng.standard_normal((4, 2)))
    g = rng.standard_normal((3, 2))
    (matmul(a, b) * Tensor(g)).sum().backward()
    np.testing.assert_allclose(a.grad, g @ b.data.T, rtol=1e-12)
    np.testing.assert_allclose(b.grad, a.data.T @ g, rtol=1e-12)


def test_matmul_sum_grad_finite_difference(rng):
    a, b = leaf(rng.standard_normal((3, 4))), leaf(rng.standard_normal((4, 2)))
    errs = check_gradients(lambda: matmul(a, b).sum(), {"a": a, "b": b})
    assert max(errs.values()) < 1e-6


# ---------------------------------------------------------------- convolutions


def test_depthwise_k1_unit_weights_is_identity(rng):
    x = rng.standard_normal((2, 5, 4, 4))
    out = depthwise_conv2d(Tensor(x), Tensor(np.ones((5, 1, 1))))
    assert np.array_equal(out.data, x)


def test_depthwise_row_example():
    # the row [1, 2, 3] under a [1, 1] kernel, embedded in a square 2x2 window whose lower taps see zeros
    img = Tensor(np.array([[[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]]]))
    out = depthwise_conv2d(img, Tensor(np.array([[[1.0, 1.0], [0.0, 0.0]]])))
    assert out.data[0, 0].tolist() == [3.0, 5.0]


def test_depthwise_k2_s2_is_sum_pool(rng):
    x = rng.standard_normal((4, 4))
    out = depthwise_conv2d(Tensor(x[None]), Tensor(np.ones((1, 2, 2))), stride=2).data[0]
    brute = np.empty((2, 2))
    for i in range(2):
        for j in range(2):
            brute[i, j] = x[2 * i, 2 * j] + x[2 * i, 2 * j + 1] + x[2 * i + 1, 2 * j] + x[2 * i + 1, 2 * j + 1]
    np.testing.assert_array_equal(out, brute)


def test_depthwise_output_size_and_errors():
    x = Tensor(np.zeros((3, 7, 7)))
    assert depthwise_conv2d(x, Tensor(np.zeros((3, 3, 3))), stride=2, padding=1).shape == (3, 4, 4)
    with pytest.raises(DimensionError):
        depthwise_conv2d(x, Tensor(np.zeros((3, 9, 9))))
    with pytest.raises(DimensionError):
        depthwise_conv2d(x, Tensor(np.zeros((3, 3, 3))), stride=0)


def test_pointwise_identity_and_position_independence(rng):
    x = rng.standard_normal((4, 3, 3))
    out = pointwise_conv2d(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4)))
    np.testing.assert_array_equal(out.data, x)
    v = rng.standard_normal(4)
    w, b = rng.standard_normal((2, 4)), rng.standard_normal(2)
    const = np.broadcast_to(v[:, None, None], (4, 3, 3)).copy()
    out = pointwise_conv2d(Tensor(const), Tensor(w), Tensor(b)).data
    np.testing.assert_allclose(out, np.broadcast_to((w @ v + b)[:, None, None], (2, 3, 3)), rtol=1e-12)


def test_pointwise_channel_mismatch():
    with pytest.raises(DimensionError):
        pointwise_conv2d(Tensor(np.zeros((3, 2, 2))), Tensor(np.zeros((2, 4))))


# ---------------------------------------------------------------- norms


def test_layer_norm_constant_vector_is_zero():
    out = layer_norm(Tensor(np.full((2, 6), 3.0)), Tensor(np.ones(6)), Tensor(np.zeros(6)))
    np.testing.assert_array_equal(out.data, 0.0)


def test_layer_norm_standardizes(rng):
    out = layer_norm(Tensor(rng.standard_normal((5, 32)) * 4 + 2), Tensor(np.ones(32)), Tensor(np.zeros(32))).data
    np.testing.assert_allclose(out.mean(-1), 0, atol=1e-6)
    np.testing.assert_allclose(out.var(-1), 1, atol=1e-5)  # eps 1e-6 shaves ~1e-7/var


def test_batch_norm_eval_identity(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    out = batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), np.zeros(3), np.ones(3), training=False)
    np.testing.assert_allclose(out.data, x / math.sqrt(1 + 1e-5), rtol=1e-12)


def test_batch_norm_train_statistics_and_running_mean(rng):
    x = rng.standard_normal((4, 3, 5, 5)) * 3 + 1
    rm, rv = np.zeros(3), np.ones(3)
    out = batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), rm, rv, training=True, momentum=0.1).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-5)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-5)
    np.testing.assert_allclose(rm, 0.9 * 0 + 0.1 * x.mean(axis=(0, 2, 3)), rtol=1e-12)
    n = x.size // 3
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * n / (n - 1), rtol=1e-12)


def test_batch_norm_single_value_is_finite():
    rm, rv = np.zeros(2), np.ones(2)
    out = batch_norm(Tensor(np.ones((1, 2, 1, 1))), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=True)
    assert np.all(np.isfinite(out.data)) and np.all(np.isfinite(rv))


# ---------------------------------------------------------------- activations and loss


def test_gelu_values_and_derivative_at_zero():
    assert gelu(Tensor([0.0])).data[0] == 0.0
    assert gelu(Tensor([1.0])).data[0] == pytest.approx(0.5 * (1 + math.erf(1 / math.sqrt(2))), abs=1e-15)
    assert gelu(Tensor([1.0])).data[0] == pytest.approx(0.841345, abs=1e-6)
    x = leaf([0.0])
    gelu(x).sum().backward()
    assert x.grad[0] == 0.5


def test_softmax_examples():
    np.testing.assert_array_equal(softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    np.testing.assert_array_equal(softmax(Tensor([1000.0, 1000.0])).data, [0.5, 0.5])


def test_cross_entropy_uniform_and_limit():
    assert cross_entropy_loss(Tensor(np.zeros((3, 7))), [0, 3, 6]).item() == pytest.approx(math.log(7), abs=1e-12)
    losses = [cross_entropy_loss(Tensor([[m, 0.0, 0.0]]), [0]).item() for m in (1.0, 10.0, 50.0)]
    assert losses[0] > losses[1] > losses[2] and losses[2] < 1e-20


def test_cross_entropy_grad_is_softmax_minus_onehot(rng):
    logits = leaf(rng.standard_normal((4, 5)))
    labels = [0, 4, 2, 2]
    cross_entropy_loss(logits, labels).backward()
    p = np.exp(logits.data) / np.exp(logits.data).sum(1, keepdims=True)
    expected = (p - np.eye(5)[labels]) / 4
    np.testing.assert_allclose(logits.grad, expected, rtol=1e-12, atol=1e-15)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(InputError):
        cross_entropy_loss(Tensor(np.zeros((2, 3))), [0, 3])
    with pytest.raises(InputError):
        cross_entropy_loss(Tensor(np.zeros((2, 3))), [-1, 0])


# ---------------------------------------------------------------- backward semantics


def test_backward_sum_gives_ones(rng):
    x = leaf(rng.standard_normal((2, 3)))
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_frozen_tensor_gets_no_grad(rng):
    x, w = leaf(rng.standard_normal(3)), leaf(rng.standard_normal(3), grad=False)
    (x * w).sum().backward()
    assert w.grad is None and x.grad is not None


def test_two_backwards_double_the_grad(rng):
    x = leaf(rng.standard_normal(4))
    (x * x).sum().backward()
    first = x.grad.copy()
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, 2 * first)


def test_backward_on_non_scalar_is_usage_error():
    with pytest.raises(UsageError):
        backward(leaf(np.ones(3)) * 2.0)


def test_shared_subexpression_visited_once(rng):
    x = leaf(rng.standard_normal(3))
    y = x * 2.0
    (y + y + y).sum().backward()
    np.testing.assert_array_equal(x.grad, np.full(3, 6.0))


def test_no_grad_builds_no_graph(rng):
    x = leaf(rng.standard_normal(3))
    with no_grad():
        y = (x * x).sum()
    assert not y.requires_grad
    with pytest.raises(UsageError):
        y.backward()


def test_unbroadcast_reduces_grad(rng):
    a, b = leaf(rng.standard_normal((3, 4))), leaf(rng.standard_normal(4))
    (a + b).sum().backward()
    np.testing.assert_array_equal(b.grad, np.full(4, 3.0))


def test_getitem_concat_transpose_grads(rng):
    x = leaf(rng.standard_normal((2, 3, 4)))
    w = Tensor(rng.standard_normal((2, 1, 7)))

    def loss():
        y = ad.concat([x[:, :1], ad.transpose(x, (0, 2, 1))[:, :1, :]], axis=2)
        return (y * w).sum()

    assert check_gradients(loss, {"x": x})["x"] < 1e-6


def test_flop_counter_is_scoped():
    a, b = Tensor(np.ones((2, 3))), Tensor(np.ones((3, 4)))
    with count_kernel_flops() as c:
        matmul(a, b)
    matmul(a, b)
    assert c.total == 2 * 2 * 3 * 4


# ---------------------------------------------------------------- properties


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite), finite)
def test_softmax_rows_sum_to_one_and_shift_invariant(x, c):
    y = softmax(Tensor(x)).data
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(-1), 1.0, atol=1e-6)
    np.testing.assert_allclose(softmax(Tensor(x + c)).data, y, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(2, 5), st.integers(3, 6), st.integers(3, 6)), elements=finite))
def test_kernels_finite_on_finite_input(x):
    c = x.shape[1]
    t = Tensor(x)
    outs = [
        gelu(t),
        layer_norm(t, Tensor(np.ones(x.shape[-1])), Tensor(np.zeros(x.shape[-1]))),
        batch_norm(t, Tensor(np.ones(c)), Tensor(np.zeros(c)), np.zeros(c), np.ones(c), training=True),
        depthwise_conv2d(t, Tensor(np.ones((c, 3, 3))), padding=1),
        pointwise_conv2d(t, Tensor(np.ones((2, c)))),
        softmax(t, axis=1),
    ]
    assert all(np.all(np.isfinite(o.data)) for o in outs)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 3), st.integers(1, 5), st.integers(1, 5)), elements=finite))
def test_depthwise_k1_identity_property(x):
    out = depthwise_conv2d(Tensor(x), Tensor(np.ones((x.shape[1], 1, 1))))
    assert np.array_equal(out.data, x)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_random_elementwise_grads(seed):
    r = np.random.default_rng(seed)
    a, b = leaf(r.standard_normal((2, 3))), leaf(r.standard_normal(3) + 3.0)
    errs = check_gradients(lambda: ((a * b - a) @ Tensor(np.ones((3, 1)))).mean(), {"a": a, "b": b})
    assert max(errs.values()) < 1e-6
