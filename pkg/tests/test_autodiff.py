import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fabcorrect.autodiff import (
    Tensor,
    add,
    backward,
    concat_channels,
    conv1x1,
    conv2d,
    grad_check,
    maxpool2x2,
    mean_all,
    mul,
    relu,
    scale,
    sigmoid,
    sum_all,
    upsample2x,
    weighted_sum,
)
from fabcorrect.autodiff.gradcheck import relative_error
from fabcorrect.errors import ContractError, InvalidShapeError, NumericError

from oracles import conv2d_loops


def param(shape, seed, name="p", scale_=1.0):
    rng = np.random.default_rng(seed)
    return Tensor(rng.standard_normal(shape) * scale_, requires_grad=True, name=name)


def projection(shape, seed=99):
    # a fixed random projection makes every output entry matter to the loss
    return np.random.default_rng(seed).standard_normal(shape)


# -- forward values against loop oracles -------------------------------------------
@settings(max_examples=25, deadline=None)
@given(
    n=st.integers(1, 2),
    cin=st.integers(1, 3),
    cout=st.integers(1, 3),
    h=st.integers(3, 6),
    w=st.integers(3, 6),
    k=st.sampled_from([1, 3]),
    seed=st.integers(0, 2**16),
)
def test_conv2d_matches_loop_oracle(n, cin, cout, h, w, k, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, cin, h, w)).astype(np.float32)
    wt = rng.standard_normal((cout, cin, k, k)).astype(np.float32)
    b = rng.standard_normal(cout).astype(np.float32)
    got = conv2d(Tensor(x), Tensor(wt), Tensor(b)).data
    np.testing.assert_allclose(got, conv2d_loops(x, wt, b), rtol=1e-5, atol=1e-5)


def test_conv2d_valid_padding_shrinks():
    x = Tensor(np.ones((1, 1, 5, 5)))
    w = Tensor(np.ones((1, 1, 3, 3)))
    out = conv2d(x, w, padding="valid")
    assert out.shape == (1, 1, 3, 3)
    assert np.all(out.data == 9)


def test_conv2d_channel_mismatch_is_shape_error():
    with pytest.raises(InvalidShapeError, match="channels"):
        conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


def test_conv1x1_stride2_picks_even_pixels():
    x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
    w = np.ones((1, 1, 1, 1), dtype=np.float32)
    out = conv1x1(Tensor(x), Tensor(w), stride=2).data
    np.testing.assert_array_equal(out[0, 0], x[0, 0, ::2, ::2])


def test_maxpool_picks_first_of_ties():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    sum_all(maxpool2x2(x)).backward()
    np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])


def test_maxpool_odd_size_rejected():
    with pytest.raises(InvalidShapeError):
        maxpool2x2(Tensor(np.zeros((1, 1, 3, 4))))


def test_upsample_is_nearest_neighbour():
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    np.testing.assert_array_equal(upsample2x(x).data[0, 0], [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])


def test_mul_broadcasts_single_channel_only():
    a = Tensor(np.ones((1, 3, 2, 2)))
    assert mul(a, Tensor(np.full((1, 1, 2, 2), 2.0))).data.sum() == 24
    with pytest.raises(InvalidShapeError):
        mul(a, Tensor(np.ones((1, 2, 2, 2))))


def test_add_shape_mismatch():
    with pytest.raises(InvalidShapeError):
        add(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 3))))


def test_tensor_rejects_five_axes():
    with pytest.raises(InvalidShapeError):
        Tensor(np.zeros((1, 1, 1, 1, 1)))


# -- backward semantics ---------------------------------------------------------------
def test_backward_needs_scalar():
    x = param((2, 2), 0)
    with pytest.raises(ContractError):
        backward(scale(x, 2.0))


def test_backward_rejects_non_finite_loss():
    x = Tensor(np.array([np.inf]), requires_grad=True)
    with pytest.raises(NumericError):
        sum_all(x).backward()


def test_leaf_gradients_accumulate_until_zeroed():
    x = param((3,), 1)
    sum_all(x).backward()
    sum_all(x).backward()
    np.testing.assert_array_equal(x.grad, 2 * np.ones(3))
    x.zero_grad()
    sum_all(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones(3))


def test_shared_subexpression_gradients_add():
    x = param((1, 1, 2, 2), 2)
    y = relu(x)
    loss = sum_all(add(mul(y, y), y))
    loss.backward()
    expected = np.where(x.data > 0, 2 * x.data + 1, 0)
    np.testing.assert_allclose(x.grad, expected, rtol=1e-6)


def test_graph_is_freed_after_backward():
    x = param((2,), 3)
    y = scale(x, 3.0)
    loss = sum_all(y)
    loss.backward()
    assert loss.node is None and y.node is None


def test_frozen_input_passes_gradient_through():
    # a frozen weight gets no grad, but its input still does
    w = param((1, 1, 3, 3), 4)
    w.requires_grad = False
    x = param((1, 1, 4, 4), 5)
    sum_all(conv2d(x, w)).backward()
    assert w.grad is None
    assert x.grad is not None and np.abs(x.grad).sum() > 0


# -- gradient checks per primitive -------------------------------------------------
def _check(build, shape, **kw):
    report = grad_check(build, shape, **kw)
    assert report.passed, "\n".join(report.lines())
    return report


def test_gradcheck_conv2d_with_bias():
    w, b = param((2, 3, 3, 3), 10, "w"), param((2,), 11, "b")
    proj = projection((2, 2, 5, 4))
    _check(lambda: ({"w": w, "b": b}, lambda x: weighted_sum(conv2d(x, w, b), proj)), (2, 3, 5, 4))


def test_gradcheck_conv1x1_stride2():
    w, b = param((3, 2, 1, 1), 12, "w"), param((3,), 13, "b")
    proj = projection((1, 3, 2, 3))
    _check(lambda: ({"w": w, "b": b}, lambda x: weighted_sum(conv1x1(x, w, b, stride=2), proj)), (1, 2, 4, 6))


@pytest.mark.parametrize(
    "op,shape",
    [
        (relu, (1, 2, 4, 4)),
        (sigmoid, (1, 2, 4, 4)),
        (maxpool2x2, (2, 2, 4, 6)),
        (upsample2x, (1, 2, 3, 3)),
        (lambda t: scale(t, -1.7, 0.3), (1, 1, 3, 3)),
    ],
    ids=["relu", "sigmoid", "maxpool", "upsample", "scale"],
)
def test_gradcheck_unary(op, shape):
    out_shape = op(Tensor(np.zeros(shape))).shape
    proj = projection(out_shape)
    _check(lambda: ({}, lambda x: weighted_sum(op(x), proj)), shape)


def test_gradcheck_binary_ops():
    other = param((1, 1, 4, 4), 20, "gate")
    same = param((1, 3, 4, 4), 21, "other")
    proj = projection((1, 6, 4, 4))

    def loss(x):
        m = mul(x, other)
        s = add(x, same)
        return weighted_sum(concat_channels(m, s), proj)

    _check(lambda: ({"gate": other, "other": same}, loss), (1, 3, 4, 4))


def test_gradcheck_reductions():
    _check(lambda: ({}, lambda x: add(sum_all(x), scale(mean_all(x), 3.0))), (2, 3))


def test_gradcheck_reports_frozen_as_skipped():
    w = param((1, 1, 3, 3), 30, "w")
    w.requires_grad = False
    report = _check(lambda: ({"w": w}, lambda x: sum_all(conv2d(x, w))), (1, 1, 4, 4))
    assert report.params[0].status == "skipped (frozen)"


def test_gradcheck_detects_a_wrong_gradient():
    from fabcorrect.autodiff.tensor import Tensor as T

    def bad_square(x):
        return T.from_op(x.data**2, "bad", (x,), lambda g: (g * 3 * x.data,))

    report = grad_check(lambda: ({}, lambda x: sum_all(bad_square(x))), (3, 3))
    assert not report.passed


def test_relative_error_guards_zero():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1.0, 1.01) == pytest.approx(0.01 / 1.01)
