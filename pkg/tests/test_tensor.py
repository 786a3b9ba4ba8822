import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attrfuse import tensor as T
from attrfuse.gradcheck import away_from_zero, distinct_windows
from attrfuse.tensor import DimensionError, NonFiniteError, Tensor, backward, grad_check


def weighted_sum(out, w):
    return T.tensor_sum(T.multiply(out, T.constant(w)))


# ---------------------------------------------------------------- affine


def test_affine_identity_weights():
    out = T.affine(Tensor([[1.0, 2.0]]), Tensor(np.eye(2)), Tensor([0.0, 0.0]))
    np.testing.assert_array_equal(out.data, [[1.0, 2.0]])


def test_affine_hand_arithmetic():
    out = T.affine(Tensor([[1.0, 1.0]]), Tensor([[2.0], [3.0]]), Tensor([1.0]))
    np.testing.assert_array_equal(out.data, [[6.0]])


def test_affine_weight_gradient_matches_finite_differences(rng):
    x = rng.standard_normal((3, 4))
    b = rng.standard_normal(2)
    err = grad_check(lambda w: T.tensor_sum(T.affine(T.constant(x), w, T.constant(b))), rng.standard_normal((4, 2)))
    assert err < 1e-4


def test_affine_shape_mismatch():
    with pytest.raises(DimensionError, match="inner dimensions"):
        T.affine(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))), Tensor(np.zeros(2)))


# ---------------------------------------------------------------- conv2d


def test_conv_delta_kernel_is_identity(rng):
    x = rng.standard_normal((1, 1, 4, 4))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    np.testing.assert_array_equal(T.conv2d(Tensor(x), Tensor(k)).data, x)


def test_conv_preserves_spatial_size(rng):
    out = T.conv2d(Tensor(rng.standard_normal((1, 1, 64, 64))), Tensor(rng.standard_normal((8, 1, 3, 3))))
    assert out.shape == (1, 8, 64, 64)


def test_conv_matches_direct_loop(rng):
    x = rng.standard_normal((2, 3, 5, 4))
    k = rng.standard_normal((2, 3, 3, 3))
    b = rng.standard_normal(2)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 2, 5, 4))
    for n in range(2):
        for f in range(2):
            for i in range(5):
                for j in range(4):
                    ref[n, f, i, j] = (xp[n, :, i : i + 3, j : j + 3] * k[f]).sum() + b[f]
    np.testing.assert_allclose(T.conv2d(Tensor(x), Tensor(k), Tensor(b)).data, ref, rtol=1e-12, atol=1e-12)


def test_conv_gradients(rng):
    x = rng.standard_normal((1, 2, 6, 6))
    k = rng.standard_normal((3, 2, 3, 3))
    w = rng.standard_normal((1, 3, 6, 6))
    assert grad_check(lambda v: weighted_sum(T.conv2d(v, T.constant(k)), w), x) < 1e-4
    assert grad_check(lambda v: weighted_sum(T.conv2d(T.constant(x), v), w), k) < 1e-4


def test_conv_channel_mismatch():
    with pytest.raises(DimensionError, match="channels"):
        T.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


# ---------------------------------------------------------------- maxpool


def test_maxpool_single_window():
    out = T.maxpool2d(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]]))
    assert out.data.reshape(-1).tolist() == [4.0]


def test_maxpool_ties_route_to_first_element():
    x = Tensor(np.full((1, 1, 4, 4), 3.0), requires_grad=True)
    out = T.maxpool2d(x)
    np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 3.0))
    backward(T.tensor_sum(out))
    expected = np.zeros((4, 4))
    expected[0::2, 0::2] = 1.0
    np.testing.assert_array_equal(x.grad[0, 0], expected)


def test_maxpool_gradient(rng):
    x = distinct_windows(rng, (1, 1, 8, 8))
    w = rng.standard_normal((1, 1, 4, 4))
    assert grad_check(lambda v: weighted_sum(T.maxpool2d(v), w), x) < 1e-4


def test_maxpool_odd_extent():
    with pytest.raises(DimensionError, match="not even"):
        T.maxpool2d(Tensor(np.ones((1, 1, 3, 4))))


# ---------------------------------------------------------------- relu


def test_relu_values():
    assert T.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]


def test_relu_all_negative_has_zero_gradient():
    x = Tensor(-np.arange(1.0, 6.0), requires_grad=True)
    out = T.relu(x)
    (g,) = backward(T.tensor_sum(out), [x])
    assert not out.data.any()
    assert not g.any()


def test_relu_gradient_mask(rng):
    data = rng.standard_normal((5, 7))
    x = Tensor(data, requires_grad=True)
    (g,) = backward(T.tensor_sum(T.relu(x)), [x])
    np.testing.assert_array_equal(g, (data > 0).astype(float))


# ---------------------------------------------------------------- softmax


@pytest.mark.parametrize(
    "logits, expected",
    [([0.0, 0.0], [0.5, 0.5]), ([1000.0, 1000.0], [0.5, 0.5]), ([np.log(1.0), np.log(3.0)], [0.25, 0.75])],
)
def test_softmax_examples(logits, expected):
    np.testing.assert_allclose(T.softmax(Tensor(logits)).data, expected, rtol=0, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 6), st.floats(0.1, 50.0))
def test_softmax_rows_are_distributions(seed, k, spread):
    x = np.random.default_rng(seed).standard_normal((4, k)) * spread
    p = T.softmax(Tensor(x)).data
    assert np.all(p > 0)
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-6)


# ---------------------------------------------------------------- concat


def test_concat_shapes_and_identity(rng):
    a = Tensor(rng.standard_normal((3, 2048)))
    b = Tensor(rng.standard_normal((3, 4)))
    assert T.concat([a, b], axis=1).shape == (3, 2052)
    assert T.concat([a], axis=1) is a


def test_concat_gradient_splits_back(rng):
    a = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
    ga, gb = backward(T.tensor_sum(T.concat([a, b], axis=1)), [a, b])
    np.testing.assert_array_equal(ga, np.ones((2, 3)))
    np.testing.assert_array_equal(gb, np.ones((2, 2)))


def test_concat_mismatch():
    with pytest.raises(DimensionError):
        T.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3)))], axis=1)


# ---------------------------------------------------------------- backward


def test_backward_sum_gives_ones(rng):
    w = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
    (g,) = backward(T.tensor_sum(w), [w])
    np.testing.assert_array_equal(g, np.ones((3, 2)))


def test_backward_unreached_leaf_gets_zeros(rng):
    w = Tensor(rng.standard_normal(3), requires_grad=True)
    other = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
    _, g = backward(T.tensor_sum(w), [w, other])
    np.testing.assert_array_equal(g, np.zeros((2, 2)))


def test_backward_rejects_non_scalar():
    with pytest.raises(DimensionError, match="scalar"):
        backward(Tensor(np.ones(3), requires_grad=True))


def test_backward_accumulates_shared_uses(rng):
    x = Tensor(rng.standard_normal(4), requires_grad=True)
    (g,) = backward(T.tensor_sum(T.multiply(x, x)), [x])
    np.testing.assert_allclose(g, 2 * x.data)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_backward_is_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    w = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    x = T.constant(rng.standard_normal((2, 3)))
    bias = T.constant(np.zeros(4))

    def l1():
        return T.tensor_sum(T.relu(T.affine(x, w, bias)))

    def l2():
        return T.tensor_sum(T.softmax(T.affine(x, w, bias)) * T.constant(rng_w))

    rng_w = rng.standard_normal((2, 4))
    (g1,) = backward(l1(), [w])
    (g2,) = backward(l2(), [w])
    (g12,) = backward(l1() * a + l2() * b, [w])
    np.testing.assert_allclose(g12, a * g1 + b * g2, rtol=0, atol=1e-10)


def test_replay_is_bitwise_deterministic():
    def run():
        rng = np.random.default_rng(5)
        x = Tensor(rng.standard_normal((2, 2, 4, 4)), requires_grad=True)
        k = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
        out = T.tensor_sum(T.maxpool2d(T.relu(T.conv2d(x, k))))
        return out.data.copy(), *backward(out, [x, k])

    for a, b in zip(run(), run()):
        assert a.tobytes() == b.tobytes()


def test_non_finite_values_are_errors():
    with pytest.raises(NonFiniteError):
        T.affine(Tensor([[np.inf]]), Tensor([[1.0]]), Tensor([0.0]))


# ---------------------------------------------------------------- grad_check


def test_grad_check_sum_of_squares(rng):
    assert grad_check(lambda x: T.tensor_sum(T.multiply(x, x)), rng.standard_normal((3, 3))) < 1e-7


def test_grad_check_softmax_cross_entropy(rng):
    labels = rng.integers(0, 4, size=5)
    err = grad_check(lambda z: T.scale(T.tensor_sum(T.log_pick(T.softmax(z), labels)), -0.2), rng.standard_normal((5, 4)))
    assert err < 1e-4


def test_grad_check_constant_function(rng):
    assert grad_check(lambda x: T.tensor_sum(T.constant(np.ones(3))) + T.scale(T.tensor_sum(x), 0.0),
                      rng.standard_normal(3)) == 0.0


def test_grad_check_detects_wrong_gradient(monkeypatch, rng):
    def bad_relu(x):
        mask = x.data > 0
        return T._node(np.where(mask, x.data, 0.0), (x,), lambda g: (2 * g * mask,), "relu")

    monkeypatch.setattr(T, "relu", bad_relu)
    assert grad_check(lambda x: T.tensor_sum(T.relu(x)), away_from_zero(rng.standard_normal(6))) > 0.4


@pytest.mark.parametrize("seed", range(20))
def test_every_op_passes_grad_check_across_seeds(seed):
    from attrfuse.gradcheck import op_checks

    for name, check in op_checks(seed).items():
        assert check() < 1e-4, name
