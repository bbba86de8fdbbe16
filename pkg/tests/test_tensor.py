import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from xai_kit import tensor as T
from xai_kit.errors import ContractError, DimensionError, EvaluationError


def naive_conv(x, k, b, stride=1):
    n, c, h, w = x.shape
    f, _, kh, kw = k.shape
    oh, ow = (h - kh) // stride + 1, (w - kw) // stride + 1
    out = np.zeros((n, f, oh, ow))
    for i in range(n):
        for o in range(f):
            for r in range(oh):
                for s in range(ow):
                    acc = b[o]
                    for ch in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += x[i, ch, r * stride + u, s * stride + v] * k[o, ch, u, v]
                    out[i, o, r, s] = acc
    return out


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


class TestConv:
    def test_all_ones(self):
        out = T.conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 2, 2)), np.zeros(1))
        np.testing.assert_array_equal(out.value, np.full((1, 1, 2, 2), 4.0))

    def test_zero_kernel_gives_bias(self):
        x = np.random.default_rng(0).normal(size=(2, 3, 5, 6))
        out = T.conv2d(x, np.zeros((4, 3, 3, 3)), np.arange(4.0))
        for f in range(4):
            assert np.all(out.value[:, f] == f)

    def test_counting_case_matches_loop(self):
        x = np.arange(1.0, 17.0).reshape(1, 1, 4, 4)
        k = np.arange(1.0, 10.0).reshape(1, 1, 3, 3)
        # frozen from the loop oracle: top-left window sum of x*k
        expected = np.array([[[[348.0, 393.0], [528.0, 573.0]]]])
        np.testing.assert_array_equal(naive_conv(x, k, np.zeros(1)), expected)
        np.testing.assert_array_equal(T.conv2d(x, k, np.zeros(1)).value, expected)

    @pytest.mark.parametrize("stride", [1, 2])
    def test_random_against_loop(self, stride):
        rng = np.random.default_rng(stride)
        x, k, b = rng.normal(size=(2, 3, 7, 6)), rng.normal(size=(4, 3, 3, 2)), rng.normal(size=4)
        np.testing.assert_allclose(T.conv2d(x, k, b, stride).value, naive_conv(x, k, b, stride), atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            T.conv2d(np.ones((1, 2, 4, 4)), np.ones((1, 3, 2, 2)), np.zeros(1))

    def test_kernel_larger_than_input(self):
        with pytest.raises(DimensionError):
            T.conv2d(np.ones((1, 1, 2, 2)), np.ones((1, 1, 3, 3)), np.zeros(1))

    def test_float32_stays_float32(self):
        x = np.ones((1, 1, 3, 3), np.float32)
        out = T.conv2d(x, np.ones((1, 1, 2, 2), np.float32), np.zeros(1, np.float32))
        assert out.dtype == np.float32


class TestMaxpool:
    def test_window_max(self):
        np.testing.assert_array_equal(T.maxpool2d(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])).value, [[[[4.0]]]])

    def test_constant(self):
        out = T.maxpool2d(np.full((1, 2, 6, 6), 3.5))
        assert out.shape == (1, 2, 3, 3) and np.all(out.value == 3.5)

    def test_floor_on_odd_size(self):
        assert T.maxpool2d(np.zeros((1, 1, 5, 7))).shape == (1, 1, 2, 3)

    def test_gradient_to_argmax(self):
        x = T.Node(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        T.backward(T.maxpool2d(x).sum())
        np.testing.assert_array_equal(x.grad, [[[[0.0, 0.0], [0.0, 1.0]]]])

    @given(arrays(np.float64, (1, 2, 4, 6), elements=st.floats(-10, 10)))
    @settings(max_examples=30, deadline=None)
    def test_gradient_mass_conserved(self, data):
        # each output routes exactly its upstream gradient to one input
        x = T.Node(data)
        T.backward(T.maxpool2d(x).sum())
        assert x.grad.sum() == pytest.approx(2 * 2 * 3)
        assert set(np.unique(x.grad)) <= {0.0, 1.0}


class TestDense:
    def test_identity(self):
        x = np.random.default_rng(1).normal(size=(3, 4))
        np.testing.assert_array_equal(T.dense(x, np.eye(4), np.zeros(4)).value, x)

    def test_affine(self):
        np.testing.assert_array_equal(T.dense([[1.0, 2.0]], np.eye(2), [3.0, 4.0]).value, [[4.0, 6.0]])

    def test_against_loop(self):
        rng = np.random.default_rng(2)
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(3, 2))
        np.testing.assert_allclose(T.dense(a, b, np.zeros(2)).value, naive_matmul(a, b), atol=1e-12)
        np.testing.assert_allclose(T.matmul(a, b).value, naive_matmul(a, b), atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            T.dense(np.ones((2, 3)), np.ones((4, 2)), np.zeros(2))


class TestActivations:
    def test_relu(self):
        np.testing.assert_array_equal(T.relu([-1.0, 0.0, 2.0]).value, [0.0, 0.0, 2.0])

    def test_softmax_symmetric(self):
        np.testing.assert_array_equal(T.softmax([[0.0, 0.0]]).value, [[0.5, 0.5]])

    @given(arrays(np.float64, (3, 4), elements=st.floats(-500, 500)))
    @settings(max_examples=50, deadline=None)
    def test_softmax_rows_are_distributions(self, logits):
        p = T.softmax(logits).value
        assert np.all(np.isfinite(p)) and np.all(p >= 0)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)

    @given(arrays(np.float64, (2, 3), elements=st.floats(-50, 50)), st.floats(-100, 100))
    @settings(max_examples=50, deadline=None)
    def test_softmax_shift_invariant(self, logits, c):
        np.testing.assert_allclose(T.softmax(logits + c).value, T.softmax(logits).value, atol=1e-9)

    def test_dropout_inference_identity(self):
        x = T.Node(np.random.default_rng(3).normal(size=(4, 5)))
        assert T.dropout(x, 0.25, training=False) is x

    def test_dropout_expectation(self):
        x = np.ones((200, 500))
        out = T.dropout(x, 0.25, training=True, seed=11).value
        assert set(np.unique(out)) == {0.0, 4.0 / 3.0}
        assert out.mean() == pytest.approx(1.0, abs=0.01)

    def test_dropout_seeded(self):
        x = np.ones((10, 10))
        a = T.dropout(x, 0.5, True, seed=5).value
        np.testing.assert_array_equal(a, T.dropout(x, 0.5, True, seed=5).value)
        assert not np.array_equal(a, T.dropout(x, 0.5, True, seed=6).value)

    def test_dropout_rate_range(self):
        with pytest.raises(ContractError):
            T.dropout(np.ones(3), 1.0, True)


class TestBackward:
    def test_sum_gives_ones(self):
        x = T.Node(np.random.default_rng(4).normal(size=(3, 2)))
        T.backward(x.sum())
        np.testing.assert_array_equal(x.grad, np.ones((3, 2)))

    def test_relu_dead_input(self):
        x = T.Node(np.array([-2.0]))
        T.backward(T.relu(x).sum())
        assert x.grad[0] == 0.0

    def test_needs_scalar(self):
        with pytest.raises(ContractError):
            T.backward(T.Node(np.ones(3)))

    def test_shared_node_accumulates(self):
        x = T.Node(np.array([2.0]))
        T.backward((x * x + x).sum())
        assert x.grad[0] == pytest.approx(5.0)

    def test_gradient_shapes_match_values(self):
        rng = np.random.default_rng(5)
        x = T.Node(rng.normal(size=(2, 1, 6, 6)))
        k = T.Node(rng.normal(size=(2, 1, 3, 3)))
        b = T.Node(np.zeros(2))
        table = T.backward(T.maxpool2d(T.relu(T.conv2d(x, k, b))).sum())
        for node, g in table.items():
            assert g.shape == node.shape

    @given(arrays(np.float64, (2, 3), elements=st.floats(-5, 5)),
           arrays(np.float64, (2, 3), elements=st.floats(-5, 5)), st.floats(-3, 3))
    @settings(max_examples=30, deadline=None)
    def test_linearity(self, a, b, c):
        # d/dx sum(c*x + b) == c everywhere
        x = T.Node(a)
        T.backward((c * x + b).sum())
        np.testing.assert_allclose(x.grad, np.full_like(a, c))


class TestGradCheck:
    def test_sum_is_exact(self):
        assert T.grad_check(lambda x: x.sum(), np.random.default_rng(6).normal(size=5)) < 1e-9

    def test_quadratic(self):
        assert T.grad_check(lambda x: (0.5 * x * x).sum(), np.array([3.0])) < 1e-9

    def test_non_finite(self):
        with pytest.raises(EvaluationError), np.errstate(invalid="ignore"):
            T.grad_check(lambda x: T.log(x).sum(), np.array([-1.0]))

    @pytest.mark.parametrize("seed", range(5))
    def test_primitives(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(2, 2, 6, 6))
        k = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        w = rng.normal(size=(12, 4))
        worst = max(
            T.parameters_grad_check(lambda n: (T.conv2d(n[0], n[1], n[2]) * 0.1).sum(), [x, k, b]),
            T.parameters_grad_check(lambda n: T.conv2d(n[0], n[1], n[2], stride=2).sum(), [x, k, b]),
            T.grad_check(lambda n: (T.maxpool2d(n) * T.maxpool2d(n)).sum(), x),
            T.grad_check(lambda n: T.log(T.softmax(n)).sum() * 0.3 + T.take(T.softmax(n), 1, axis=1).sum(),
                         rng.normal(size=(3, 4))),
            T.parameters_grad_check(lambda n: (T.dense(n[0], n[1], n[2]) * T.dense(n[0], n[1], n[2])).sum(),
                                    [rng.normal(size=(3, 12)), w, rng.normal(size=4)]),
            T.grad_check(lambda n: T.relu(n * 1.0 + 0.0).mean() + T.clip(n, -0.5, 0.5).sum(),
                         rng.normal(size=(4, 5)) + 0.01),
            T.grad_check(lambda n: T.reduce_sum(T.reshape(n, (6, 2)) * T.flatten(n).reshape(6, 2)), rng.normal(size=(3, 4))),
        )
        assert worst < 1e-4
