import math

import numpy as np
import pytest

from mmsent import tensor as T
from mmsent.gradcheck import check_gradients
from mmsent.tensor import Tensor, TensorError, backward


def matmul_oracle(a, b):
    # independent triple-loop product
    p, q = a.shape
    q2, r = b.shape
    out = np.zeros((p, r))
    for i in range(p):
        for j in range(r):
            for k in range(q):
                out[i, j] += a[i, k] * b[k, j]
    return out


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = T.matmul(Tensor(np.eye(2)), a)
        assert np.array_equal(out.data, a.data)

    def test_zeros(self):
        out = T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.ones((3, 4))))
        assert np.array_equal(out.data, np.zeros((2, 4)))

    def test_against_loop_oracle(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[5.0], [6.0]])
        out = T.matmul(Tensor(a), Tensor(b))
        assert np.array_equal(out.data, [[17.0], [39.0]])
        assert np.array_equal(out.data, matmul_oracle(a, b))

    def test_random_against_oracle(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
        assert np.allclose(T.matmul(Tensor(a), Tensor(b)).data,
                           matmul_oracle(a, b), atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(TensorError, match="inner extents"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
        with pytest.raises(TensorError, match="matrices"):
            T.matmul(Tensor(np.zeros(3)), Tensor(np.zeros((3, 2))))

    def test_associativity(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            a = Tensor(rng.normal(size=(3, 4)))
            b = Tensor(rng.normal(size=(4, 5)))
            c = Tensor(rng.normal(size=(5, 2)))
            left = T.matmul(T.matmul(a, b), c).data
            right = T.matmul(a, T.matmul(b, c)).data
            assert np.allclose(left, right, atol=1e-9)


class TestConv2dSame:
    def test_delta_kernel_is_identity(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(5, 4, 3))
        k = np.zeros((3, 3, 3, 3))
        for c in range(3):
            k[1, 1, c, c] = 1.0
        out = T.conv2d_same(Tensor(x), Tensor(k), Tensor(np.zeros(3)))
        assert np.abs(out.data - x).max() < 1e-15

    def test_ones_center_sums_overlap(self):
        # 3x3 all-ones input under a 7x7 all-ones kernel: the center output
        # sees the whole 3x3 overlap, so it equals 9
        x = Tensor(np.ones((3, 3, 1)))
        k = Tensor(np.ones((7, 7, 1, 1)))
        out = T.conv2d_same(x, k, Tensor(np.zeros(1)))
        assert out.data[1, 1, 0] == pytest.approx(9.0)
        # independent direct summation at every location
        direct = np.zeros((3, 3))
        for i in range(3):
            for j in range(3):
                for di in range(-3, 4):
                    for dj in range(-3, 4):
                        if 0 <= i + di < 3 and 0 <= j + dj < 3:
                            direct[i, j] += 1.0
        assert np.allclose(out.data[:, :, 0], direct)

    def test_zero_kernel_gives_bias_map(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.normal(size=(4, 4, 2)))
        out = T.conv2d_same(x, Tensor(np.zeros((3, 3, 2, 5))),
                            Tensor(np.full(5, 2.5)))
        assert np.array_equal(out.data, np.full((4, 4, 5), 2.5))

    def test_even_kernel_rejected(self):
        with pytest.raises(TensorError, match="odd"):
            T.conv2d_same(Tensor(np.zeros((4, 4, 1))),
                          Tensor(np.zeros((4, 4, 1, 1))), Tensor(np.zeros(1)))

    def test_channel_mismatch_rejected(self):
        with pytest.raises(TensorError, match="channels"):
            T.conv2d_same(Tensor(np.zeros((4, 4, 2))),
                          Tensor(np.zeros((3, 3, 3, 1))), Tensor(np.zeros(1)))

    def test_gradients(self):
        rng = np.random.default_rng(7)
        x = Tensor(rng.normal(size=(4, 3, 2)), requires_grad=True)
        k = Tensor(rng.normal(size=(3, 3, 2, 2)), requires_grad=True)
        b = Tensor(rng.normal(size=2), requires_grad=True)

        def loss():
            return T.reduce_sum(T.tanh(T.conv2d_same(x, k, b)))

        assert check_gradients(loss, [x, k, b]) < 1e-6


class TestPooling:
    def test_global_pool_constant(self):
        x = Tensor(np.full((3, 5, 2), 4.25))
        for mode in ("avg", "max"):
            out = T.global_pool(x, mode)
            assert out.shape == (1, 1, 2)
            assert np.array_equal(out.data.ravel(), [4.25, 4.25])

    def test_global_pool_values(self):
        x = Tensor(np.array([[1.0, 3.0], [5.0, 7.0]]).reshape(2, 2, 1))
        assert T.global_pool(x, "avg").data.ravel()[0] == pytest.approx(4.0)  # 16/4
        assert T.global_pool(x, "max").data.ravel()[0] == pytest.approx(7.0)

    def test_global_max_backward_mass(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.normal(size=(3, 4, 2)), requires_grad=True)
        out = T.global_pool(x, "max")
        backward(T.reduce_sum(out))
        # gradient lands only on the argmax cells and sums to the seed mass
        assert np.count_nonzero(x.grad) == 2
        assert x.grad.sum() == pytest.approx(2.0)
        for c in range(2):
            flat = x.data[:, :, c].ravel()
            gflat = x.grad[:, :, c].ravel()
            assert gflat[flat.argmax()] == 1.0

    def test_global_max_tie_breaks_first_row_major(self):
        x = np.zeros((2, 2, 1))
        x[0, 1, 0] = 5.0
        x[1, 0, 0] = 5.0
        t = Tensor(x, requires_grad=True)
        backward(T.reduce_sum(T.global_pool(t, "max")))
        assert t.grad[0, 1, 0] == 1.0 and t.grad[1, 0, 0] == 0.0

    def test_channel_pool(self):
        x = np.zeros((1, 1, 2))
        x[0, 0] = [2.0, 4.0]
        assert T.channel_pool(Tensor(x), "avg").data.ravel()[0] == pytest.approx(3.0)
        assert T.channel_pool(Tensor(x), "max").data.ravel()[0] == pytest.approx(4.0)

    def test_channel_pool_single_channel_identity(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(3, 3, 1))
        for mode in ("avg", "max"):
            assert np.array_equal(T.channel_pool(Tensor(x), mode).data, x)

    def test_bad_mode(self):
        with pytest.raises(TensorError, match="pool mode"):
            T.global_pool(Tensor(np.zeros((2, 2, 1))), "median")

    def test_avg_pool2x2(self):
        x = np.arange(16.0).reshape(4, 4, 1)
        out = T.avg_pool2x2(Tensor(x))
        assert out.shape == (2, 2, 1)
        assert out.data[0, 0, 0] == pytest.approx((0 + 1 + 4 + 5) / 4)
        with pytest.raises(TensorError, match="even"):
            T.avg_pool2x2(Tensor(np.zeros((3, 4, 1))))


class TestActivations:
    def test_relu(self):
        out = T.relu(Tensor([-1.0, 0.0, 2.0]))
        assert np.array_equal(out.data, [0.0, 0.0, 2.0])

    def test_relu_derivative_zero_at_zero(self):
        x = Tensor([0.0], requires_grad=True)
        backward(T.reduce_sum(T.relu(x)))
        assert x.grad[0] == 0.0

    def test_tanh(self):
        assert T.tanh(Tensor([0.0])).data[0] == 0.0
        big = T.tanh(Tensor([1e3, -1e3, 50.0, -50.0])).data
        assert np.all(np.isfinite(big))
        assert abs(big[0] - 1.0) < 1e-9 and abs(big[1] + 1.0) < 1e-9

    def test_activation_dispatch(self):
        x = Tensor([-1.0, 1.0])
        assert np.array_equal(T.activation(x, "relu").data, [0.0, 1.0])
        assert np.allclose(T.activation(x, "tanh").data, np.tanh([-1.0, 1.0]))
        with pytest.raises(TensorError, match="activation kind"):
            T.activation(x, "selu")

    def test_sigmoid_stable(self):
        out = T.sigmoid(Tensor([1e3, -1e3, 0.0])).data
        assert np.all(np.isfinite(out))
        assert out[0] == pytest.approx(1.0) and out[1] == pytest.approx(0.0)
        assert out[2] == 0.5


class TestSoftmax:
    def test_uniform(self):
        out = T.softmax(Tensor([1.0, 1.0, 1.0])).data
        assert np.allclose(out, [1 / 3] * 3, atol=1e-15)

    def test_forced_values(self):
        out = T.softmax(Tensor([0.0, math.log(3.0)])).data
        assert np.allclose(out, [0.25, 0.75], atol=1e-12)

    def test_shift_invariance(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            x = rng.normal(size=6) * 10
            c = rng.normal() * 100
            a = T.softmax(Tensor(x)).data
            b = T.softmax(Tensor(x + c)).data
            assert np.abs(a - b).max() < 1e-12

    def test_sums_to_one_and_nonnegative(self):
        rng = np.random.default_rng(10)
        for _ in range(200):
            x = rng.normal(size=rng.integers(1, 12)) * 1e3
            p = T.softmax(Tensor(x)).data
            assert np.all(p >= 0.0)
            assert abs(p.sum() - 1.0) < 1e-12

    def test_rejects_matrix(self):
        with pytest.raises(TensorError, match="vector"):
            T.softmax(Tensor(np.zeros((2, 2))))


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(5.0), requires_grad=True)
        backward(T.reduce_sum(x))
        assert np.array_equal(x.grad, np.ones(5))

    def test_square_at_three(self):
        x = Tensor([3.0], requires_grad=True)
        backward(T.reduce_sum(T.mul(x, x)))
        assert x.grad[0] == pytest.approx(6.0)

    def test_multiple_paths_sum(self):
        x = Tensor([2.0], requires_grad=True)
        y = T.add(T.mul(x, x), x)  # y = x^2 + x, dy/dx = 2x + 1 = 5
        backward(T.reduce_sum(y))
        assert x.grad[0] == pytest.approx(5.0)

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(TensorError, match="scalar"):
            backward(T.relu(x))

    def test_untaped_loss_rejected(self):
        with pytest.raises(TensorError, match="taped"):
            backward(Tensor(1.0, requires_grad=True))

    def test_double_backward_rejected(self):
        x = Tensor([1.0], requires_grad=True)
        loss = T.reduce_sum(T.mul(x, x))
        backward(loss)
        with pytest.raises(TensorError, match="consumed"):
            backward(loss)

    def test_independent_subgraph_merge(self):
        a = Tensor([2.0], requires_grad=True)
        b = Tensor([3.0], requires_grad=True)
        # two separately built chains joined by one op
        left = T.mul(a, a)
        right = T.mul(b, b)
        backward(T.reduce_sum(T.add(left, right)))
        assert a.grad[0] == pytest.approx(4.0)
        assert b.grad[0] == pytest.approx(6.0)

    def test_no_grad_suppresses_tape(self):
        x = Tensor([1.0], requires_grad=True)
        with T.no_grad():
            y = T.reduce_sum(T.mul(x, x))
        assert y._tape is None and not y.requires_grad

    def test_random_composite_graph_matches_finite_differences(self):
        rng = np.random.default_rng(42)
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        c = Tensor(rng.normal(size=2), requires_grad=True)

        def loss():
            y = T.tanh(T.matmul(a, b))           # [3, 2]
            z = T.mul(y, y)
            v = T.vecmat(c, T.reshape(z, (2, 3)))
            return T.reduce_sum(T.log(T.add_scalar(T.relu(v), 1.0)))

        assert check_gradients(loss, [a, b, c]) < 1e-6


class TestFiniteDifferencePerOp:
    """Every differentiable primitive against central differences."""

    def _check(self, build, params):
        assert check_gradients(build, params) < 1e-6

    def test_add_mul_broadcast(self):
        rng = np.random.default_rng(21)
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4,)), requires_grad=True)
        self._check(lambda: T.reduce_sum(T.mul(T.add(a, b), b)), [a, b])

    def test_scale_neg_add_scalar(self):
        rng = np.random.default_rng(22)
        a = Tensor(rng.normal(size=5), requires_grad=True)
        self._check(
            lambda: T.reduce_sum(T.neg(T.scale(T.add_scalar(a, 3.0), 1.7))), [a])

    def test_log(self):
        a = Tensor([0.5, 1.5, 2.5], requires_grad=True)
        self._check(lambda: T.reduce_sum(T.log(a)), [a])

    def test_activations(self):
        rng = np.random.default_rng(23)
        a = Tensor(rng.normal(size=6) + 0.05, requires_grad=True)
        self._check(lambda: T.reduce_sum(T.tanh(a)), [a])
        self._check(lambda: T.reduce_sum(T.sigmoid(a)), [a])
        self._check(lambda: T.reduce_sum(T.relu(a)), [a])

    def test_softmax(self):
        rng = np.random.default_rng(24)
        a = Tensor(rng.normal(size=5), requires_grad=True)
        w = rng.normal(size=5)
        self._check(lambda: T.reduce_sum(T.mul(T.softmax(a), Tensor(w))), [a])

    def test_vecmat_and_gather(self):
        rng = np.random.default_rng(25)
        x = Tensor(rng.normal(size=4), requires_grad=True)
        a = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        self._check(
            lambda: T.reduce_sum(T.gather_rows(T.vecmat(x, a), [0, 2, 0])), [x, a])

    def test_weighted_rowsum(self):
        rng = np.random.default_rng(26)
        w = Tensor(rng.normal(size=4), requires_grad=True)
        rows = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        self._check(lambda: T.reduce_sum(T.tanh(T.weighted_rowsum(w, rows))), [w, rows])

    def test_reductions_and_shape_ops(self):
        rng = np.random.default_rng(27)
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        self._check(lambda: T.reduce_sum(T.tanh(T.reduce_mean(a, axis=0))), [a])
        self._check(
            lambda: T.reduce_sum(T.tanh(T.concat([a, b], axis=1))), [a, b])
        self._check(
            lambda: T.reduce_sum(T.mul(T.reshape(a, (2, 6)), T.reshape(a, (2, 6)))), [a])

    def test_pools(self):
        rng = np.random.default_rng(28)
        x = Tensor(rng.normal(size=(4, 4, 3)), requires_grad=True)
        self._check(lambda: T.reduce_sum(T.global_pool(x, "avg")), [x])
        self._check(lambda: T.reduce_sum(T.global_pool(x, "max")), [x])
        self._check(lambda: T.reduce_sum(T.tanh(T.channel_pool(x, "avg"))), [x])
        self._check(lambda: T.reduce_sum(T.tanh(T.channel_pool(x, "max"))), [x])
        self._check(lambda: T.reduce_sum(T.tanh(T.avg_pool2x2(x))), [x])

    def test_add_n(self):
        rng = np.random.default_rng(29)
        parts = [Tensor(rng.normal(size=3), requires_grad=True) for _ in range(4)]
        self._check(lambda: T.reduce_sum(T.tanh(T.add_n(parts))), parts)


class TestDropout:
    def test_rate_zero_is_identity(self):
        x = Tensor(np.arange(4.0))
        out = T.dropout(x, 0.0, np.random.default_rng(0))
        assert out is x

    def test_scaling_and_gradient(self):
        x = Tensor(np.ones(1000), requires_grad=True)
        out = T.dropout(x, 0.5, np.random.default_rng(3))
        kept = out.data != 0
        assert np.allclose(out.data[kept], 2.0)
        backward(T.reduce_sum(out))
        assert np.allclose(x.grad[kept], 2.0)
        assert np.allclose(x.grad[~kept], 0.0)

    def test_bad_rate(self):
        with pytest.raises(TensorError, match="rate"):
            T.dropout(Tensor([1.0]), 1.0, np.random.default_rng(0))


class TestTensorBasics:
    def test_invariants(self):
        t = Tensor([[1.0, 2.0]], requires_grad=True)
        assert t.data.size == 2 and t.grad.shape == t.data.shape
        assert Tensor(3.0).shape == ()

    def test_zero_extent_rejected(self):
        with pytest.raises(TensorError, match="positive"):
            Tensor(np.zeros((0, 2)))

    def test_weighted_rowsum_permutation_bit_exact(self):
        rng = np.random.default_rng(31)
        w = rng.normal(size=7)
        rows = rng.normal(size=(7, 5))
        base = T.weighted_rowsum(Tensor(w), Tensor(rows)).data
        for seed in range(5):
            perm = np.random.default_rng(seed).permutation(7)
            out = T.weighted_rowsum(Tensor(w[perm]), Tensor(rows[perm])).data
            assert np.array_equal(out, base)

    def test_gather_rows_out_of_range(self):
        with pytest.raises(TensorError, match=r"out of range.*position 1"):
            T.gather_rows(Tensor(np.zeros((3, 2))), [0, 5])
