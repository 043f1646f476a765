import math

import numpy as np
import pytest

from mmsent import tensor as T
from mmsent import text as X
from mmsent.gradcheck import check_gradients
from mmsent.tensor import Tensor, TensorError


def scalar_lstm_reference(xs, w, u, b):
    """Step-by-step scalar recurrence for e = h = 1, plain Python floats."""

    def sig(v):
        return 1.0 / (1.0 + math.exp(-v))

    h = c = 0.0
    out = []
    for x in xs:
        i = sig(x * w["input"] + h * u["input"] + b["input"])
        f = sig(x * w["forget"] + h * u["forget"] + b["forget"])
        g = math.tanh(x * w["cell"] + h * u["cell"] + b["cell"])
        o = sig(x * w["output"] + h * u["output"] + b["output"])
        c = f * c + i * g
        h = o * math.tanh(c)
        out.append(h)
    return out


def make_scalar_params(w, u, b):
    return X.LstmParams(
        {g: Tensor([[w[g]]], requires_grad=True) for g in X.LstmParams.GATES},
        {g: Tensor([[u[g]]], requires_grad=True) for g in X.LstmParams.GATES},
        {g: Tensor([b[g]], requires_grad=True) for g in X.LstmParams.GATES},
    )


class TestEmbedding:
    def test_single_lookup(self):
        rng = np.random.default_rng(0)
        emb = X.EmbeddingMatrix.random(5, 3, rng)
        out = X.embed([2], emb)
        assert np.array_equal(out.data, emb.values.data[2:3])

    def test_padding_rows_are_zero(self):
        emb = X.EmbeddingMatrix.random(5, 3, np.random.default_rng(1))
        out = X.embed([0, 0], emb)
        assert np.array_equal(out.data, np.zeros((2, 3)))

    def test_order_preserved(self):
        emb = X.EmbeddingMatrix.random(6, 2, np.random.default_rng(2))
        out = X.embed([1, 3, 1], emb)
        expect = emb.values.data[[1, 3, 1]]
        assert np.array_equal(out.data, expect)

    def test_out_of_range_names_position(self):
        emb = X.EmbeddingMatrix.random(4, 2, np.random.default_rng(3))
        with pytest.raises(TensorError, match=r"id 9 at position 1"):
            X.embed([1, 9], emb)

    def test_frozen_lookup_stays_off_tape(self):
        emb = X.EmbeddingMatrix.random(4, 2, np.random.default_rng(4))
        out = X.embed([1, 2], emb)
        assert not out.requires_grad and out._tape is None

    def test_trainable_lookup_gets_gradients(self):
        emb = X.EmbeddingMatrix.random(4, 2, np.random.default_rng(5),
                                       trainable=True)
        out = X.embed([1, 2, 1], emb)
        T.backward(T.reduce_sum(out))
        assert emb.values.grad[1].sum() == pytest.approx(4.0)  # used twice
        assert emb.values.grad[3].sum() == 0.0

    def test_token_sequence_validation(self):
        with pytest.raises(TensorError, match="empty"):
            X.TokenSequence(())
        with pytest.raises(TensorError, match="nonnegative"):
            X.TokenSequence((1, -2))


class TestLstm:
    def test_zero_parameters_fixed_point(self):
        zeros = {g: 0.0 for g in X.LstmParams.GATES}
        p = make_scalar_params(zeros, zeros, zeros)
        out = X.lstm_forward(Tensor(np.ones((4, 1))), p)
        # with all-zero weights o = 0.5, c stays 0, so h = 0.5 * tanh(0) = 0
        assert np.array_equal(out.values.data, np.zeros((4, 1)))

    def test_outputs_strictly_bounded(self):
        rng = np.random.default_rng(6)
        p = X.LstmParams.initialized(3, 5, rng)
        for _ in range(10):
            xs = Tensor(rng.normal(size=(7, 3)) * 5)
            out = X.lstm_forward(xs, p).values.data
            assert np.all(np.abs(out) < 1.0)

    def test_matches_scalar_recurrence(self):
        rng = np.random.default_rng(7)
        w = {g: float(rng.normal()) for g in X.LstmParams.GATES}
        u = {g: float(rng.normal()) for g in X.LstmParams.GATES}
        b = {g: float(rng.normal()) for g in X.LstmParams.GATES}
        xs = [0.7, -1.2]
        p = make_scalar_params(w, u, b)
        out = X.lstm_forward(Tensor(np.array(xs).reshape(2, 1)), p)
        expect = scalar_lstm_reference(xs, w, u, b)
        assert np.allclose(out.values.data.ravel(), expect, atol=1e-14)

    def test_prefix_causality_bit_exact(self):
        rng = np.random.default_rng(8)
        p = X.LstmParams.initialized(2, 4, rng)
        xs = rng.normal(size=(6, 2))
        base = X.lstm_forward(Tensor(xs), p).values.data
        perturbed = xs.copy()
        perturbed[4] += 10.0
        out = X.lstm_forward(Tensor(perturbed), p).values.data
        assert np.array_equal(out[:4], base[:4])
        assert not np.array_equal(out[4:], base[4:])

    def test_gradients_through_recurrence(self):
        rng = np.random.default_rng(9)
        p = X.LstmParams.initialized(2, 3, rng)
        xs = Tensor(rng.normal(size=(5, 2)), requires_grad=True)
        weights = rng.normal(size=(5, 3))

        def loss():
            out = X.lstm_forward(xs, p)
            return T.reduce_sum(T.mul(out.values, Tensor(weights)))

        params = [xs] + [t for _, t in p.tensors()]
        assert check_gradients(loss, params) < 1e-6

    def test_forget_bias_initialized_to_one(self):
        p = X.LstmParams.initialized(2, 3, np.random.default_rng(0))
        assert np.array_equal(p.b["forget"].data, np.ones(3))
        assert np.array_equal(p.b["input"].data, np.zeros(3))

    def test_width_mismatch(self):
        p = X.LstmParams.initialized(3, 2, np.random.default_rng(1))
        with pytest.raises(TensorError, match="width"):
            X.lstm_forward(Tensor(np.zeros((4, 2))), p)

    def test_gate_shape_validation(self):
        rng = np.random.default_rng(2)
        good = X.LstmParams.initialized(2, 2, rng)
        bad_w = dict(good.w)
        bad_w["forget"] = Tensor(np.zeros((3, 2)))
        with pytest.raises(TensorError, match="identically"):
            X.LstmParams(bad_w, good.u, good.b)
