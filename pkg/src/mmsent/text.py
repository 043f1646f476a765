"""Text encoding: embedding lookup followed by a single-layer LSTM.

The recurrence is the standard one (sigmoid input/forget/output gates, tanh
candidate and output squashing), run in one direction from zero initial
state. It is implemented as a single taped operation whose backward is
ordinary backpropagation through time, which keeps the per-sample tape short.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor, TensorError, glorot_uniform, record_custom


@dataclass(frozen=True)
class TokenSequence:
    """Token ids in [0, V); id 0 is reserved for padding / out-of-vocabulary."""

    ids: tuple[int, ...]

    def __post_init__(self):
        if len(self.ids) < 1:
            raise TensorError("token sequence must not be empty")
        if any(i < 0 for i in self.ids):
            raise TensorError("token ids must be nonnegative")

    def __len__(self) -> int:
        return len(self.ids)


class EmbeddingMatrix:
    """[V, e] word vectors; row 0 is forced to zero. Frozen by default."""

    def __init__(self, values: Tensor, trainable: bool = False):
        if values.data.ndim != 2:
            raise TensorError(f"embedding matrix must be [V, e], got {values.shape}")
        values.data[0, :] = 0.0
        values.requires_grad = trainable
        if trainable and values.grad is None:
            values.zero_grad()
        self.values = values
        self.trainable = trainable

    @property
    def vocab_size(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @classmethod
    def random(cls, vocab_size: int, width: int, rng: np.random.Generator,
               trainable: bool = False) -> "EmbeddingMatrix":
        values = rng.normal(0.0, 1.0 / np.sqrt(width), size=(vocab_size, width))
        return cls(Tensor(values), trainable=trainable)


def embed(tokens: TokenSequence | list[int], matrix: EmbeddingMatrix) -> Tensor:
    """[S, e] stacked vectors. Joins the tape only when the matrix trains."""
    ids = tokens.ids if isinstance(tokens, TokenSequence) else tuple(tokens)
    v = matrix.vocab_size
    for pos, i in enumerate(ids):
        if not 0 <= i < v:
            raise TensorError(
                f"token id {i} at position {pos} outside vocabulary [0, {v})")
    if matrix.trainable:
        return T.gather_rows(matrix.values, list(ids))
    return Tensor(matrix.values.data[list(ids)])


@dataclass(frozen=True)
class WordFeatures:
    """[S, h] hidden states, one row per word; every entry is in (-1, 1)."""

    values: Tensor

    def __post_init__(self):
        if self.values.data.ndim != 2:
            raise TensorError(f"word features must be [S, h], got {self.values.shape}")


class LstmParams:
    """Gate weights: input/forget/candidate/output each with [e, h] input
    weights, [h, h] recurrent weights and an [h] bias."""

    GATES = ("input", "forget", "cell", "output")

    def __init__(self, w: dict[str, Tensor], u: dict[str, Tensor],
                 b: dict[str, Tensor]):
        e, h = w["input"].shape
        for g in self.GATES:
            if w[g].shape != (e, h) or u[g].shape != (h, h) or b[g].shape != (h,):
                raise TensorError("all four gates must be dimensioned identically")
        self.w = w
        self.u = u
        self.b = b

    @property
    def input_width(self) -> int:
        return self.w["input"].shape[0]

    @property
    def hidden_width(self) -> int:
        return self.w["input"].shape[1]

    @classmethod
    def initialized(cls, input_width: int, hidden_width: int,
                    rng: np.random.Generator) -> "LstmParams":
        w, u, b = {}, {}, {}
        for g in cls.GATES:
            w[g] = glorot_uniform(rng, (input_width, hidden_width))
            u[g] = glorot_uniform(rng, (hidden_width, hidden_width))
            init = np.ones(hidden_width) if g == "forget" else np.zeros(hidden_width)
            b[g] = Tensor(init, requires_grad=True)
        return cls(w, u, b)

    def tensors(self) -> list[tuple[str, Tensor]]:
        out = []
        for g in self.GATES:
            out.append((f"w_{g}", self.w[g]))
            out.append((f"u_{g}", self.u[g]))
            out.append((f"b_{g}", self.b[g]))
        return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    pos = x >= 0
    out = np.empty_like(x)
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def lstm_forward(x: Tensor, params: LstmParams) -> WordFeatures:
    """All S hidden states of the recurrence over [S, e] inputs, h0 = c0 = 0."""
    if x.data.ndim != 2:
        raise TensorError(f"lstm input must be [S, e], got {x.shape}")
    e, h = params.input_width, params.hidden_width
    if x.data.shape[1] != e:
        raise TensorError(f"lstm expects width {e}, got {x.data.shape[1]}")
    s = x.data.shape[0]
    order = LstmParams.GATES  # a-vector layout: [input, forget, cell, output]
    wx = np.concatenate([params.w[g].data for g in order], axis=1)   # [e, 4h]
    wh = np.concatenate([params.u[g].data for g in order], axis=1)   # [h, 4h]
    bias = np.concatenate([params.b[g].data for g in order])         # [4h]

    xs = x.data
    hs = np.zeros((s, h))
    h_prev = np.zeros((s, h))   # h_{t-1} per step
    c_prev = np.zeros((s, h))   # c_{t-1} per step
    gi = np.zeros((s, h))
    gf = np.zeros((s, h))
    gg = np.zeros((s, h))
    go = np.zeros((s, h))
    tc = np.zeros((s, h))       # tanh(c_t)
    ht = np.zeros(h)
    ct = np.zeros(h)
    for t in range(s):
        h_prev[t] = ht
        c_prev[t] = ct
        a = xs[t] @ wx + ht @ wh + bias
        gi[t] = _sigmoid(a[:h])
        gf[t] = _sigmoid(a[h:2 * h])
        gg[t] = np.tanh(a[2 * h:3 * h])
        go[t] = _sigmoid(a[3 * h:])
        ct = gf[t] * ct + gi[t] * gg[t]
        tc[t] = np.tanh(ct)
        ht = go[t] * tc[t]
        hs[t] = ht

    inputs = [x]
    for g in order:
        inputs.extend([params.w[g], params.u[g], params.b[g]])

    def back(gh: np.ndarray):
        da_all = np.zeros((s, 4 * h))
        dh_carry = np.zeros(h)
        dc_carry = np.zeros(h)
        for t in range(s - 1, -1, -1):
            dh = gh[t] + dh_carry
            do = dh * tc[t]
            dc = dc_carry + dh * go[t] * (1.0 - tc[t] ** 2)
            di = dc * gg[t]
            dg = dc * gi[t]
            df = dc * c_prev[t]
            dc_carry = dc * gf[t]
            da = da_all[t]
            da[:h] = di * gi[t] * (1.0 - gi[t])
            da[h:2 * h] = df * gf[t] * (1.0 - gf[t])
            da[2 * h:3 * h] = dg * (1.0 - gg[t] ** 2)
            da[3 * h:] = do * go[t] * (1.0 - go[t])
            dh_carry = wh @ da
        dx = da_all @ wx.T
        dwx = xs.T @ da_all
        dwh = h_prev.T @ da_all
        db = da_all.sum(axis=0)
        grads: list[np.ndarray | None] = [dx]
        for gidx in range(4):
            sl = slice(gidx * h, (gidx + 1) * h)
            grads.extend([dwx[:, sl], dwh[:, sl], db[sl]])
        return grads

    return WordFeatures(record_custom("lstm", inputs, hs, back))
