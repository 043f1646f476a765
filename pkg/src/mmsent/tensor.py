"""Dense float64 tensors with taped reverse-mode automatic differentiation.

Every value is a row-major numpy array of 64-bit reals. Operations are plain
functions: they compute the forward value and, when gradients are enabled and
any input has ``requires_grad`` set, append one record to a tape. A tape's
recording order is a valid topological order of the graph, so ``backward``
replays the records once, in reverse, accumulating gradients for every node
that is reached by more than one path.

Reductions that feed attention weights (``softmax`` normalizer,
``weighted_rowsum``) accumulate in sorted order so the result depends only on
the multiset of summands, not on their ordering. That keeps word-permutation
equivariance bit-exact.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "TensorError",
    "no_grad",
    "is_grad_enabled",
    "record_custom",
    "backward",
    "glorot_uniform",
    "add",
    "add_n",
    "add_scalar",
    "neg",
    "scale",
    "mul",
    "log",
    "relu",
    "tanh",
    "sigmoid",
    "activation",
    "softmax",
    "matmul",
    "vecmat",
    "reshape",
    "concat",
    "gather_rows",
    "weighted_rowsum",
    "reduce_sum",
    "reduce_mean",
    "global_pool",
    "channel_pool",
    "conv2d_same",
    "avg_pool2x2",
    "dropout",
]


class TensorError(ValueError):
    """Shape or domain violation in a tensor operation."""


class Tensor:
    """Dense multi-dimensional float64 array with an optional gradient slot.

    ``grad`` exists whenever ``requires_grad`` is set; leaves allocate it as
    zeros up front, operation outputs leave it ``None`` until ``backward``
    populates it. A populated gradient always matches ``data`` in shape.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 0 and min(arr.shape) == 0:
            raise TensorError(f"tensor extents must be positive, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._tape: Tape | None = None

    @classmethod
    def _from_op(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = requires_grad
        out.grad = None
        out._tape = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise TensorError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered records of taped operations.

    Each record is ``(op name, input tensors, output tensor, backward fn)``
    appended at execution time, so the list order is a topological order of
    the computation DAG. A tape is consumed by its one backward sweep; tapes
    of independently built subgraphs are merged when an operation joins them.
    """

    __slots__ = ("records", "consumed", "_merged_into")

    def __init__(self):
        self.records: list[tuple] = []
        self.consumed = False
        self._merged_into: Tape | None = None


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording inside the block (forward evaluation only)."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _resolve(tape: Tape | None) -> Tape | None:
    while tape is not None and tape._merged_into is not None:
        tape = tape._merged_into
    return tape


def _tape_for(inputs: Sequence[Tensor]) -> Tape:
    tape: Tape | None = None
    for t in inputs:
        other = _resolve(t._tape)
        if other is None or other is tape:
            continue
        if tape is None:
            tape = other
        else:
            # Independent subgraphs: concatenation preserves topological order.
            tape.records.extend(other.records)
            other.records = []
            other._merged_into = tape
    return tape if tape is not None else Tape()


def record_custom(
    op: str,
    inputs: Sequence[Tensor],
    out_data: np.ndarray,
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Create the output tensor for a differentiable operation.

    ``backward_fn`` receives the gradient on the output and returns one
    gradient (or None) per input, in order. Recording happens only when
    gradients are enabled and some input requires them.
    """
    needs = is_grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor._from_op(out_data, needs)
    if needs:
        tape = _tape_for(inputs)
        tape.records.append((op, tuple(inputs), out, backward_fn))
        out._tape = tape
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` for every requires_grad tensor reachable from ``loss``.

    The loss must be a scalar produced through taped operations. Gradients of
    nodes reached along several paths are summed. The tape is consumed: a
    second backward over it raises.
    """
    if loss.data.size != 1:
        raise TensorError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = _resolve(loss._tape)
    if tape is None:
        raise TensorError("loss was not produced by taped operations")
    if tape.consumed:
        raise TensorError("tape already consumed by a previous backward")
    tape.consumed = True

    pending: dict[int, tuple[Tensor, np.ndarray]] = {
        id(loss): (loss, np.ones_like(loss.data))
    }
    for op, inputs, out, fn in reversed(tape.records):
        entry = pending.pop(id(out), None)
        if entry is None:
            continue
        g = entry[1]
        if out.requires_grad:
            out.grad = g if out.grad is None else out.grad + g
        for t, ig in zip(inputs, fn(g)):
            if ig is None or not t.requires_grad:
                continue
            prev = pending.get(id(t))
            pending[id(t)] = (t, ig) if prev is None else (t, prev[1] + ig)
    # Whatever is left never appeared as an output: these are the leaves.
    for t, g in pending.values():
        t.grad = g if t.grad is None else t.grad + g
    tape.records.clear()


def glorot_uniform(rng: np.random.Generator, shape: Sequence[int],
                   fan_in: int | None = None, fan_out: int | None = None) -> Tensor:
    """Trainable tensor drawn from the fan-scaled uniform distribution."""
    shape = tuple(shape)
    if fan_in is None or fan_out is None:
        if len(shape) != 2:
            raise TensorError("glorot_uniform needs explicit fans for non-matrix shapes")
        fan_in, fan_out = shape
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


# ---------------------------------------------------------------------------
# element-wise and broadcasting arithmetic


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    ash, bsh = a.data.shape, b.data.shape

    def back(g):
        return _unbroadcast(g, ash), _unbroadcast(g, bsh)

    return record_custom("add", (a, b), out, back)


def add_n(parts: Sequence[Tensor]) -> Tensor:
    """Sum of same-shape tensors in one record."""
    parts = tuple(parts)
    if not parts:
        raise TensorError("add_n needs at least one tensor")
    out = parts[0].data.copy()
    for p in parts[1:]:
        if p.data.shape != out.shape:
            raise TensorError("add_n requires identical shapes")
        out += p.data

    def back(g):
        return tuple(g for _ in parts)

    return record_custom("add_n", parts, out, back)


def add_scalar(a: Tensor, c: float) -> Tensor:
    return record_custom("add_scalar", (a,), a.data + c, lambda g: (g,))


def neg(a: Tensor) -> Tensor:
    return record_custom("neg", (a,), -a.data, lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    return record_custom("scale", (a,), a.data * c, lambda g: (g * c,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    ad, bd = a.data, b.data

    def back(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return record_custom("mul", (a, b), out, back)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise TensorError("log requires strictly positive inputs")
    ad = a.data
    return record_custom("log", (a,), np.log(ad), lambda g: (g / ad,))


# ---------------------------------------------------------------------------
# activations


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0  # derivative at 0 defined as 0
    out = np.where(mask, a.data, 0.0)
    return record_custom("relu", (a,), out, lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return record_custom("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    pos = x >= 0
    out = np.empty_like(x)
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_stable(a.data)
    return record_custom("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def activation(a: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(a)
    if kind == "tanh":
        return tanh(a)
    raise TensorError(f"unknown activation kind {kind!r} (expected 'relu' or 'tanh')")


def softmax(x: Tensor) -> Tensor:
    """Stable softmax over a 1-D tensor; the normalizer sums exponentials in
    sorted order so the output is invariant to permuting the inputs."""
    if x.data.ndim != 1:
        raise TensorError(f"softmax expects a vector, got shape {x.shape}")
    shifted = x.data - x.data.max()
    e = np.exp(shifted)
    z = np.sum(np.sort(e))
    p = e / z

    def back(g):
        return (p * (g - np.dot(g, p)),)

    return record_custom("softmax", (x,), p, back)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise TensorError(
            f"matmul expects matrices, got shapes {a.shape} and {b.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise TensorError(
            f"matmul inner extents disagree: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def back(g):
        return g @ bd.T, ad.T @ g

    return record_custom("matmul", (a, b), out, back)


def vecmat(x: Tensor, a: Tensor) -> Tensor:
    """Row vector times matrix: ``[n] @ [n, m] -> [m]``."""
    if x.data.ndim != 1 or a.data.ndim != 2 or x.data.shape[0] != a.data.shape[0]:
        raise TensorError(
            f"vecmat expects [n] and [n, m], got shapes {x.shape} and {a.shape}")
    xd, ad = x.data, a.data
    out = xd @ ad

    def back(g):
        return ad @ g, np.outer(xd, g)

    return record_custom("vecmat", (x, a), out, back)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    src = a.data.shape
    out = a.data.reshape(shape)

    def back(g):
        return (g.reshape(src),)

    return record_custom("reshape", (a,), out, back)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise TensorError("concat needs at least one tensor")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return record_custom("concat", parts, out, back)


def gather_rows(a: Tensor, ids: Sequence[int]) -> Tensor:
    """Select rows (leading-axis entries) by index; duplicates allowed."""
    idx = np.asarray(ids, dtype=np.intp)
    if idx.ndim != 1:
        raise TensorError("gather_rows expects a flat index list")
    n = a.data.shape[0]
    for pos, i in enumerate(idx):
        if i < 0 or i >= n:
            raise TensorError(f"row id {int(i)} out of range [0, {n}) at position {pos}")
    out = a.data[idx]
    src_shape = a.data.shape

    def back(g):
        da = np.zeros(src_shape)
        np.add.at(da, idx, g)
        return (da,)

    return record_custom("gather_rows", (a,), out, back)


def weighted_rowsum(w: Tensor, rows: Tensor) -> Tensor:
    """``sum_i w[i] * rows[i]`` with order-canonical accumulation.

    Summands are sorted per output column before adding, so the result is
    bit-identical under any simultaneous permutation of ``w`` and ``rows``.
    """
    if w.data.ndim != 1 or rows.data.ndim != 2 or w.data.shape[0] != rows.data.shape[0]:
        raise TensorError(
            f"weighted_rowsum expects [n] and [n, d], got {w.shape} and {rows.shape}")
    wd, rd = w.data, rows.data
    prod = wd[:, None] * rd
    out = np.sum(np.sort(prod, axis=0), axis=0)

    def back(g):
        return rd @ g, np.outer(wd, g)

    return record_custom("weighted_rowsum", (w, rows), out, back)


def reduce_sum(a: Tensor, axis: int | None = None) -> Tensor:
    ad = a.data
    out = ad.sum(axis=axis)

    def back(g):
        if axis is None:
            return (np.full(ad.shape, g),)
        return (np.broadcast_to(np.expand_dims(g, axis), ad.shape).copy(),)

    return record_custom("reduce_sum", (a,), np.asarray(out), back)


def reduce_mean(a: Tensor, axis: int | None = None) -> Tensor:
    ad = a.data
    n = ad.size if axis is None else ad.shape[axis]
    out = ad.mean(axis=axis)

    def back(g):
        if axis is None:
            return (np.full(ad.shape, g / n),)
        return (np.broadcast_to(np.expand_dims(g / n, axis), ad.shape).copy(),)

    return record_custom("reduce_mean", (a,), np.asarray(out), back)


# ---------------------------------------------------------------------------
# spatial operations on [H, W, C] maps


def _check_map(a: Tensor, op: str) -> tuple[int, int, int]:
    if a.data.ndim != 3:
        raise TensorError(f"{op} expects an [H, W, C] map, got shape {a.shape}")
    return a.data.shape


def global_pool(a: Tensor, mode: str) -> Tensor:
    """Squeeze the spatial extents: ``[H, W, C] -> [1, 1, C]``.

    Max mode routes the gradient to the first (row-major) argmax per channel.
    """
    h, w, c = _check_map(a, "global_pool")
    flat = a.data.reshape(h * w, c)
    if mode == "avg":
        out = flat.mean(axis=0).reshape(1, 1, c)

        def back(g):
            gf = g.reshape(c) / (h * w)
            return (np.broadcast_to(gf, (h * w, c)).reshape(h, w, c).copy(),)

    elif mode == "max":
        idx = flat.argmax(axis=0)  # first occurrence on ties
        out = flat[idx, np.arange(c)].reshape(1, 1, c)

        def back(g):
            da = np.zeros((h * w, c))
            da[idx, np.arange(c)] = g.reshape(c)
            return (da.reshape(h, w, c),)

    else:
        raise TensorError(f"unknown pool mode {mode!r} (expected 'avg' or 'max')")
    return record_custom(f"global_pool_{mode}", (a,), out, back)


def channel_pool(a: Tensor, mode: str) -> Tensor:
    """Pool across channels: ``[H, W, C] -> [H, W, 1]``."""
    h, w, c = _check_map(a, "channel_pool")
    if mode == "avg":
        out = a.data.mean(axis=2, keepdims=True)

        def back(g):
            return (np.broadcast_to(g / c, (h, w, c)).copy(),)

    elif mode == "max":
        idx = a.data.argmax(axis=2)  # first occurrence on ties
        out = np.take_along_axis(a.data, idx[:, :, None], axis=2)

        def back(g):
            da = np.zeros((h, w, c))
            np.put_along_axis(da, idx[:, :, None], g, axis=2)
            return (da,)

    else:
        raise TensorError(f"unknown pool mode {mode!r} (expected 'avg' or 'max')")
    return record_custom(f"channel_pool_{mode}", (a,), out, back)


def _im2col(xp: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    # padded input [h+k-1, w+k-1, ci] -> [h*w, k*k*ci] with (ki, kj, ci) order
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(0, 1))
    return win.transpose(0, 1, 3, 4, 2).reshape(h * w, -1)


def conv2d_same(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Stride-1 same-padding cross-correlation.

    ``x``: [H, W, C_in], ``kernel``: [k, k, C_in, C_out] with odd k,
    ``bias``: [C_out]. Output spatial extents equal the input's.
    """
    h, w, ci = _check_map(x, "conv2d_same")
    if kernel.data.ndim != 4 or kernel.data.shape[0] != kernel.data.shape[1]:
        raise TensorError(f"kernel must be [k, k, C_in, C_out], got {kernel.shape}")
    k = kernel.data.shape[0]
    if k % 2 == 0:
        raise TensorError(f"kernel size must be odd, got {k}")
    if kernel.data.shape[2] != ci:
        raise TensorError(
            f"kernel expects {kernel.data.shape[2]} input channels, map has {ci}")
    co = kernel.data.shape[3]
    if bias.data.shape != (co,):
        raise TensorError(f"bias must be [{co}], got shape {bias.shape}")

    pad = (k - 1) // 2
    xp = np.pad(x.data, ((pad, pad), (pad, pad), (0, 0)))
    cols = _im2col(xp, k, h, w)                      # [h*w, k*k*ci]
    kmat = kernel.data.reshape(-1, co)               # [k*k*ci, co]
    out = (cols @ kmat + bias.data).reshape(h, w, co)

    def back(g):
        gf = g.reshape(h * w, co)
        dk = (cols.T @ gf).reshape(kernel.data.shape)
        db = gf.sum(axis=0)
        # input gradient is the correlation of g with the flipped kernel
        gp = np.pad(g, ((pad, pad), (pad, pad), (0, 0)))
        gcols = _im2col(gp, k, h, w)                                  # [h*w, k*k*co]
        kflip = kernel.data[::-1, ::-1].transpose(0, 1, 3, 2).reshape(-1, ci)
        dx = (gcols @ kflip).reshape(h, w, ci)
        return dx, dk, db

    return record_custom("conv2d_same", (x, kernel, bias), out, back)


def avg_pool2x2(x: Tensor) -> Tensor:
    """Stride-2 2x2 mean pooling; spatial extents must be even."""
    h, w, c = _check_map(x, "avg_pool2x2")
    if h % 2 or w % 2:
        raise TensorError(f"avg_pool2x2 needs even spatial extents, got {h}x{w}")
    out = x.data.reshape(h // 2, 2, w // 2, 2, c).mean(axis=(1, 3))

    def back(g):
        return (np.repeat(np.repeat(g / 4.0, 2, axis=0), 2, axis=1),)

    return record_custom("avg_pool2x2", (x,), out, back)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; ``rate == 0`` returns the input unchanged."""
    if not 0.0 <= rate < 1.0:
        raise TensorError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    mask = (rng.random(x.data.shape) >= rate) / (1.0 - rate)
    return record_custom("dropout", (x,), x.data * mask, lambda g: (g * mask,))
