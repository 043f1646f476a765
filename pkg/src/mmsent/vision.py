"""Visual attention: channel gates, spatial gates, and region features.

The pipeline refines a backbone feature map in two stages. Channel attention
computes one nonnegative gate per channel from globally pooled features
through a shared two-layer MLP; spatial attention computes one nonnegative
gate per location from channel-pooled maps through a wide convolution. The
doubly gated map, flattened to one row per spatial location, is the region
feature matrix handed to the multimodal stages.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor, TensorError, glorot_uniform


@dataclass
class FeatureMap:
    """[H, W, C] activations from the backbone (or supplied precomputed)."""

    values: Tensor

    def __post_init__(self):
        if self.values.data.ndim != 3:
            raise TensorError(f"feature map must be [H, W, C], got {self.values.shape}")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


@dataclass
class BiAttentiveFeatures:
    """[m, d] region features: m = H*W locations in row-major order, d = C."""

    values: Tensor

    def __post_init__(self):
        if self.values.data.ndim != 2:
            raise TensorError(
                f"region features must be [m, d], got {self.values.shape}")

    @property
    def regions(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


class ChannelAttentionParams:
    """Shared MLP of the channel gate: w0 [C, C/r], w1 [C/r, C].

    The same weights serve the average-pooled and max-pooled branches; the
    hidden width is ``max(1, C // reduction)``.
    """

    def __init__(self, w0: Tensor, w1: Tensor, reduction: int):
        c, hidden = w0.shape
        if w1.shape != (hidden, c):
            raise TensorError(
                f"channel MLP shapes disagree: w0 {w0.shape}, w1 {w1.shape}")
        self.w0 = w0
        self.w1 = w1
        self.reduction = reduction

    @property
    def channels(self) -> int:
        return self.w0.shape[0]

    # init gain on the output layer: with zero-mean weights the relu gate
    # starts half dead at ~0.05 scale, which crushes the visual branch by
    # orders of magnitude and stalls training; nonnegative scaled-up weights
    # start every gate alive near 1
    OUTPUT_GAIN = 8.0

    @classmethod
    def initialized(cls, channels: int, reduction: int,
                    rng: np.random.Generator) -> "ChannelAttentionParams":
        hidden = max(1, channels // reduction)
        w1 = glorot_uniform(rng, (hidden, channels))
        w1.data = np.abs(w1.data) * cls.OUTPUT_GAIN
        return cls(glorot_uniform(rng, (channels, hidden)), w1, reduction)


class SpatialAttentionParams:
    """Wide convolution over the stacked channel pools: kernel [k, k, 2, 1]."""

    def __init__(self, kernel: Tensor, bias: Tensor):
        if kernel.data.ndim != 4 or kernel.data.shape[2:] != (2, 1):
            raise TensorError(
                f"spatial kernel must be [k, k, 2, 1], got {kernel.shape}")
        self.kernel = kernel
        self.bias = bias

    # the bias starts at 1 so the relu gate begins alive (~identity mask)
    # instead of half dead at near-zero scale
    BIAS_INIT = 1.0

    @classmethod
    def initialized(cls, rng: np.random.Generator,
                    kernel_size: int = 7) -> "SpatialAttentionParams":
        k = kernel_size
        fan = k * k * 2
        limit = np.sqrt(6.0 / (fan + k * k))
        kernel = Tensor(rng.uniform(-limit, limit, size=(k, k, 2, 1)),
                        requires_grad=True)
        return cls(kernel, Tensor(np.full(1, cls.BIAS_INIT), requires_grad=True))


class BackboneParams:
    """Small trainable stack standing in for a pretrained CNN.

    Each block is conv(3x3, same) -> relu -> 2x2 mean downsample, so a
    32x32 input maps to a 4x4 grid after the default three blocks. Two
    coordinate channels are appended to the raw image before the first
    convolution so that pooled features can still tell *where* activity
    happened.
    """

    COORD_CHANNELS = 2

    def __init__(self, kernels: list[Tensor], biases: list[Tensor], trainable: bool):
        if len(kernels) != len(biases):
            raise TensorError("backbone kernels and biases must pair up")
        self.kernels = kernels
        self.biases = biases
        self.trainable = trainable
        for k in kernels + biases:
            k.requires_grad = trainable
            if trainable and k.grad is None:
                k.zero_grad()

    @property
    def out_channels(self) -> int:
        return self.kernels[-1].shape[3]

    @classmethod
    def initialized(cls, channels: int, rng: np.random.Generator,
                    blocks: int = 3, trainable: bool = True) -> "BackboneParams":
        kernels, biases = [], []
        c_in = 3 + cls.COORD_CHANNELS
        for _ in range(blocks):
            fan_in, fan_out = 9 * c_in, 9 * channels
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            kernels.append(Tensor(rng.uniform(-limit, limit,
                                              size=(3, 3, c_in, channels)),
                                  requires_grad=trainable))
            biases.append(Tensor(np.zeros(channels), requires_grad=trainable))
            c_in = channels
        return cls(kernels, biases, trainable)


def _with_coords(image: np.ndarray) -> np.ndarray:
    h, w, _ = image.shape
    ys = np.linspace(-1.0, 1.0, h)[:, None].repeat(w, axis=1)
    xs = np.linspace(-1.0, 1.0, w)[None, :].repeat(h, axis=0)
    return np.concatenate([image, ys[:, :, None], xs[:, :, None]], axis=2)


def backbone_features(params: BackboneParams | None = None,
                      image: np.ndarray | None = None,
                      precomputed: np.ndarray | None = None,
                      channels: int | None = None) -> FeatureMap:
    """Produce the [H, W, C] map from a raw image or pass a precomputed one.

    Exactly one of ``image`` / ``precomputed`` must be given. Precomputed
    maps are validated against the expected channel count and passed through
    untouched; raw images run through the backbone stack.
    """
    if (image is None) == (precomputed is None):
        raise TensorError("supply exactly one of image or precomputed map")
    if precomputed is not None:
        arr = np.asarray(precomputed, dtype=np.float64)
        if arr.ndim != 3:
            raise TensorError(f"precomputed map must be [H, W, C], got {arr.shape}")
        expected = channels if channels is not None else (
            params.out_channels if params is not None else None)
        if expected is not None and arr.shape[2] != expected:
            raise TensorError(
                f"precomputed map has {arr.shape[2]} channels, expected {expected}")
        return FeatureMap(Tensor(arr))
    if params is None:
        raise TensorError("raw images need backbone parameters")
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise TensorError(f"image must be [H, W, 3], got {arr.shape}")
    x = Tensor(_with_coords(arr))
    for kernel, bias in zip(params.kernels, params.biases):
        x = T.avg_pool2x2(T.relu(T.conv2d_same(x, kernel, bias)))
    return FeatureMap(x)


def channel_attention(fmap: FeatureMap, params: ChannelAttentionParams) -> Tensor:
    """Per-channel gates [1, 1, C]: shared MLP over the two global pools,
    branch outputs summed, then relu. Entries are >= 0 and unbounded above."""
    c = fmap.channels
    if c != params.channels:
        raise TensorError(
            f"map has {c} channels but attention params expect {params.channels}")

    def branch(pooled: Tensor) -> Tensor:
        flat = T.reshape(pooled, (c,))
        return T.vecmat(T.relu(T.vecmat(flat, params.w0)), params.w1)

    gates = T.relu(T.add(branch(T.global_pool(fmap.values, "max")),
                         branch(T.global_pool(fmap.values, "avg"))))
    return T.reshape(gates, (1, 1, c))


def refine_channels(fmap: FeatureMap, gates: Tensor) -> FeatureMap:
    """Scale every channel of the map by its gate."""
    if gates.shape != (1, 1, fmap.channels):
        raise TensorError(
            f"channel gates must be [1, 1, {fmap.channels}], got {gates.shape}")
    return FeatureMap(T.mul(fmap.values, gates))


def spatial_attention(fmap: FeatureMap, params: SpatialAttentionParams) -> Tensor:
    """Per-location gates [H, W, 1] from the stacked avg/max channel pools
    through the wide convolution, then relu."""
    stacked = T.concat([T.channel_pool(fmap.values, "avg"),
                        T.channel_pool(fmap.values, "max")], axis=2)
    return T.relu(T.conv2d_same(stacked, params.kernel, params.bias))


def bi_attentive_with_maps(
    fmap: FeatureMap,
    channel_params: ChannelAttentionParams,
    spatial_params: SpatialAttentionParams,
) -> tuple[BiAttentiveFeatures, Tensor, Tensor]:
    """Run both attention stages; also return the gate maps for export."""
    gates = channel_attention(fmap, channel_params)
    refined = refine_channels(fmap, gates)
    spatial = spatial_attention(refined, spatial_params)
    gated = T.mul(refined.values, spatial)
    m = fmap.height * fmap.width
    features = BiAttentiveFeatures(T.reshape(gated, (m, fmap.channels)))
    return features, gates, spatial


def bi_attentive_features(
    fmap: FeatureMap,
    channel_params: ChannelAttentionParams,
    spatial_params: SpatialAttentionParams,
) -> BiAttentiveFeatures:
    """[H*W, C] region features after channel and spatial gating."""
    features, _, _ = bi_attentive_with_maps(fmap, channel_params, spatial_params)
    return features


def flatten_regions(fmap: FeatureMap) -> BiAttentiveFeatures:
    """Reshape a map to region rows without any gating (ablation wiring)."""
    m = fmap.height * fmap.width
    return BiAttentiveFeatures(T.reshape(fmap.values, (m, fmap.channels)))
