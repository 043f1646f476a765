"""Joint multimodal learning: word-level semantic attention guided by the
visual context, a two-element self-attention fusion over the modality
vectors, and the softmax sentiment classifier.

``SentimentModel`` wires the full pipeline (backbone -> channel/spatial
attention -> text encoder -> semantic attention -> fusion -> classifier) and
also carries the three ablated wirings used by the ablation harness:

* ``no_sa_ca``  - the backbone map is flattened to regions with no gating
* ``no_smatt``  - the text side is the final LSTM state, no word attention
* ``no_satt``   - the projected modality vectors are concatenated instead of
  softmax-averaged, doubling the classifier input width
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor, TensorError, glorot_uniform
from .text import EmbeddingMatrix, LstmParams, WordFeatures, embed, lstm_forward
from .vision import (
    BackboneParams,
    BiAttentiveFeatures,
    ChannelAttentionParams,
    FeatureMap,
    SpatialAttentionParams,
    backbone_features,
    bi_attentive_with_maps,
    flatten_regions,
)

ABLATIONS = ("none", "no_sa_ca", "no_smatt", "no_satt")


class SemanticAttentionParams:
    """Visual projection p_v [d, h] and per-word score map w [h, 1]."""

    def __init__(self, p_v: Tensor, w: Tensor):
        if p_v.data.ndim != 2 or w.data.ndim != 2 or w.shape[1] != 1:
            raise TensorError("semantic attention expects p_v [d, h] and w [h, 1]")
        if p_v.shape[1] != w.shape[0]:
            raise TensorError(
                f"projection output width {p_v.shape[1]} must equal score width {w.shape[0]}")
        self.p_v = p_v
        self.w = w

    @classmethod
    def initialized(cls, region_width: int, hidden_width: int,
                    rng: np.random.Generator) -> "SemanticAttentionParams":
        return cls(glorot_uniform(rng, (region_width, hidden_width)),
                   glorot_uniform(rng, (hidden_width, 1)))


class SelfAttentionParams:
    """Modality projections q_t [h, p], q_v [d, p], score weights w [p, 1]
    and scalar bias; the score activation is tanh."""

    def __init__(self, q_t: Tensor, q_v: Tensor, w: Tensor | None,
                 b: Tensor | None):
        if q_t.shape[1] != q_v.shape[1]:
            raise TensorError(
                f"both projections must target one width, got {q_t.shape} and {q_v.shape}")
        if (w is None) != (b is None):
            raise TensorError("score weights and bias must be supplied together")
        if w is not None and w.shape != (q_t.shape[1], 1):
            raise TensorError(f"score weights must be [{q_t.shape[1]}, 1], got {w.shape}")
        self.q_t = q_t
        self.q_v = q_v
        self.w = w
        self.b = b

    @property
    def fused_width(self) -> int:
        return self.q_t.shape[1]

    @classmethod
    def initialized(cls, text_width: int, region_width: int, fused_width: int,
                    rng: np.random.Generator,
                    with_scores: bool = True) -> "SelfAttentionParams":
        q_t = glorot_uniform(rng, (text_width, fused_width))
        q_v = glorot_uniform(rng, (region_width, fused_width))
        if not with_scores:
            return cls(q_t, q_v, None, None)
        return cls(q_t, q_v, glorot_uniform(rng, (fused_width, 1)),
                   Tensor(np.zeros(()), requires_grad=True))


class ClassifierParams:
    """Softmax head: w [in, K] and bias [K] with K in {2, 3}."""

    def __init__(self, w: Tensor, b: Tensor):
        if w.data.ndim != 2 or b.data.ndim != 1 or w.shape[1] != b.shape[0]:
            raise TensorError(f"classifier shapes disagree: {w.shape}, {b.shape}")
        if w.shape[1] not in (2, 3):
            raise TensorError(f"class count must be 2 or 3, got {w.shape[1]}")
        self.w = w
        self.b = b

    @property
    def class_count(self) -> int:
        return self.w.shape[1]

    @classmethod
    def initialized(cls, in_width: int, class_count: int,
                    rng: np.random.Generator) -> "ClassifierParams":
        return cls(glorot_uniform(rng, (in_width, class_count)),
                   Tensor(np.zeros(class_count), requires_grad=True))


@dataclass(frozen=True)
class FusedVector:
    """[p] fused representation, elementwise inside the envelope of the two
    projected modality vectors."""

    values: Tensor


@dataclass(frozen=True)
class SentimentDistribution:
    """[K] class probabilities: nonnegative, summing to 1."""

    probs: Tensor


@dataclass
class AttentionRecord:
    """Learned attention weights captured during one forward pass. Fields are
    None for stages an ablation removed."""

    spatial: np.ndarray | None       # [H, W] gate map
    word_weights: np.ndarray | None  # [S]
    modality_weights: np.ndarray | None  # [2] = (text, visual)
    probs: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def predicted(self) -> int:
        return int(np.argmax(self.probs))


def semantic_attention(
    regions: BiAttentiveFeatures,
    words: WordFeatures,
    params: SemanticAttentionParams,
) -> tuple[Tensor, Tensor]:
    """Image-guided word attention.

    The region rows are mean-pooled and projected into the text width; each
    word state is scored by tanh(w . (query * t_i)), the scores softmax into
    weights alpha, and the attended text feature is the alpha-weighted sum of
    word states. Returns (alpha [S], attended [h]).
    """
    s = words.values.shape[0]
    if s < 1:
        raise TensorError("semantic attention needs at least one word")
    if regions.width != params.p_v.shape[0]:
        raise TensorError(
            f"regions have width {regions.width}, projection expects {params.p_v.shape[0]}")
    if words.values.shape[1] != params.w.shape[0]:
        raise TensorError(
            f"word width {words.values.shape[1]} does not match score width {params.w.shape[0]}")
    query = T.vecmat(T.reduce_mean(regions.values, axis=0), params.p_v)   # [h]
    interactions = T.mul(words.values, query)                             # [S, h]
    scores = T.tanh(T.reshape(T.matmul(interactions, params.w), (s,)))    # [S]
    alpha = T.softmax(scores)
    attended = T.weighted_rowsum(alpha, words.values)                     # [h]
    return alpha, attended


def project_modalities(
    text_vec: Tensor,
    regions: BiAttentiveFeatures,
    params: SelfAttentionParams,
) -> tuple[Tensor, Tensor]:
    """Project the text vector and mean-pooled regions to the fused width."""
    if text_vec.shape[0] != params.q_t.shape[0]:
        raise TensorError(
            f"text width {text_vec.shape[0]} does not match projection {params.q_t.shape}")
    if regions.width != params.q_v.shape[0]:
        raise TensorError(
            f"region width {regions.width} does not match projection {params.q_v.shape}")
    j_text = T.vecmat(text_vec, params.q_t)
    j_vis = T.vecmat(T.reduce_mean(regions.values, axis=0), params.q_v)
    return j_text, j_vis


def self_attention_fuse(
    text_vec: Tensor,
    regions: BiAttentiveFeatures,
    params: SelfAttentionParams,
) -> tuple[Tensor, FusedVector]:
    """Softmax-weighted average of the two projected modality vectors.

    Each vector is scored by tanh(w . J_i + b); the two scores softmax into
    the modality weights u and the fused vector is u_text * J_text +
    u_vis * J_vis. Returns (u [2], fused [p]).
    """
    if params.w is None:
        raise TensorError("self-attention fusion needs score weights")
    j_text, j_vis = project_modalities(text_vec, regions, params)
    p = params.fused_width
    joint = T.concat([T.reshape(j_text, (1, p)), T.reshape(j_vis, (1, p))], axis=0)
    scores = T.tanh(T.reshape(T.add(T.matmul(joint, params.w), params.b), (2,)))
    u = T.softmax(scores)
    fused = T.weighted_rowsum(u, joint)
    return u, FusedVector(fused)


def classify(fused: FusedVector, params: ClassifierParams) -> SentimentDistribution:
    """Softmax over the affine map of the fused vector."""
    if fused.values.shape[0] != params.w.shape[0]:
        raise TensorError(
            f"fused width {fused.values.shape[0]} does not match classifier {params.w.shape}")
    logits = T.add(T.vecmat(fused.values, params.w), params.b)
    return SentimentDistribution(T.softmax(logits))


@dataclass
class ModelConfig:
    """Widths and wiring of one model instance."""

    channels: int = 32
    embed_width: int = 50
    hidden_width: int = 64
    fused_width: int = 128
    reduction: int = 8
    class_count: int = 3
    ablation: str = "none"
    dropout: float = 0.5
    backbone_blocks: int = 3
    backbone_trainable: bool = True
    train_embedding: bool = False

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise TensorError(
                f"unknown ablation {self.ablation!r}, expected one of {ABLATIONS}")
        if self.class_count not in (2, 3):
            raise TensorError(f"class count must be 2 or 3, got {self.class_count}")


class SentimentModel:
    """The full image-text sentiment pipeline with trainable parameters."""

    def __init__(self, config: ModelConfig, embedding: EmbeddingMatrix,
                 rng: np.random.Generator):
        cfg = config
        if embedding.width != cfg.embed_width:
            raise TensorError(
                f"embedding width {embedding.width} does not match config {cfg.embed_width}")
        self.config = cfg
        self.embedding = embedding
        self.backbone = BackboneParams.initialized(
            cfg.channels, rng, blocks=cfg.backbone_blocks,
            trainable=cfg.backbone_trainable)
        d = cfg.channels
        if cfg.ablation == "no_sa_ca":
            self.channel_att = None
            self.spatial_att = None
        else:
            self.channel_att = ChannelAttentionParams.initialized(d, cfg.reduction, rng)
            self.spatial_att = SpatialAttentionParams.initialized(rng)
        self.lstm = LstmParams.initialized(cfg.embed_width, cfg.hidden_width, rng)
        if cfg.ablation == "no_smatt":
            self.semantic = None
        else:
            self.semantic = SemanticAttentionParams.initialized(
                d, cfg.hidden_width, rng)
        self.self_att = SelfAttentionParams.initialized(
            cfg.hidden_width, d, cfg.fused_width, rng,
            with_scores=cfg.ablation != "no_satt")
        head_width = 2 * cfg.fused_width if cfg.ablation == "no_satt" else cfg.fused_width
        self.classifier = ClassifierParams.initialized(head_width, cfg.class_count, rng)

    def parameters(self) -> list[tuple[str, Tensor]]:
        """Trainable tensors in a fixed, deterministic order."""
        out: list[tuple[str, Tensor]] = []
        if self.backbone.trainable:
            for i, (k, b) in enumerate(zip(self.backbone.kernels, self.backbone.biases)):
                out.append((f"backbone.conv{i}.kernel", k))
                out.append((f"backbone.conv{i}.bias", b))
        if self.channel_att is not None:
            out.append(("channel_attention.w0", self.channel_att.w0))
            out.append(("channel_attention.w1", self.channel_att.w1))
            out.append(("spatial_attention.kernel", self.spatial_att.kernel))
            out.append(("spatial_attention.bias", self.spatial_att.bias))
        if self.embedding.trainable:
            out.append(("embedding.values", self.embedding.values))
        out.extend((f"lstm.{n}", t) for n, t in self.lstm.tensors())
        if self.semantic is not None:
            out.append(("semantic.p_v", self.semantic.p_v))
            out.append(("semantic.w", self.semantic.w))
        out.append(("self_attention.q_t", self.self_att.q_t))
        out.append(("self_attention.q_v", self.self_att.q_v))
        if self.self_att.w is not None:
            out.append(("self_attention.w", self.self_att.w))
            out.append(("self_attention.b", self.self_att.b))
        out.append(("classifier.w", self.classifier.w))
        out.append(("classifier.b", self.classifier.b))
        return out

    def state_tensors(self) -> list[tuple[str, Tensor]]:
        """Parameters plus frozen buffers; everything a checkpoint stores."""
        out = self.parameters()
        names = {n for n, _ in out}
        if "embedding.values" not in names:
            out = out + [("embedding.values", self.embedding.values)]
        if not self.backbone.trainable:
            extra = []
            for i, (k, b) in enumerate(zip(self.backbone.kernels, self.backbone.biases)):
                extra.append((f"backbone.conv{i}.kernel", k))
                extra.append((f"backbone.conv{i}.bias", b))
            out = extra + out
        return out

    def _regions(self, sample) -> tuple[BiAttentiveFeatures, Tensor | None]:
        if sample.precomputed:
            fmap = backbone_features(precomputed=sample.visual,
                                     channels=self.config.channels)
        else:
            fmap = backbone_features(self.backbone, image=sample.visual)
        if self.config.ablation == "no_sa_ca":
            return flatten_regions(fmap), None
        regions, _, spatial = bi_attentive_with_maps(
            fmap, self.channel_att, self.spatial_att)
        return regions, spatial

    def _text_vector(self, sample, regions) -> tuple[Tensor, Tensor | None]:
        states = lstm_forward(embed(sample.tokens, self.embedding), self.lstm)
        if self.config.ablation == "no_smatt":
            last = len(sample.tokens) - 1
            final = T.reshape(T.gather_rows(states.values, [last]),
                              (self.config.hidden_width,))
            return final, None
        alpha, attended = semantic_attention(regions, states, self.semantic)
        return attended, alpha

    def forward(self, sample, training: bool = False,
                rng: np.random.Generator | None = None
                ) -> tuple[SentimentDistribution, AttentionRecord]:
        """Class probabilities plus the attention weights for export.

        Dropout applies to the classifier input in training mode only; rate 0
        (or eval mode) leaves the pipeline untouched.
        """
        regions, spatial = self._regions(sample)
        text_vec, alpha = self._text_vector(sample, regions)
        if self.config.ablation == "no_satt":
            j_text, j_vis = project_modalities(text_vec, regions, self.self_att)
            head_in = T.concat([j_text, j_vis], axis=0)
            u = None
        else:
            u, fused = self_attention_fuse(text_vec, regions, self.self_att)
            head_in = fused.values
        if training and self.config.dropout > 0.0:
            if rng is None:
                raise TensorError("training-mode forward needs an rng for dropout")
            head_in = T.dropout(head_in, self.config.dropout, rng)
        dist = classify(FusedVector(head_in), self.classifier)
        record = AttentionRecord(
            spatial=None if spatial is None else spatial.data[:, :, 0].copy(),
            word_weights=None if alpha is None else alpha.data.copy(),
            modality_weights=None if u is None else u.data.copy(),
            probs=dist.probs.data.copy(),
        )
        return dist, record
