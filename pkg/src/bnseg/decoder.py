"""Transformer decoder over the enhanced bottleneck.

Queries are the top-K bottleneck tokens ranked by scaled cosine similarity
to the pooled text embeddings. Each layer runs self-attention among active
queries, single-level deformable cross-attention into the bottleneck
(reference points = current box centers), and an FFN, then refines boxes in
inverse-sigmoid space and rescores against the text embeddings. An optional
pruner deactivates low-confidence queries between layers. Masks are the
per-pixel dot product of refined queries with the mask embedding map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .attention import AttentionParams, DeformParams, cross_attention, deform_attention
from .encoder import Bottleneck, TextBank
from .errors import ConfigError, DimensionError, NumericError, StateError
from .kernels import FeatureMap, as_tokens, group_norm, linear
from .pruning import PruneSchedule, prune, query_confidence, threshold_at
from .rng import stream


@dataclass(frozen=True)
class QuerySet:
    """Decoder queries with scores, boxes, and an active flag per query."""

    features: np.ndarray        # (N, d)
    scores: np.ndarray          # (N,) max scaled-cosine over categories
    boxes: np.ndarray           # (N, 4) normalized (cx, cy, w, h)
    active: np.ndarray          # (N,) bool
    origin_index: np.ndarray    # (N,) source bottleneck token

    def __post_init__(self):
        n = self.features.shape[0]
        if (self.scores.shape != (n,) or self.boxes.shape != (n, 4)
                or self.active.shape != (n,) or self.origin_index.shape != (n,)):
            raise DimensionError("query set fields disagree on query count")

    @property
    def count(self):
        return self.features.shape[0]

    @property
    def active_count(self):
        return int(self.active.sum())


@dataclass(frozen=True)
class DecoderLayerWeights:
    self_attn: AttentionParams
    cross_deform: DeformParams   # single level: the bottleneck itself
    ffn_w1: np.ndarray
    ffn_b1: np.ndarray
    ffn_w2: np.ndarray
    ffn_b2: np.ndarray
    box_mlp: tuple               # ((w, b), ...) ending in 4 outputs
    class_proj_w: np.ndarray
    class_proj_b: np.ndarray
    norm_sa: tuple
    norm_ca: tuple
    norm_ffn: tuple


@dataclass(frozen=True)
class DecoderWeights:
    layers: tuple
    scale: float                 # learnable s of the scaled cosine
    groups: int
    eps: float = 1e-5

    @property
    def depth(self):
        return len(self.layers)


@dataclass(frozen=True)
class MaskSet:
    """Per-query mask logit maps at stride 4 plus the binarization threshold."""

    logits: np.ndarray           # (n_active, H, W)
    query_indices: np.ndarray    # (n_active,) indices into the QuerySet
    threshold: float = 0.0

    @property
    def count(self):
        return self.logits.shape[0]

    def binary(self):
        return self.logits > self.threshold


@dataclass
class PruneAudit:
    """Per-layer pruning evidence, recorded for verification."""

    layer: int
    threshold: float
    confidence: np.ndarray       # confidence of every query at prune time
    active_before: np.ndarray
    active_after: np.ndarray


@dataclass
class DecodeStats:
    active_counts: list = field(default_factory=list)   # entering each layer
    thresholds: list = field(default_factory=list)      # applied after layer l
    audits: list = field(default_factory=list)
    final_active: int = 0


def scaled_cosine(q, z, s):
    """exp(s) * cos(q, z); raises on zero-norm inputs."""
    q = np.asarray(q, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    nq = np.linalg.norm(q)
    nz = np.linalg.norm(z)
    if nq == 0.0 or nz == 0.0:
        raise NumericError("scaled cosine of a zero-norm embedding")
    return math.exp(s) * float(q @ z) / (nq * nz)


def scaled_cosine_matrix(queries, z, s):
    """Pairwise exp(s) * cos between (N, d) queries and (C, d) embeddings."""
    q = as_tokens(queries, "queries")
    z = as_tokens(z, "embeddings")
    nq = np.linalg.norm(q, axis=1)
    nz = np.linalg.norm(z, axis=1)
    if (nq == 0).any() or (nz == 0).any():
        raise NumericError("scaled cosine of a zero-norm embedding")
    return math.exp(s) * (q @ z.T) / np.outer(nq, nz)


def mlp_forward(x, layers):
    """Apply ((w, b), ...) with ReLU between layers, none after the last."""
    out = x
    for i, (w, b) in enumerate(layers):
        out = linear(out, w, b)
        if i < len(layers) - 1:
            out = np.maximum(out, 0.0)
    return out


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def inverse_sigmoid(x, eps=1e-6):
    x = np.clip(np.asarray(x, dtype=np.float64), eps, 1.0 - eps)
    return np.log(x / (1.0 - x))


def language_select(b_hat: Bottleneck, text: TextBank, k: int, s: float,
                    box_head) -> QuerySet:
    """Top-k bottleneck tokens by max scaled cosine against pooled text.

    Ties break toward the lower token index. Boxes come from a
    sigmoid-squashed MLP on each selected token.
    """
    if text.categories < 1:
        raise ConfigError("need at least one text category")
    if not 1 <= k <= b_hat.count:
        raise ConfigError(f"k must be in [1, {b_hat.count}], got {k}")
    sims = scaled_cosine_matrix(b_hat.tokens, text.pooled, s)
    scores = sims.max(axis=1)
    order = np.argsort(-scores, kind="stable")  # stable: ties by lower index
    sel = order[:k]
    feats = b_hat.tokens[sel].copy()
    boxes = sigmoid(mlp_forward(feats, box_head))
    return QuerySet(
        features=feats,
        scores=scores[sel].copy(),
        boxes=boxes,
        active=np.ones(k, dtype=bool),
        origin_index=sel.astype(np.int64),
    )


def decoder_layer(queries: QuerySet, b_hat: Bottleneck, w: DecoderLayerWeights,
                  text: TextBank, s: float, groups: int, eps: float) -> QuerySet:
    """Refine active queries; inactive ones pass through bit-identical."""
    idx = np.flatnonzero(queries.active)
    if idx.size == 0:
        raise StateError("decoder layer requires at least one active query")
    feats = queries.features[idx]
    boxes = queries.boxes[idx]

    def gn(x, norm):
        gain, shift = norm
        return group_norm(x, groups, eps, gain, shift)

    feats = gn(feats + cross_attention(feats, feats, w.self_attn), w.norm_sa)
    refs = boxes[:, :2]
    feats = gn(feats + deform_attention(feats, refs, [b_hat.grid()],
                                        w.cross_deform), w.norm_ca)
    hidden = np.maximum(linear(feats, w.ffn_w1, w.ffn_b1), 0.0)
    feats = gn(feats + linear(hidden, w.ffn_w2, w.ffn_b2), w.norm_ffn)

    delta = mlp_forward(feats, w.box_mlp)
    boxes = sigmoid(inverse_sigmoid(boxes) + delta)

    emb = linear(feats, w.class_proj_w, w.class_proj_b)
    scores = scaled_cosine_matrix(emb, text.pooled, s).max(axis=1)

    new_features = queries.features.copy()
    new_boxes = queries.boxes.copy()
    new_scores = queries.scores.copy()
    new_features[idx] = feats
    new_boxes[idx] = boxes
    new_scores[idx] = scores
    return replace(queries, features=new_features, boxes=new_boxes,
                   scores=new_scores)


def decode(queries: QuerySet, b_hat: Bottleneck, weights: DecoderWeights,
           text: TextBank, pruner=None):
    """Run all decoder layers, optionally pruning between them.

    ``pruner`` may be a PruneSchedule or a callable (queries, layer) ->
    QuerySet. Pruning applies after layers 0..L-2 only; nothing downstream
    would benefit from pruning after the final layer. Returns the refined
    query set and per-layer statistics (the active count entering each layer
    feeds the FLOPs model).
    """
    ll = weights.depth
    if ll < 1:
        raise ConfigError("decoder needs at least one layer")
    stats = DecodeStats()
    cur = queries
    for l, layer_w in enumerate(weights.layers):
        stats.active_counts.append(cur.active_count)
        cur = decoder_layer(cur, b_hat, layer_w, text, weights.scale,
                            weights.groups, weights.eps)
        if pruner is not None and l < ll - 1:
            if isinstance(pruner, PruneSchedule):
                tau = threshold_at(pruner, l)
                before = cur.active.copy()
                conf = query_confidence(cur.scores)
                cur = prune(cur, tau, pruner.min_keep)
                stats.thresholds.append(tau)
                stats.audits.append(PruneAudit(
                    layer=l, threshold=tau, confidence=conf,
                    active_before=before, active_after=cur.active.copy(),
                ))
            else:
                cur = pruner(cur, l)
                stats.thresholds.append(None)
        else:
            stats.thresholds.append(None)
    stats.final_active = cur.active_count
    return cur, stats


def predict_masks(queries: QuerySet, m_map: FeatureMap) -> MaskSet:
    """Mask logits = per-pixel dot product of each active query with the map."""
    if m_map.channels != queries.features.shape[1]:
        raise DimensionError(
            f"mask map channels {m_map.channels} != query width "
            f"{queries.features.shape[1]}"
        )
    idx = np.flatnonzero(queries.active)
    logits = np.einsum("nd,hwd->nhw", queries.features[idx], m_map.data)
    return MaskSet(logits=logits, query_indices=idx)


def _norm_pair(d):
    return (np.ones(d), np.zeros(d))


def init_box_head(seed, d, hidden_layers=2, out_scale=0.02):
    """Box MLP d -> d -> d -> 4 with small final weights."""
    rng = stream(seed, "dec/box_head")
    layers = []
    for _ in range(hidden_layers):
        layers.append((rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, d)),
                       np.zeros(d)))
    layers.append((rng.normal(0.0, out_scale, size=(d, 4)), np.zeros(4)))
    return tuple(layers)


def init_decoder_weights(seed, d, ffn_dim, layers, heads=8, points=4,
                         scale=2.5, out_scale=0.02) -> DecoderWeights:
    """Seeded random decoder weights.

    The class projection starts near the identity and attention/FFN output
    projections start small, so query embeddings (and hence confidence
    scores) stay anchored to the selected bottleneck tokens at init.
    """
    from .encoder import _attention_params, _deform_params  # shared inits

    layer_weights = []
    for i in range(layers):
        rng = stream(seed, f"dec/layer/{i}")
        layer_weights.append(DecoderLayerWeights(
            self_attn=_attention_params(rng, d, heads, out_scale),
            cross_deform=_deform_params(rng, d, heads, 1, points, out_scale),
            ffn_w1=rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, ffn_dim)),
            ffn_b1=np.zeros(ffn_dim),
            ffn_w2=rng.normal(0.0, out_scale, size=(ffn_dim, d)),
            ffn_b2=np.zeros(d),
            box_mlp=(
                (rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, d)), np.zeros(d)),
                (rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, d)), np.zeros(d)),
                (rng.normal(0.0, out_scale, size=(d, 4)), np.zeros(4)),
            ),
            class_proj_w=np.eye(d) + rng.normal(0.0, out_scale, size=(d, d)),
            class_proj_b=np.zeros(d),
            norm_sa=_norm_pair(d),
            norm_ca=_norm_pair(d),
            norm_ffn=_norm_pair(d),
        ))
    from .kernels import default_groups

    return DecoderWeights(layers=tuple(layer_weights), scale=scale,
                          groups=default_groups(d))
