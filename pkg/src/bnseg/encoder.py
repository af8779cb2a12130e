"""Bottleneck pixel decoder.

One pyramid scale is selected as a representational bottleneck and refined
through a stack of blocks, each fusing text (bidirectional cross-attention),
the bottleneck itself (deformable self-attention), the remaining pyramid
scales (multi-scale deformable cross-attention), and an FFN. Group
normalization follows every sub-layer. The enhanced bottleneck is finally
upsampled and summed with the stride-4 scale to build the mask embedding map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .attention import AttentionParams, DeformParams, cross_attention, deform_attention
from .errors import ConfigError, DimensionError
from .kernels import (
    FeatureMap,
    as_tokens,
    bilinear_resize,
    default_groups,
    group_norm,
    linear,
)
from .rng import stream

PYRAMID_STRIDES = (4, 8, 16, 32, 64)
CROSS_SCALE_STRIDES = (8, 16, 32, 64)  # stride 4 is reserved for the mask map
BOTTLENECK_STRIDES = (8, 16, 32)


@dataclass(frozen=True)
class FeaturePyramid:
    """Multi-scale maps at strides 4, 8, 16, 32, 64 of the same image."""

    s2: FeatureMap
    s3: FeatureMap
    s4: FeatureMap
    s5: FeatureMap
    s6: FeatureMap

    def __post_init__(self):
        maps = self.levels()
        for fmap, stride in zip(maps, PYRAMID_STRIDES):
            if fmap.stride != stride:
                raise ConfigError(f"expected stride {stride}, got {fmap.stride}")
        for finer, coarser in zip(maps, maps[1:]):
            if coarser.height != -(-finer.height // 2) or coarser.width != -(
                -finer.width // 2
            ):
                raise DimensionError(
                    "pyramid levels must halve (ceil) in each spatial dim"
                )

    def levels(self):
        return (self.s2, self.s3, self.s4, self.s5, self.s6)

    def at_stride(self, stride):
        for fmap in self.levels():
            if fmap.stride == stride:
                return fmap
        raise ConfigError(f"no pyramid level at stride {stride}")


@dataclass(frozen=True)
class Bottleneck:
    """Flattened tokens of the selected scale plus fixed positional embeddings."""

    tokens: np.ndarray
    pos: np.ndarray
    height: int
    width: int
    source_stride: int

    def __post_init__(self):
        if self.tokens.shape[0] != self.height * self.width:
            raise DimensionError("token count must equal height * width")
        if self.pos.shape != self.tokens.shape:
            raise DimensionError("positional embeddings must match token shape")

    @property
    def count(self):
        return self.tokens.shape[0]

    @property
    def dim(self):
        return self.tokens.shape[1]

    def grid(self):
        """Tokens reshaped back to their (H, W, d) spatial grid."""
        return FeatureMap(
            self.tokens.reshape(self.height, self.width, self.dim),
            stride=self.source_stride,
        )

    def cell_centers(self):
        """Normalized (x, y) center of each token's cell, row-major."""
        ys = (np.arange(self.height) + 0.5) / self.height
        xs = (np.arange(self.width) + 0.5) / self.width
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx.ravel(), gy.ravel()], axis=1)


@dataclass(frozen=True)
class TextBank:
    """Token-level text embeddings plus category-pooled embeddings."""

    token_embeddings: np.ndarray
    pooled: np.ndarray
    spans: tuple

    def __post_init__(self):
        t = self.token_embeddings.shape[0]
        if len(self.spans) != self.pooled.shape[0] or len(self.spans) < 1:
            raise DimensionError("need one (start, end) span per category")
        covered = 0
        for start, end in self.spans:
            if start != covered or end <= start:
                raise DimensionError("spans must partition the token range in order")
            covered = end
        if covered != t:
            raise DimensionError("spans must cover every text token exactly once")

    @property
    def categories(self):
        return self.pooled.shape[0]

    def repooled(self, token_embeddings):
        pooled = np.stack(
            [token_embeddings[s:e].mean(axis=0) for s, e in self.spans]
        )
        return TextBank(token_embeddings, pooled, self.spans)


@dataclass(frozen=True)
class EncoderBlockWeights:
    img_to_text: AttentionParams
    text_to_img: AttentionParams
    self_deform: DeformParams
    cross_deform: DeformParams
    ffn_w1: np.ndarray
    ffn_b1: np.ndarray
    ffn_w2: np.ndarray
    ffn_b2: np.ndarray
    # (gain, shift) pairs: image after 1a/1c/1d/1e, text after 1b
    norm_img_a: tuple
    norm_text_b: tuple
    norm_img_c: tuple
    norm_img_d: tuple
    norm_img_e: tuple


@dataclass(frozen=True)
class EncoderWeights:
    input_proj: dict  # stride -> (weight, bias), applied before any fusion
    blocks: tuple
    groups: int
    eps: float = 1e-5

    @property
    def depth(self):
        return len(self.blocks)


def sinusoidal_pos_2d(height, width, dim):
    """Fixed 2-d sine/cosine embedding of cell centers, half x / half y."""
    if dim % 4 != 0:
        raise ConfigError("positional embedding dim must be divisible by 4")
    half = dim // 2
    freqs = 10000.0 ** (2 * (np.arange(half // 2)) / half)
    ys = (np.arange(height) + 0.5) / height * 2 * math.pi
    xs = (np.arange(width) + 0.5) / width * 2 * math.pi

    def embed(coords):
        angle = coords[:, None] / freqs[None, :]
        return np.concatenate([np.sin(angle), np.cos(angle)], axis=1)

    ex = embed(xs)  # (W, half)
    ey = embed(ys)  # (H, half)
    pos = np.zeros((height, width, dim), dtype=np.float64)
    pos[:, :, :half] = ex[None, :, :]
    pos[:, :, half:] = ey[:, None, :]
    return pos.reshape(height * width, dim)


def project_pyramid(pyramid: FeaturePyramid, weights: EncoderWeights) -> FeaturePyramid:
    """Project every scale to the shared model width with per-scale 1x1 maps."""
    projected = []
    for fmap in pyramid.levels():
        try:
            w, b = weights.input_proj[fmap.stride]
        except KeyError:
            raise ConfigError(f"no input projection for stride {fmap.stride}")
        tokens = linear(fmap.tokens(), w, b)
        projected.append(
            FeatureMap(tokens.reshape(fmap.height, fmap.width, -1), fmap.stride)
        )
    return FeaturePyramid(*projected)


def select_bottleneck(pyramid: FeaturePyramid, stride: int = 16) -> Bottleneck:
    """Flatten the pyramid scale at ``stride`` into bottleneck tokens."""
    if stride not in BOTTLENECK_STRIDES:
        raise ConfigError(f"bottleneck stride must be one of {BOTTLENECK_STRIDES}")
    fmap = pyramid.at_stride(stride)
    tokens = fmap.tokens().copy()
    pos = sinusoidal_pos_2d(fmap.height, fmap.width, fmap.channels)
    return Bottleneck(tokens, pos, fmap.height, fmap.width, stride)


def _gn(tokens, norm, groups, eps):
    gain, shift = norm
    return group_norm(tokens, groups, eps, gain, shift)


def encoder_block(b: Bottleneck, text: TextBank, cross_scales,
                  w: EncoderBlockWeights, groups: int, eps: float):
    """One fusion block; returns the updated (bottleneck, text) pair.

    ``cross_scales`` holds exactly the strides 8..64 read by the multi-scale
    cross-attention; the stride-4 scale is not reachable from here. Image and
    text keep separate residual streams. Both cross-attention directions read
    the block's input states; positional embeddings are added to image-side
    queries (and to the image tokens when they act as attention context).
    """
    x = b.tokens
    q_img = x + b.pos

    img_a = _gn(x + cross_attention(q_img, text.token_embeddings, w.img_to_text),
                w.norm_img_a, groups, eps)
    txt_b = _gn(
        text.token_embeddings
        + cross_attention(text.token_embeddings, q_img, w.text_to_img),
        w.norm_text_b, groups, eps)

    refs = b.cell_centers()
    grid_a = FeatureMap(
        img_a.reshape(b.height, b.width, b.dim), stride=b.source_stride
    )
    img_c = _gn(img_a + deform_attention(img_a + b.pos, refs, [grid_a], w.self_deform),
                w.norm_img_c, groups, eps)

    img_d = _gn(
        img_c + deform_attention(img_c + b.pos, refs, list(cross_scales),
                                 w.cross_deform),
        w.norm_img_d, groups, eps)

    hidden = np.maximum(linear(img_d, w.ffn_w1, w.ffn_b1), 0.0)
    img_e = _gn(img_d + linear(hidden, w.ffn_w2, w.ffn_b2),
                w.norm_img_e, groups, eps)

    out_b = replace(b, tokens=img_e)
    return out_b, text.repooled(txt_b)


def encode(b: Bottleneck, text: TextBank, pyramid: FeaturePyramid,
           weights: EncoderWeights) -> Bottleneck:
    """Run all encoder blocks and return the enhanced bottleneck."""
    if weights.depth < 1:
        raise ConfigError("encoder needs at least one block")
    for fmap in pyramid.levels():
        if fmap.channels != b.dim:
            raise DimensionError("pyramid must be projected to the model width")
    cross_scales = tuple(pyramid.at_stride(s) for s in CROSS_SCALE_STRIDES)
    cur_b, cur_t = b, text
    for block in weights.blocks:
        cur_b, cur_t = encoder_block(cur_b, cur_t, cross_scales, block,
                                     weights.groups, weights.eps)
    return cur_b


def build_mask_embedding(b_hat: Bottleneck, s2: FeatureMap, proj=None) -> FeatureMap:
    """Upsample the enhanced bottleneck to stride 4 and sum it with S2."""
    grid = b_hat.grid().data
    up = bilinear_resize(grid, s2.height, s2.width)
    if proj is not None:
        w, bias = proj
        up = linear(up.reshape(-1, up.shape[2]), w, bias).reshape(
            s2.height, s2.width, -1
        )
    if up.shape[2] != s2.channels:
        raise ConfigError(
            f"channel mismatch after projection: {up.shape[2]} vs {s2.channels}"
        )
    return FeatureMap(up + s2.data, stride=4)


def _attention_params(rng, d, heads, out_scale):
    def w():
        return rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, d))

    return AttentionParams(
        heads=heads,
        wq=w(), wk=w(), wv=w(),
        wo=rng.normal(0.0, out_scale, size=(d, d)),
        bq=np.zeros(d), bk=np.zeros(d), bv=np.zeros(d), bo=np.zeros(d),
    )


def _deform_params(rng, d, heads, levels, points, out_scale):
    slots = heads * levels * points
    return DeformParams(
        heads=heads, levels=levels, points=points,
        w_value=rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, d)),
        b_value=np.zeros(d),
        w_offset=rng.normal(0.0, 0.1 / math.sqrt(d), size=(d, slots * 2)),
        b_offset=rng.normal(0.0, 0.5, size=slots * 2),
        w_weight=rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, slots)),
        b_weight=np.zeros(slots),
        w_out=rng.normal(0.0, out_scale, size=(d, d)),
        b_out=np.zeros(d),
    )


def _norm_pair(d):
    return (np.ones(d), np.zeros(d))


def init_encoder_weights(seed, d, ffn_dim, blocks, heads=8,
                         backbone_channels=None, points=4,
                         out_scale=0.02) -> EncoderWeights:
    """Seeded random encoder weights.

    Output projections use a small scale so residual streams stay close to
    their inputs at initialization; input projections are near-identity when
    the backbone width already equals the model width.
    """
    if backbone_channels is None:
        backbone_channels = {s: d for s in PYRAMID_STRIDES}
    input_proj = {}
    for s in PYRAMID_STRIDES:
        c = backbone_channels[s]
        rng = stream(seed, f"enc/input_proj/{s}")
        if c == d:
            w = np.eye(d) + rng.normal(0.0, 0.02, size=(d, d))
        else:
            w = rng.normal(0.0, 1.0 / math.sqrt(c), size=(c, d))
        input_proj[s] = (w, np.zeros(d))

    block_weights = []
    for i in range(blocks):
        rng = stream(seed, f"enc/block/{i}")
        block_weights.append(EncoderBlockWeights(
            img_to_text=_attention_params(rng, d, heads, out_scale),
            text_to_img=_attention_params(rng, d, heads, out_scale),
            self_deform=_deform_params(rng, d, heads, 1, points, out_scale),
            cross_deform=_deform_params(rng, d, heads, 4, points, out_scale),
            ffn_w1=rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, ffn_dim)),
            ffn_b1=np.zeros(ffn_dim),
            ffn_w2=rng.normal(0.0, out_scale, size=(ffn_dim, d)),
            ffn_b2=np.zeros(d),
            norm_img_a=_norm_pair(d),
            norm_text_b=_norm_pair(d),
            norm_img_c=_norm_pair(d),
            norm_img_d=_norm_pair(d),
            norm_img_e=_norm_pair(d),
        ))
    return EncoderWeights(
        input_proj=input_proj,
        blocks=tuple(block_weights),
        groups=default_groups(d),
    )
