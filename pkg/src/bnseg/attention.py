"""Attention mechanisms: multi-head cross-attention and deformable attention.

Deformable attention samples a small learned set of offset points per query
from one or more value maps instead of attending densely. The single-level
variant doubles as self-attention over a spatial token grid; the multi-level
variant cross-attends into a feature pyramid. A brute-force loop oracle with
the identical contract is provided for verification.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .kernels import FeatureMap, as_tokens, linear, sample_points, softmax_lastaxis


@dataclass(frozen=True)
class AttentionParams:
    """Projection weights for standard multi-head attention."""

    heads: int
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    bq: np.ndarray
    bk: np.ndarray
    bv: np.ndarray
    bo: np.ndarray

    def __post_init__(self):
        d = self.wq.shape[0]
        for name in ("wq", "wk", "wv", "wo"):
            w = getattr(self, name)
            if w.shape != (d, d):
                raise DimensionError(f"{name} must be ({d}, {d}), got {w.shape}")
        if d % self.heads != 0:
            raise DimensionError(f"model dim {d} not divisible by {self.heads} heads")

    @property
    def model_dim(self):
        return self.wq.shape[0]

    @property
    def head_dim(self):
        return self.model_dim // self.heads


@dataclass(frozen=True)
class DeformParams:
    """Projections for deformable attention over ``levels`` value maps.

    Offsets are produced in cell units of each level and normalized by that
    level's (width, height); attention weights are a softmax over all
    levels*points slots of a head.
    """

    heads: int
    levels: int
    points: int
    w_value: np.ndarray
    b_value: np.ndarray
    w_offset: np.ndarray
    b_offset: np.ndarray
    w_weight: np.ndarray
    b_weight: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray

    def __post_init__(self):
        d = self.w_value.shape[0]
        slots = self.heads * self.levels * self.points
        if self.levels < 1 or self.points < 1:
            raise DimensionError("levels and points must be >= 1")
        if d % self.heads != 0:
            raise DimensionError(f"model dim {d} not divisible by {self.heads} heads")
        if self.w_offset.shape != (d, slots * 2):
            raise DimensionError(f"w_offset must be ({d}, {slots * 2})")
        if self.w_weight.shape != (d, slots):
            raise DimensionError(f"w_weight must be ({d}, {slots})")
        if self.w_out.shape != (d, d):
            raise DimensionError(f"w_out must be ({d}, {d})")

    @property
    def model_dim(self):
        return self.w_value.shape[0]

    @property
    def head_dim(self):
        return self.model_dim // self.heads


def cross_attention(queries, context, params: AttentionParams):
    """softmax(QK^T / sqrt(head_dim)) V per head, concatenated, output-projected."""
    q_in = as_tokens(queries, "queries")
    c_in = as_tokens(context, "context")
    if c_in.shape[0] == 0:
        raise DimensionError("context must contain at least one token")
    if q_in.shape[1] != params.model_dim or c_in.shape[1] != params.model_dim:
        raise DimensionError("token width does not match attention params")
    n, m = q_in.shape[0], c_in.shape[0]
    hh, hd = params.heads, params.head_dim
    q = linear(q_in, params.wq, params.bq).reshape(n, hh, hd)
    k = linear(c_in, params.wk, params.bk).reshape(m, hh, hd)
    v = linear(c_in, params.wv, params.bv).reshape(m, hh, hd)
    scores = np.einsum("nhd,mhd->hnm", q, k) / math.sqrt(hd)
    attn = softmax_lastaxis(scores)
    mixed = np.einsum("hnm,mhd->nhd", attn, v)
    return linear(mixed.reshape(n, hh * hd), params.wo, params.bo)


def _check_deform_inputs(queries, refs, value_maps, params):
    q = as_tokens(queries, "queries")
    refs = np.asarray(refs, dtype=np.float64)
    if refs.shape != (q.shape[0], 2):
        raise DimensionError(
            f"need one (x, y) reference per query: {refs.shape} vs {q.shape[0]} queries"
        )
    if len(value_maps) != params.levels:
        raise DimensionError(
            f"expected {params.levels} value maps, got {len(value_maps)}"
        )
    if q.shape[1] != params.model_dim:
        raise DimensionError("query width does not match deform params")
    for vm in value_maps:
        if vm.channels != params.model_dim:
            raise DimensionError("value map channels must equal model dim")
    return q, refs


def deform_attention(queries, refs, value_maps, params: DeformParams):
    """Deformable attention: per query, sample P offset points per head per level.

    Sampling locations are ``ref + offset/(W_l, H_l)``; samples are taken from
    the value-projected maps with zero padding and mixed by per-head softmax
    weights over all level/point slots.
    """
    q, refs = _check_deform_inputs(queries, refs, value_maps, params)
    n = q.shape[0]
    hh, ll, pp, hd = params.heads, params.levels, params.points, params.head_dim

    offsets = linear(q, params.w_offset, params.b_offset).reshape(n, hh, ll, pp, 2)
    logits = linear(q, params.w_weight, params.b_weight).reshape(n, hh, ll * pp)
    weights = softmax_lastaxis(logits).reshape(n, hh, ll, pp)

    head_idx = np.arange(hh)[None, :, None]
    out_heads = np.zeros((n, hh, hd), dtype=np.float64)
    for lvl, vm in enumerate(value_maps):
        proj = linear(vm.tokens(), params.w_value, params.b_value)
        proj = proj.reshape(vm.height, vm.width, hh, hd)
        scale = np.array([1.0 / vm.width, 1.0 / vm.height])
        pts = refs[:, None, None, :] + offsets[:, :, lvl, :, :] * scale
        sampled = _sample_per_head(proj, pts, head_idx)  # (n, hh, pp, hd)
        out_heads += np.einsum("nhp,nhpd->nhd", weights[:, :, lvl, :], sampled)
    return linear(out_heads.reshape(n, hh * hd), params.w_out, params.b_out)


def _sample_per_head(proj, pts, head_idx):
    """Zero-padded bilinear gather of per-head channels.

    proj: (H, W, heads, hd); pts: (n, heads, P, 2) normalized.
    """
    h, w = proj.shape[0], proj.shape[1]
    u = pts[..., 0] * w - 0.5
    v = pts[..., 1] * h - 0.5
    j0 = np.floor(u).astype(np.int64)
    i0 = np.floor(v).astype(np.int64)
    fu = u - j0
    fv = v - i0
    out = np.zeros(pts.shape[:-1] + (proj.shape[3],), dtype=np.float64)
    for di, dj, wgt in (
        (0, 0, (1 - fv) * (1 - fu)),
        (0, 1, (1 - fv) * fu),
        (1, 0, fv * (1 - fu)),
        (1, 1, fv * fu),
    ):
        ii = i0 + di
        jj = j0 + dj
        valid = (ii >= 0) & (ii < h) & (jj >= 0) & (jj < w)
        vals = proj[np.clip(ii, 0, h - 1), np.clip(jj, 0, w - 1), head_idx]
        out += vals * np.where(valid, wgt, 0.0)[..., None]
    return out


def brute_force_deform_oracle(queries, refs, value_maps, params: DeformParams):
    """Same contract as deform_attention, written as explicit scalar loops.

    Kept free of any shared vectorized code path (including the bilinear
    kernel) so it can serve as an independent oracle.
    """
    q, refs = _check_deform_inputs(queries, refs, value_maps, params)
    n, d = q.shape
    hh, ll, pp, hd = params.heads, params.levels, params.points, params.head_dim

    projected = []
    for vm in value_maps:
        grid = [[None] * vm.width for _ in range(vm.height)]
        for i in range(vm.height):
            for j in range(vm.width):
                cell = []
                for c in range(d):
                    acc = params.b_value[c]
                    for k in range(d):
                        acc += vm.data[i, j, k] * params.w_value[k, c]
                    cell.append(acc)
                grid[i][j] = cell
        projected.append(grid)

    out = np.zeros((n, d), dtype=np.float64)
    for qi in range(n):
        aggregated = [0.0] * d
        for h in range(hh):
            logits = []
            for lvl in range(ll):
                for p in range(pp):
                    col = (h * ll + lvl) * pp + p
                    acc = params.b_weight[col]
                    for k in range(d):
                        acc += q[qi, k] * params.w_weight[k, col]
                    logits.append(acc)
            mx = max(logits)
            exps = [math.exp(v - mx) for v in logits]
            total = sum(exps)
            weights = [e / total for e in exps]

            for lvl in range(ll):
                vm = value_maps[lvl]
                grid = projected[lvl]
                for p in range(pp):
                    col = ((h * ll + lvl) * pp + p) * 2
                    ox = params.b_offset[col]
                    oy = params.b_offset[col + 1]
                    for k in range(d):
                        ox += q[qi, k] * params.w_offset[k, col]
                        oy += q[qi, k] * params.w_offset[k, col + 1]
                    x = refs[qi, 0] + ox / vm.width
                    y = refs[qi, 1] + oy / vm.height
                    u = x * vm.width - 0.5
                    v = y * vm.height - 0.5
                    j0 = math.floor(u)
                    i0 = math.floor(v)
                    fu = u - j0
                    fv = v - i0
                    w_at = weights[lvl * pp + p]
                    for di, dj, cw in (
                        (0, 0, (1 - fv) * (1 - fu)),
                        (0, 1, (1 - fv) * fu),
                        (1, 0, fv * (1 - fu)),
                        (1, 1, fv * fu),
                    ):
                        ii = i0 + di
                        jj = j0 + dj
                        if 0 <= ii < vm.height and 0 <= jj < vm.width:
                            cell = grid[ii][jj]
                            base = h * hd
                            for c in range(hd):
                                aggregated[base + c] += w_at * cw * cell[base + c]
        for c in range(d):
            acc = params.b_out[c]
            for k in range(d):
                acc += aggregated[k] * params.w_out[k, c]
            out[qi, c] = acc
    return out
