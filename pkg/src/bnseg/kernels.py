"""Dense numeric primitives: linear maps, softmax, group norm, bilinear sampling.

All operations work on float64 row-major numpy arrays. Token matrices are
plain ``(N, d)`` ndarrays; spatial maps are wrapped in :class:`FeatureMap`
to carry their stride.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, NumericError

VALID_STRIDES = (4, 8, 16, 32, 64)


def as_tokens(x, name="tokens"):
    """Coerce to a float64 (N, d) matrix, validating finiteness."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-d, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise NumericError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True)
class FeatureMap:
    """A spatial feature map with shape (height, width, channels)."""

    data: np.ndarray
    stride: int

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3:
            raise DimensionError(f"feature map must be (H, W, C), got {arr.shape}")
        if self.stride not in VALID_STRIDES:
            raise ConfigError(f"stride {self.stride} not in {VALID_STRIDES}")
        if not np.isfinite(arr).all():
            raise NumericError("feature map contains non-finite values")
        object.__setattr__(self, "data", arr)

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return self.data.shape[2]

    def tokens(self):
        """Row-major flattening to an (H*W, C) token matrix."""
        return self.data.reshape(self.height * self.width, self.channels)


def linear(x, weight, bias):
    """out[n] = x[n] @ weight + bias."""
    x = np.asarray(x, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if x.ndim != 2 or weight.ndim != 2:
        raise DimensionError("linear expects 2-d input and weight")
    if x.shape[1] != weight.shape[0]:
        raise DimensionError(
            f"input cols {x.shape[1]} != weight rows {weight.shape[0]}"
        )
    if bias.shape != (weight.shape[1],):
        raise DimensionError(
            f"bias shape {bias.shape} != ({weight.shape[1]},)"
        )
    return x @ weight + bias


def softmax(logits):
    """Numerically stable softmax over a 1-d vector."""
    v = np.asarray(logits, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise DimensionError("softmax expects a non-empty 1-d vector")
    shifted = v - v.max()
    e = np.exp(shifted)
    return e / e.sum()


def softmax_lastaxis(logits):
    """Softmax along the last axis of an n-d array."""
    v = np.asarray(logits, dtype=np.float64)
    if v.shape[-1] == 0:
        raise DimensionError("softmax over empty axis")
    shifted = v - v.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def group_norm(tokens, groups, eps, gain, shift):
    """Per-token group normalization over channel groups.

    Each token's channels are split into ``groups`` contiguous groups;
    each group is standardized to zero mean / unit variance before the
    per-channel affine (gain, shift) is applied.
    """
    x = as_tokens(tokens)
    n, d = x.shape
    if groups < 1 or d % groups != 0:
        raise ConfigError(f"channel count {d} not divisible by groups {groups}")
    if eps <= 0:
        raise ConfigError("eps must be positive")
    gain = np.asarray(gain, dtype=np.float64)
    shift = np.asarray(shift, dtype=np.float64)
    if gain.shape != (d,) or shift.shape != (d,):
        raise DimensionError("gain/shift must have one entry per channel")
    g = x.reshape(n, groups, d // groups)
    mean = g.mean(axis=2, keepdims=True)
    var = g.var(axis=2, keepdims=True)
    normed = (g - mean) / np.sqrt(var + eps)
    return normed.reshape(n, d) * gain + shift


def default_groups(d):
    """32 groups when the width allows it, else one group per channel."""
    return 32 if d >= 32 and d % 32 == 0 else d


def bilinear_sample(fmap: FeatureMap, point):
    """Sample all channels at a normalized (x, y) point.

    Interpolates over the four nearest cell centers; neighbors falling
    outside the map contribute zero (zero-padding convention). Total
    function: points anywhere in the plane are valid.
    """
    x, y = float(point[0]), float(point[1])
    pts = np.array([[x, y]], dtype=np.float64)
    return sample_points(fmap.data, pts)[0]


def sample_points(data, pts):
    """Vectorized zero-padded bilinear sampling.

    data: (H, W, ...) array; pts: (..., 2) normalized (x, y) coordinates.
    Returns samples of shape pts.shape[:-1] + data.shape[2:].
    """
    data = np.asarray(data, dtype=np.float64)
    h, w = data.shape[0], data.shape[1]
    u = pts[..., 0] * w - 0.5
    v = pts[..., 1] * h - 0.5
    j0 = np.floor(u).astype(np.int64)
    i0 = np.floor(v).astype(np.int64)
    fu = u - j0
    fv = v - i0
    out = np.zeros(pts.shape[:-1] + data.shape[2:], dtype=np.float64)
    corners = (
        (i0, j0, (1.0 - fv) * (1.0 - fu)),
        (i0, j0 + 1, (1.0 - fv) * fu),
        (i0 + 1, j0, fv * (1.0 - fu)),
        (i0 + 1, j0 + 1, fv * fu),
    )
    for ii, jj, wgt in corners:
        valid = (ii >= 0) & (ii < h) & (jj >= 0) & (jj < w)
        iic = np.clip(ii, 0, h - 1)
        jjc = np.clip(jj, 0, w - 1)
        vals = data[iic, jjc]
        wfull = np.where(valid, wgt, 0.0)
        out += vals * wfull.reshape(wgt.shape + (1,) * (data.ndim - 2))
    return out


def bilinear_resize(data, out_h, out_w):
    """Resize an (H, W, C) array with edge-clamped bilinear interpolation.

    Cell-center aligned, so constant fields stay constant (unlike the
    zero-padded point sampler above, which is reserved for attention
    sampling).
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 3:
        raise DimensionError("bilinear_resize expects an (H, W, C) array")
    if out_h < 1 or out_w < 1:
        raise ConfigError("output size must be positive")
    h, w, _ = data.shape
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    i0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 1)
    j0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 1)
    i1 = np.clip(i0 + 1, 0, h - 1)
    j1 = np.clip(j0 + 1, 0, w - 1)
    fy = np.clip(ys - np.floor(ys), 0.0, 1.0)
    fx = np.clip(xs - np.floor(xs), 0.0, 1.0)
    # ys below the first center or above the last clamp to the edge row
    fy = np.where(ys < 0, 0.0, np.where(ys > h - 1, 1.0, fy))
    fx = np.where(xs < 0, 0.0, np.where(xs > w - 1, 1.0, fx))
    top = data[i0][:, j0] * (1 - fx)[None, :, None] + data[i0][:, j1] * fx[None, :, None]
    bot = data[i1][:, j0] * (1 - fx)[None, :, None] + data[i1][:, j1] * fx[None, :, None]
    return top * (1 - fy)[:, None, None] + bot * fy[:, None, None]


def finite_diff_grad(f, x, h):
    """Central-difference gradient of a scalar function at x."""
    x = np.array(x, dtype=np.float64)  # copy: perturbed in place below
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError("function evaluated to a non-finite value")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad
