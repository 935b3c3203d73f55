"""Forward and analytic backward passes for every network primitive.

All activations follow the canonical (B, D, H, W, C) layout.  Convolutions
use cross-correlation with stride 1 and symmetric "same" zero padding, so
spatial extents never change.  Each ``*_forward`` returns its output plus a
cache; the matching ``*_backward`` consumes the cache and an upstream
gradient and returns the input gradient (and a dict of parameter gradients
where the layer has parameters).

Backward passes are derived by hand and verified against central finite
differences in the test suite; there is no autodiff graph.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, LabelError, ShapeError

# Above this many kernel taps the offset-accumulation loop loses to a single
# patch-matrix gemm (only the 5x5x5 stem crosses it).
_IM2COL_TAP_THRESHOLD = 27


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int, int]

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError(f"conv channels must be >= 1, got {self.in_channels}->{self.out_channels}")
        if len(self.kernel) != 3 or any(k < 1 or k % 2 == 0 for k in self.kernel):
            raise ConfigError(f"conv kernel extents must be odd and >= 1, got {self.kernel}")

    @property
    def weight_shape(self) -> tuple[int, ...]:
        return (*self.kernel, self.in_channels, self.out_channels)


@dataclass(frozen=True)
class GroupNormSpec:
    channels: int
    groups: int
    eps: float = 1e-5

    def __post_init__(self):
        if self.groups < 1 or self.channels % self.groups != 0:
            raise ConfigError(f"{self.channels} channels not divisible into {self.groups} groups")
        if self.eps <= 0:
            raise ConfigError("groupnorm eps must be positive")


def groups_for(channels: int, base: int = 8) -> int:
    """Largest divisor of ``base`` that also divides ``channels``."""
    return math.gcd(base, channels)


@dataclass(frozen=True)
class PoolSpec:
    window: tuple[int, int, int]

    def __post_init__(self):
        if len(self.window) != 3 or any(w < 1 for w in self.window):
            raise ConfigError(f"pool window extents must be >= 1, got {self.window}")

    @property
    def stride(self) -> tuple[int, int, int]:
        # Stride 2 along axes with a window larger than 1, stride 1 otherwise.
        return tuple(2 if w > 1 else 1 for w in self.window)

    def out_extent(self, extent: int, axis: int) -> int:
        w, s = self.window[axis], self.stride[axis]
        if extent < w:
            raise ShapeError(f"extent {extent} smaller than pool window {w} on axis {axis}")
        return (extent - w) // s + 1


# ---------------------------------------------------------------------------
# 3D convolution


def _check_conv_args(x, spec: ConvSpec, w, b):
    if x.ndim != 5:
        raise ShapeError(f"conv3d expects (B, D, H, W, C) input, got shape {x.shape}")
    if x.shape[4] != spec.in_channels:
        raise ShapeError(f"conv3d: input has {x.shape[4]} channels, spec expects {spec.in_channels}")
    if w.shape != spec.weight_shape:
        raise ShapeError(f"conv3d: weight shape {w.shape} != {spec.weight_shape}")
    if b is not None and b.shape != (spec.out_channels,):
        raise ShapeError(f"conv3d: bias shape {b.shape} != ({spec.out_channels},)")


def _pad_same(x: np.ndarray, kernel: tuple[int, int, int]) -> np.ndarray:
    pd, ph, pw = (k // 2 for k in kernel)
    if pd == ph == pw == 0:
        return x
    return np.pad(x, ((0, 0), (pd, pd), (ph, ph), (pw, pw), (0, 0)))


def _conv_core(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Same-padded stride-1 cross-correlation of x with w (kd, kh, kw, Ci, Co)."""
    kd, kh, kw, ci, co = w.shape
    batch, d, h, wd_, _ = x.shape
    n = batch * d * h * wd_
    taps = kd * kh * kw
    if taps == 1:
        y = x.reshape(n, ci) @ w.reshape(ci, co)
        return y.reshape(batch, d, h, wd_, co)
    xp = _pad_same(x, (kd, kh, kw))
    if taps <= _IM2COL_TAP_THRESHOLD:
        y = np.zeros((n, co), dtype=x.dtype)
        for a in range(kd):
            for bb in range(kh):
                for c in range(kw):
                    sl = np.ascontiguousarray(xp[:, a:a + d, bb:bb + h, c:c + wd_, :])
                    y += sl.reshape(n, ci) @ w[a, bb, c]
        return y.reshape(batch, d, h, wd_, co)
    win = sliding_window_view(xp, (kd, kh, kw), axis=(1, 2, 3))
    patches = win.reshape(n, ci * taps)  # copies; flat order is (C, kd, kh, kw)
    wmat = w.transpose(3, 0, 1, 2, 4).reshape(ci * taps, co)
    return (patches @ wmat).reshape(batch, d, h, wd_, co)


def conv3d_forward(x: np.ndarray, spec: ConvSpec, w: np.ndarray,
                   b: np.ndarray | None) -> np.ndarray:
    _check_conv_args(x, spec, w, b)
    y = _conv_core(x, w)
    if b is not None:
        y += b
    return y


def conv3d_backward(x: np.ndarray, spec: ConvSpec, w: np.ndarray,
                    dy: np.ndarray) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    _check_conv_args(x, spec, w, None)
    if dy.shape != x.shape[:4] + (spec.out_channels,):
        raise ShapeError(f"conv3d_backward: upstream shape {dy.shape} inconsistent with input {x.shape}")
    kd, kh, kw = spec.kernel
    batch, d, h, wd_, ci = x.shape
    co = spec.out_channels
    n = batch * d * h * wd_
    dy_mat = dy.reshape(n, co)

    if kd * kh * kw == 1:
        dw = (x.reshape(n, ci).T @ dy_mat).reshape(1, 1, 1, ci, co)
        dx = (dy_mat @ w.reshape(ci, co).T).reshape(x.shape)
    else:
        pd, ph, pw = kd // 2, kh // 2, kw // 2
        xp = _pad_same(x, spec.kernel)
        dw = np.empty_like(w)
        dxp = np.zeros_like(xp)
        for a in range(kd):
            for bb in range(kh):
                for c in range(kw):
                    sl = np.ascontiguousarray(xp[:, a:a + d, bb:bb + h, c:c + wd_, :])
                    dw[a, bb, c] = sl.reshape(n, ci).T @ dy_mat
                    dxp[:, a:a + d, bb:bb + h, c:c + wd_, :] += \
                        (dy_mat @ w[a, bb, c].T).reshape(batch, d, h, wd_, ci)
        dx = dxp[:, pd:pd + d, ph:ph + h, pw:pw + wd_, :]
        if pd == ph == pw == 0:
            dx = dx.copy()
    db = dy_mat.sum(axis=0)
    return dx, {"w": dw, "b": db}


# ---------------------------------------------------------------------------
# Group normalization


def groupnorm_forward(x: np.ndarray, spec: GroupNormSpec, scale: np.ndarray,
                      shift: np.ndarray) -> tuple[np.ndarray, dict]:
    if x.shape[4] != spec.channels:
        raise ShapeError(f"groupnorm: input has {x.shape[4]} channels, spec expects {spec.channels}")
    batch, d, h, w, c = x.shape
    g = spec.groups
    xg = x.reshape(batch, d, h, w, g, c // g)
    mean = xg.mean(axis=(1, 2, 3, 5), keepdims=True)
    var = xg.var(axis=(1, 2, 3, 5), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + np.asarray(spec.eps, dtype=x.dtype))
    xhat = (xg - mean) * inv_std
    y = xhat.reshape(x.shape) * scale + shift
    cache = {"xhat": xhat, "inv_std": inv_std, "scale": scale, "spec": spec}
    return y, cache


def groupnorm_backward(cache: dict, dy: np.ndarray) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    xhat, inv_std, scale = cache["xhat"], cache["inv_std"], cache["scale"]
    spec: GroupNormSpec = cache["spec"]
    batch, d, h, w, g, cg = xhat.shape
    if dy.shape != (batch, d, h, w, g * cg):
        raise ShapeError(f"groupnorm_backward: upstream shape {dy.shape} mismatch")
    xhat_flat = xhat.reshape(batch, d, h, w, g * cg)
    dscale = (dy * xhat_flat).sum(axis=(0, 1, 2, 3))
    dshift = dy.sum(axis=(0, 1, 2, 3))
    dxhat = (dy * scale).reshape(xhat.shape)
    # Gradient through the per-group mean and variance.
    m1 = dxhat.mean(axis=(1, 2, 3, 5), keepdims=True)
    m2 = (dxhat * xhat).mean(axis=(1, 2, 3, 5), keepdims=True)
    dx = (inv_std * (dxhat - m1 - xhat * m2)).reshape(dy.shape)
    return dx, {"scale": dscale, "shift": dshift}


# ---------------------------------------------------------------------------
# Pointwise activations


def relu_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mask = x > 0  # subgradient at 0 is defined as 0
    return np.where(mask, x, np.asarray(0, dtype=x.dtype)), mask


def relu_backward(mask: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return np.where(mask, dy, np.asarray(0, dtype=dy.dtype))


def sigmoid_forward(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic: never exponentiates a large positive value."""
    x = np.asarray(x)
    out = np.empty_like(x, dtype=x.dtype if x.dtype.kind == "f" else np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(p: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return dy * p * (1.0 - p)


# ---------------------------------------------------------------------------
# Pooling


def maxpool3d_forward(x: np.ndarray, spec: PoolSpec) -> tuple[np.ndarray, dict]:
    batch, d, h, w, c = x.shape
    wd, wh, ww = spec.window
    sd, sh, sw = spec.stride
    do = spec.out_extent(d, 0)
    ho = spec.out_extent(h, 1)
    wo = spec.out_extent(w, 2)
    win = sliding_window_view(x, spec.window, axis=(1, 2, 3))[:, ::sd, ::sh, ::sw]
    flat = win.reshape(batch, do, ho, wo, c, wd * wh * ww)
    arg = flat.argmax(axis=-1)  # first index wins ties (scan order within window)
    y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return y, {"in_shape": x.shape, "spec": spec, "arg": arg}


def maxpool3d_backward(cache: dict, dy: np.ndarray) -> np.ndarray:
    spec: PoolSpec = cache["spec"]
    arg = cache["arg"]
    if dy.shape != arg.shape:
        raise ShapeError(f"maxpool3d_backward: upstream shape {dy.shape} != {arg.shape}")
    batch, do, ho, wo, c = arg.shape
    wd, wh, ww = spec.window
    sd, sh, sw = spec.stride
    od, oh, ow = np.unravel_index(arg, (wd, wh, ww))
    bi, di, hi, wi, ci = np.indices((batch, do, ho, wo, c), sparse=True)
    dx = np.zeros(cache["in_shape"], dtype=dy.dtype)
    np.add.at(dx, (bi, di * sd + od, hi * sh + oh, wi * sw + ow, ci), dy)
    return dx


def global_avg_pool_forward(x: np.ndarray) -> tuple[np.ndarray, tuple]:
    return x.mean(axis=(1, 2, 3)), x.shape


def global_avg_pool_backward(in_shape: tuple, dy: np.ndarray) -> np.ndarray:
    batch, d, h, w, c = in_shape
    if dy.shape != (batch, c):
        raise ShapeError(f"global_avg_pool_backward: upstream shape {dy.shape} != ({batch}, {c})")
    scale = dy / (d * h * w)
    return np.broadcast_to(scale[:, None, None, None, :], in_shape).copy()


# ---------------------------------------------------------------------------
# Dense head


def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {w.shape}")
    return x @ w + b


def dense_backward(x: np.ndarray, w: np.ndarray,
                   dy: np.ndarray) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    if dy.shape != (x.shape[0], w.shape[1]):
        raise ShapeError(f"dense_backward: upstream shape {dy.shape} mismatch")
    return dy @ w.T, {"w": x.T @ dy, "b": dy.sum(axis=0)}


# ---------------------------------------------------------------------------
# Binary cross-entropy on logits


def _check_labels(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if not np.all((labels == 0) | (labels == 1)):
        raise LabelError("labels must be 0 or 1")
    return labels


def bce_loss(logits: np.ndarray, labels: np.ndarray,
             pos_weight: float = 1.0) -> tuple[float, dict]:
    """Mean binary cross-entropy, evaluated from logits.

    The log-sum-exp form log(1 + e^t) never takes log of zero, so no
    probability clamping is needed on this path.
    """
    z = np.asarray(logits, dtype=np.float64).reshape(-1)
    y = _check_labels(labels).reshape(-1).astype(np.float64)
    if z.shape != y.shape:
        raise ShapeError(f"bce_loss: {z.shape[0]} logits vs {y.shape[0]} labels")
    per = pos_weight * y * np.logaddexp(0.0, -z) + (1.0 - y) * np.logaddexp(0.0, z)
    loss = float(per.mean())
    return loss, {"z": z, "y": y, "pos_weight": pos_weight, "shape": np.shape(logits)}


def bce_backward(cache: dict) -> np.ndarray:
    z, y, pw = cache["z"], cache["y"], cache["pos_weight"]
    p = sigmoid_forward(z)
    dz = (pw * y * (p - 1.0) + (1.0 - y) * p) / z.size
    return dz.reshape(cache["shape"])
