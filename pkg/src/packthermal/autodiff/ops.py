"""Differentiable operators on NCHW tensors.

Only what the UNet assemblies need: reflect-padded 3x3 / 1x1 convolution,
group normalization, GELU/ReLU, 2x2 average pooling, 2x bilinear
upsampling, channel concatenation and a pixel-weighted L1 loss.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .tensor import Tensor, as_tensor, make

_SQRT2 = np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _pad_reflect(x: np.ndarray, top: int, bottom: int, left: int, right: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (top, bottom), (left, right)), mode="reflect")


def _fold_axis(g: np.ndarray, lo: int, hi: int, axis: int) -> np.ndarray:
    """Adjoint of mirror padding (no edge duplication) along one axis."""
    g = np.moveaxis(g, axis, -1)
    n = g.shape[-1] - lo - hi
    out = g[..., lo:lo + n].copy()
    if lo:
        out[..., 1:lo + 1] += g[..., :lo][..., ::-1]
    if hi:
        out[..., n - 1 - hi:n - 1] += g[..., lo + n:][..., ::-1]
    return np.moveaxis(out, -1, axis)


def _unpad_reflect(g: np.ndarray, top: int, bottom: int, left: int, right: int) -> np.ndarray:
    return _fold_axis(_fold_axis(g, left, right, 3), top, bottom, 2)


def pad_reflect(x: Tensor, top: int, bottom: int, left: int, right: int) -> Tensor:
    def vjp(g):
        return (_unpad_reflect(g, top, bottom, left, right),)
    return make(_pad_reflect(x.data, top, bottom, left, right), (x,), vjp, "pad_reflect")


def crop(x: Tensor, top: int, left: int, height: int, width: int) -> Tensor:
    shape = x.shape

    def vjp(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[:, :, top:top + height, left:left + width] = g
        return (gx,)
    return make(x.data[:, :, top:top + height, left:left + width], (x,), vjp, "crop")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Cross-correlation with 1x1 or reflect-padded 3x3 kernels; keeps H and W."""
    n, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    if ci != c:
        raise ValueError(f"conv2d: input has {c} channels, weight expects {ci}")
    if (kh, kw) not in ((1, 1), (3, 3)):
        raise ValueError(f"conv2d: unsupported kernel {kh}x{kw}")
    if bias is not None and bias.shape != (co,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({co},)")
    w2 = weight.data.reshape(co, ci * kh * kw)
    if kh == 1:
        cols = x.data.reshape(n, c, h * w)
    else:
        xp = _pad_reflect(x.data, 1, 1, 1, 1)
        cols = np.empty((n, c, 9, h, w), dtype=x.data.dtype)
        for k in range(9):
            di, dj = divmod(k, 3)
            cols[:, :, k] = xp[:, :, di:di + h, dj:dj + w]
        cols = cols.reshape(n, c * 9, h * w)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, co, h, w)

    def vjp(g):
        g2 = g.reshape(n, co, h * w)
        gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape) \
            if weight.requires_grad else None
        gb = g2.sum(axis=(0, 2)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2)
            if kh == 1:
                gx = gcols.reshape(n, c, h, w)
            else:
                gcols = gcols.reshape(n, c, 9, h, w)
                gxp = np.zeros((n, c, h + 2, w + 2), dtype=g.dtype)
                for k in range(9):
                    di, dj = divmod(k, 3)
                    gxp[:, :, di:di + h, dj:dj + w] += gcols[:, :, k]
                gx = _unpad_reflect(gxp, 1, 1, 1, 1)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make(out, parents, vjp, "conv2d")


def group_norm(x: Tensor, groups: int, scale: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    n, c, h, w = x.shape
    if c % groups:
        raise ValueError(f"group_norm: {c} channels not divisible by {groups} groups")
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(n, c, h, w)
    out = xhat * scale.data[None, :, None, None] + shift.data[None, :, None, None]

    def vjp(g):
        gscale = (g * xhat).sum(axis=(0, 2, 3)) if scale.requires_grad else None
        gshift = g.sum(axis=(0, 2, 3)) if shift.requires_grad else None
        gx = None
        if x.requires_grad:
            gxh = (g * scale.data[None, :, None, None]).reshape(n, groups, -1)
            xh = xhat.reshape(n, groups, -1)
            gx = inv * (gxh - gxh.mean(axis=2, keepdims=True)
                        - xh * (gxh * xh).mean(axis=2, keepdims=True))
            gx = gx.reshape(n, c, h, w)
        return gx, gscale, gshift

    return make(out, (x, scale, shift), vjp, "group_norm")


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))

    def vjp(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)
    return make(x.data * cdf, (x,), vjp, "gelu")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0

    def vjp(g):
        return (g * pos,)
    return make(np.where(pos, x.data, 0).astype(x.dtype), (x,), vjp, "relu")


def avg_pool2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2 needs even spatial dims, got {h}x{w}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def vjp(g):
        gx = np.repeat(np.repeat(g * 0.25, 2, axis=2), 2, axis=3)
        return (gx,)
    return make(out, (x,), vjp, "avg_pool2")


def _up_axis(a: np.ndarray, axis: int) -> np.ndarray:
    a = np.moveaxis(a, axis, -1)
    prev = np.concatenate([a[..., :1], a[..., :-1]], axis=-1)
    nxt = np.concatenate([a[..., 1:], a[..., -1:]], axis=-1)
    out = np.empty(a.shape[:-1] + (2 * a.shape[-1],), dtype=a.dtype)
    out[..., 0::2] = 0.75 * a + 0.25 * prev
    out[..., 1::2] = 0.75 * a + 0.25 * nxt
    return np.moveaxis(out, -1, axis)


def _up_axis_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    g = np.moveaxis(g, axis, -1)
    ge, go = g[..., 0::2], g[..., 1::2]
    out = 0.75 * (ge + go)
    out[..., :-1] += 0.25 * ge[..., 1:]  # x[k] feeds out[2(k+1)] as "prev"
    out[..., :1] += 0.25 * ge[..., :1]
    out[..., 1:] += 0.25 * go[..., :-1]  # x[k] feeds out[2(k-1)+1] as "next"
    out[..., -1:] += 0.25 * go[..., -1:]
    return np.moveaxis(out, -1, axis)


def bilinear_up2(x: Tensor) -> Tensor:
    """2x bilinear upsampling, half-pixel (align_corners=False) sampling."""
    out = _up_axis(_up_axis(x.data, 2), 3)

    def vjp(g):
        return (_up_axis_adjoint(_up_axis_adjoint(g, 3), 2),)
    return make(out, (x,), vjp, "bilinear_up2")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"concat_channels: incompatible shapes {a.shape} and {b.shape}")
    ca = a.shape[1]

    def vjp(g):
        return g[:, :ca], g[:, ca:]
    return make(np.concatenate([a.data, b.data], axis=1), (a, b), vjp, "concat")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def vjp(g):
        return g, g
    return make(a.data + b.data, (a, b), vjp, "add")


def affine(x: Tensor, scale: float, shift: float = 0.0) -> Tensor:
    """``scale * x + shift`` with Python scalars."""
    def vjp(g):
        return (g * scale,)
    return make(x.data * scale + shift, (x,), vjp, "affine")


def cast(x: Tensor, dtype) -> Tensor:
    src = x.dtype

    def vjp(g):
        return (g.astype(src),)
    return make(x.data.astype(dtype), (x,), vjp, "cast")


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data, False, (), None, "detach")


def total(x: Tensor) -> Tensor:
    """Sum of all elements as a scalar tensor."""
    shape = x.shape

    def vjp(g):
        return (np.broadcast_to(g, shape).astype(x.dtype),)
    return make(np.asarray(x.data.sum()), (x,), vjp, "sum")


def weighted_l1(pred: Tensor, target, weights) -> Tensor:
    """``mean(w * |pred - target|)`` over every element; ``weights`` carry no gradient."""
    target = as_tensor(target)
    w = np.asarray(weights.data if isinstance(weights, Tensor) else weights)
    if pred.shape != target.shape:
        raise ValueError(f"weighted_l1: shape mismatch {pred.shape} vs {target.shape}")
    d = pred.data - target.data
    size = d.size
    val = np.asarray((np.broadcast_to(w, d.shape) * np.abs(d)).sum() / size)

    def vjp(g):
        gp = g * np.broadcast_to(w, d.shape) * np.sign(d) / size
        return gp, -gp
    return make(val, (pred, target), vjp, "weighted_l1")
