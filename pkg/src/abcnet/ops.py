"""Differentiable kernels used by the network: convolutions, linear maps,
attention products, softmax, pooling and resampling.

All spatial tensors are laid out as (N, C, H, W).
"""
from __future__ import annotations

from functools import lru_cache
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import DTYPE, Tensor, as_tensor, make_node, report_flops


def conv_output_size(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _im2col(xp: np.ndarray, k: int, dilation: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c, _, _ = xp.shape
    s_n, s_c, s_h, s_w = xp.strides
    view = as_strided(
        xp,
        shape=(n, c, k, k, ho, wo),
        strides=(s_n, s_c, dilation * s_h, dilation * s_w, stride * s_h, stride * s_w),
        writeable=False,
    )
    return view.reshape(n, c * k * k, ho * wo)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    """2-D cross-correlation with zero padding.

    x: (N, Cin, H, W), weight: (Cout, Cin, k, k), bias: (Cout,).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, k, k2 = weight.shape
    if wcin != cin:
        raise ValueError(f"conv2d channel mismatch: input has {cin}, weight expects {wcin}")
    if k != k2 or k < 1:
        raise ValueError(f"conv2d needs a square kernel, got {k}x{k2}")
    if dilation < 1 or stride < 1 or padding < 0:
        raise ValueError("conv2d needs dilation >= 1, stride >= 1, padding >= 0")
    ho = conv_output_size(h, k, stride, padding, dilation)
    wo = conv_output_size(w, k, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d output size would be {ho}x{wo}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ValueError(f"conv2d bias shape {bias.shape} != ({cout},)")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(np.ascontiguousarray(xp), k, dilation, stride, ho, wo)
    w2 = weight.data.reshape(cout, -1)
    out = np.matmul(w2, cols)
    if bias is not None:
        out = out + bias.data[:, None]
    report_flops("conv2d", 2 * k * k * cin * cout * ho * wo * n)

    def backward(g):
        g = g.reshape(n, cout, ho * wo)
        gw = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(weight.shape) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = np.matmul(w2.T, g).reshape(n, cin, k, k, ho, wo)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            h_span = stride * (ho - 1) + 1
            w_span = stride * (wo - 1) + 1
            for i in range(k):
                for j in range(k):
                    r0, c0 = i * dilation, j * dilation
                    gxp[:, :, r0:r0 + h_span:stride, c0:c0 + w_span:stride] += dcols[:, :, i, j]
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out.reshape(n, cout, ho, wo), parents, backward, "conv2d")


def pointwise_conv(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """1x1 convolution: a per-pixel linear map across channels."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4:
        raise ValueError(f"pointwise_conv expects (N, C, H, W), got {x.shape}")
    n, cin, h, w = x.shape
    if weight.ndim == 4:
        if weight.shape[2:] != (1, 1):
            raise ValueError(f"pointwise_conv weight must be (Cout, Cin, 1, 1), got {weight.shape}")
    elif weight.ndim != 2:
        raise ValueError(f"pointwise_conv weight must be (Cout, Cin, 1, 1), got {weight.shape}")
    cout, wcin = weight.shape[:2]
    if wcin != cin:
        raise ValueError(f"pointwise_conv channel mismatch: input has {cin}, weight expects {wcin}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ValueError(f"pointwise_conv bias shape {bias.shape} != ({cout},)")

    x2 = x.data.reshape(n, cin, h * w)
    w2 = weight.data.reshape(cout, cin)
    out = np.matmul(w2, x2)
    if bias is not None:
        out = out + bias.data[:, None]
    report_flops("pointwise_conv", 2 * cin * cout * h * w * n)

    def backward(g):
        g = g.reshape(n, cout, h * w)
        gx = np.matmul(w2.T, g).reshape(x.shape) if x.requires_grad else None
        gw = (np.tensordot(g, x2, axes=([0, 2], [0, 2])).reshape(weight.shape)
              if weight.requires_grad else None)
        gb = g.sum(axis=(0, 2)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out.reshape(n, cout, h, w), parents, backward, "pointwise_conv")


def fully_connected(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """y = W x + b over the last axis; x: (..., M), weight: (K, M), bias: (K,)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2:
        raise ValueError(f"fully_connected weight must be 2-D, got {weight.shape}")
    k, m = weight.shape
    if x.shape[-1] != m:
        raise ValueError(f"fully_connected: input width {x.shape[-1]} != weight width {m}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (k,):
            raise ValueError(f"fully_connected bias shape {bias.shape} != ({k},)")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    rows = x.size // m
    report_flops("fully_connected", 2 * k * m * rows)

    def backward(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.reshape(-1, k).T @ x.data.reshape(-1, m) if weight.requires_grad else None
        gb = g.reshape(-1, k).sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, backward, "fully_connected")


def batched_matmul(a: Tensor, b: Tensor) -> Tensor:
    """out[..., h, w] = sum_j a[..., h, j] * b[..., j, w] with identical leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or a.ndim != b.ndim:
        raise ValueError(f"batched_matmul rank mismatch: {a.shape} vs {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"batched_matmul batch dims differ: {a.shape} vs {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"batched_matmul inner dims differ: {a.shape} vs {b.shape}")
    out = np.matmul(a.data, b.data)
    batch = int(np.prod(a.shape[:-2], dtype=np.int64))
    report_flops("batched_matmul", 2 * batch * a.shape[-2] * a.shape[-1] * b.shape[-1])

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return ga, gb

    return make_node(out, (a, b), backward, "batched_matmul")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_node(out, (x,), backward, "softmax")


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2. Ties route the gradient to the first element in row-major order."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ValueError(f"maxpool2x2 expects (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2x2 needs even H and W, got {h}x{w}")
    windows = (x.data.reshape(n, c, h // 2, 2, w // 2, 2)
               .transpose(0, 1, 2, 4, 3, 5)
               .reshape(n, c, h // 2, w // 2, 4))
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        routed = np.zeros((n, c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(routed, idx[..., None], g[..., None], axis=-1)
        gx = (routed.reshape(n, c, h // 2, w // 2, 2, 2)
              .transpose(0, 1, 2, 4, 3, 5)
              .reshape(n, c, h, w))
        return (gx,)

    return make_node(out, (x,), backward, "maxpool2x2")


@lru_cache(maxsize=None)
def _upsample_matrix(size: int) -> np.ndarray:
    # align_corners=False: source coordinate (o + 0.5) / 2 - 0.5, clamped at the border
    m = np.zeros((2 * size, size), dtype=DTYPE)
    for o in range(2 * size):
        src = max((o + 0.5) / 2.0 - 0.5, 0.0)
        lo = min(int(np.floor(src)), size - 1)
        hi = min(lo + 1, size - 1)
        frac = src - lo
        m[o, lo] += 1.0 - frac
        m[o, hi] += frac
    m.setflags(write=False)
    return m


def upsample_bilinear2x(x: Tensor) -> Tensor:
    """Bilinear 2x upsampling (align_corners=False), applied separably."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ValueError(f"upsample_bilinear2x expects (N, C, H, W), got {x.shape}")
    uh = _upsample_matrix(x.shape[2])
    uw = _upsample_matrix(x.shape[3])
    out = np.matmul(np.matmul(uh, x.data), uw.T)

    def backward(g):
        return (np.matmul(np.matmul(uh.T, g), uw),)

    return make_node(out, (x,), backward, "upsample_bilinear2x")


def group_norm(x: Tensor, groups: int = 1, eps: float = 1e-5) -> Tensor:
    """Per-sample normalisation over channel groups of an (N, C, H, W) map, no affine.

    Each sample's channels are split into ``groups`` equal groups; every group
    is shifted and scaled to zero mean, unit variance over (C / groups, H, W).
    One group normalises the whole feature map of a sample.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise ValueError(f"group_norm expects (N, C, H, W), got {x.shape}")
    n, c = x.shape[:2]
    if groups < 1 or c % groups:
        raise ValueError(f"group_norm: {c} channels do not split into {groups} groups")
    flat = x.data.reshape(n, groups, -1)
    mu = flat.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(flat.var(axis=-1, keepdims=True) + eps)
    xh = (flat - mu) * inv

    def backward(g):
        g = g.reshape(n, groups, -1)
        gx = inv * (g - g.mean(axis=-1, keepdims=True) - xh * (g * xh).mean(axis=-1, keepdims=True))
        return (gx.reshape(x.shape),)

    return make_node(xh.reshape(x.shape), (x,), backward, "group_norm")


def scale(x: Tensor, alpha: Tensor) -> Tensor:
    """Multiply a tensor by a learnable one-element weight."""
    alpha = as_tensor(alpha)
    if alpha.size != 1:
        raise ValueError(f"scale expects a one-element weight, got shape {alpha.shape}")
    x = as_tensor(x)

    def backward(g):
        return g * alpha.data[0], np.array([(g * x.data).sum()], dtype=g.dtype).reshape(alpha.shape)

    return make_node(x.data * alpha.data[0], (x, alpha), backward, "scale")


__all__ = [
    "conv_output_size",
    "conv2d",
    "pointwise_conv",
    "fully_connected",
    "group_norm",
    "batched_matmul",
    "softmax",
    "maxpool2x2",
    "upsample_bilinear2x",
    "scale",
]
