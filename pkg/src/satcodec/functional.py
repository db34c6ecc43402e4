"""Convolution family and GDN on top of :mod:`satcodec.tensor`.

All spatial ops take (N, C, H, W) tensors; 3-D (C, H, W) inputs are accepted
and returned without the batch axis. Convolutions are cross-correlations.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, _lift, add, div, make, mul, reshape, sqrt


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ShapeError(f"expected (C,H,W) or (N,C,H,W) input, got shape {x.shape}")
    return x, False


def _unbatched(y: Tensor, squeeze: bool) -> Tensor:
    return reshape(y, y.shape[1:]) if squeeze else y


def _pad(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


# -- raw numpy kernels ------------------------------------------------------


def _conv_fwd(x, w, stride, pad):
    kh, kw = w.shape[2:]
    ph, pw = pad
    ho = out_size(x.shape[2], kh, stride, ph)
    wo = out_size(x.shape[3], kw, stride, pw)
    win = _windows(_pad(x, ph, pw), kh, kw, stride, ho, wo)
    y = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # N, Ho, Wo, O
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2))


def _conv_bwd_input(gy, w, x_shape, stride, pad):
    n, c, h, wd = x_shape
    kh, kw = w.shape[2:]
    ph, pw = pad
    ho, wo = gy.shape[2:]
    gxp = np.zeros((n, c, h + 2 * ph, wd + 2 * pw), dtype=gy.dtype)
    cols = np.tensordot(gy, w, axes=([1], [0]))  # N, Ho, Wo, C, kh, kw
    cols = cols.transpose(0, 3, 1, 2, 4, 5)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride] += cols[..., i, j]
    return gxp[:, :, ph : ph + h, pw : pw + wd]


def _conv_bwd_weight(gy, x, w_shape, stride, pad):
    kh, kw = w_shape[2:]
    ph, pw = pad
    ho, wo = gy.shape[2:]
    win = _windows(_pad(x, ph, pw), kh, kw, stride, ho, wo)
    return np.tensordot(gy, win, axes=([0, 2, 3], [0, 2, 3]))  # O, C, kh, kw


def _dw_fwd(x, w, stride, pad):
    kh, kw = w.shape[2:]
    ph, pw = pad
    ho = out_size(x.shape[2], kh, stride, ph)
    wo = out_size(x.shape[3], kw, stride, pw)
    xp = _pad(x, ph, pw)
    y = np.zeros((x.shape[0], x.shape[1], ho, wo), dtype=np.result_type(x, w))
    for i in range(kh):
        for j in range(kw):
            y += xp[:, :, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride] * w[None, :, 0, i, j, None, None]
    return y


def _dw_bwd(gy, x, w, stride, pad, need_x, need_w):
    kh, kw = w.shape[2:]
    ph, pw = pad
    ho, wo = gy.shape[2:]
    xp = _pad(x, ph, pw)
    gxp = np.zeros_like(xp) if need_x else None
    gw = np.zeros_like(w) if need_w else None
    for i in range(kh):
        for j in range(kw):
            sl = (slice(None), slice(None), slice(i, i + (ho - 1) * stride + 1, stride), slice(j, j + (wo - 1) * stride + 1, stride))
            if need_w:
                gw[:, 0, i, j] = np.einsum("nchw,nchw->c", gy, xp[sl], dtype=np.float64)
            if need_x:
                gxp[sl] += gy * w[None, :, 0, i, j, None, None]
    gx = gxp[:, :, ph : ph + x.shape[2], pw : pw + x.shape[3]] if need_x else None
    return gx, gw


# -- differentiable ops -----------------------------------------------------


def _add_bias(y: Tensor, bias) -> Tensor:
    if bias is None:
        return y
    bias = _lift(bias, y)
    return add(y, reshape(bias, (1, -1, 1, 1)))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad=0) -> Tensor:
    """Dense 2-D cross-correlation; ``weight`` is (C_out, C_in, kh, kw)."""
    x, squeeze = _batched(_lift(x))
    weight = _lift(weight, x)
    pad = _pair(pad)
    if weight.ndim != 4:
        raise ShapeError(f"conv2d weight must be 4-D, got {weight.shape}")
    c_out, c_in, kh, kw = weight.shape
    if x.shape[1] != c_in:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, weight expects {c_in} (weight {weight.shape})")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d kernel must be odd, got {kh}x{kw}")
    ho, wo = out_size(x.shape[2], kh, stride, pad[0]), out_size(x.shape[3], kw, stride, pad[1])
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {x.shape[2]}x{x.shape[3]} too small for kernel {kh}x{kw}, pad {pad}, stride {stride}")

    def bw(g):
        gx = _conv_bwd_input(g, weight.data, x.shape, stride, pad) if x.requires_grad else None
        gw = _conv_bwd_weight(g, x.data, weight.shape, stride, pad) if weight.requires_grad else None
        return gx, gw

    y = make(_conv_fwd(x.data, weight.data, stride, pad), (x, weight), bw, "conv2d")
    return _unbatched(_add_bias(y, bias), squeeze)


def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad=0) -> Tensor:
    """Per-channel cross-correlation; ``weight`` is (C, 1, kh, kw)."""
    x, squeeze = _batched(_lift(x))
    weight = _lift(weight, x)
    pad = _pair(pad)
    if weight.ndim != 4 or weight.shape[1] != 1:
        raise ShapeError(f"depthwise weight must be (C,1,kh,kw), got {weight.shape}")
    if weight.shape[0] != x.shape[1]:
        raise ShapeError(f"depthwise: input has {x.shape[1]} channels, weight has {weight.shape[0]} filters")
    kh, kw = weight.shape[2:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"depthwise kernel must be odd, got {kh}x{kw}")

    def bw(g):
        return _dw_bwd(g, x.data, weight.data, stride, pad, x.requires_grad, weight.requires_grad)

    y = make(_dw_fwd(x.data, weight.data, stride, pad), (x, weight), bw, "depthwise_conv2d")
    return _unbatched(_add_bias(y, bias), squeeze)


def transposed_conv2d(
    x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad=0, output_padding: int = 0
) -> Tensor:
    """Adjoint of :func:`conv2d` w.r.t. its input; ``weight`` is (C_in, C_out, kh, kw).

    Output extent is ``(H - 1) * stride - 2 * pad + k + output_padding``.
    """
    x, squeeze = _batched(_lift(x))
    weight = _lift(weight, x)
    pad = _pair(pad)
    if stride not in (1, 2):
        raise ShapeError(f"transposed_conv2d stride must be 1 or 2, got {stride}")
    if weight.ndim != 4 or weight.shape[0] != x.shape[1]:
        raise ShapeError(f"transposed_conv2d: input has {x.shape[1]} channels, weight is {weight.shape}")
    if not 0 <= output_padding < stride:
        raise ShapeError("output_padding must be smaller than stride")
    kh, kw = weight.shape[2:]
    n, _, h, w = x.shape
    ho = (h - 1) * stride - 2 * pad[0] + kh + output_padding
    wo = (w - 1) * stride - 2 * pad[1] + kw + output_padding
    if ho < 1 or wo < 1:
        raise ShapeError("transposed_conv2d output would be empty")
    out_shape = (n, weight.shape[1], ho, wo)

    def bw(g):
        gx = _conv_fwd(g, weight.data, stride, pad) if x.requires_grad else None
        gw = _conv_bwd_weight(x.data, g, weight.shape, stride, pad) if weight.requires_grad else None
        return gx, gw

    y = make(_conv_bwd_input(x.data, weight.data, out_shape, stride, pad), (x, weight), bw, "transposed_conv2d")
    return _unbatched(_add_bias(y, bias), squeeze)


def gdn(x: Tensor, beta: Tensor, gamma: Tensor, inverse: bool = False) -> Tensor:
    """Generalized divisive normalization.

    ``y_i = x_i / sqrt(beta_i + sum_j gamma_ij * x_j**2)``; with ``inverse=True``
    the square root multiplies instead of divides (IGDN).
    """
    x, squeeze = _batched(_lift(x))
    beta, gamma = _lift(beta, x), _lift(gamma, x)
    c = x.shape[1]
    if beta.shape != (c,) or gamma.shape != (c, c):
        raise ShapeError(f"gdn params beta {beta.shape}, gamma {gamma.shape} do not match {c} channels")
    norm = conv2d(mul(x, x), reshape(gamma, (c, c, 1, 1)), beta)
    scale = sqrt(norm)
    y = mul(x, scale) if inverse else div(x, scale)
    return _unbatched(y, squeeze)
