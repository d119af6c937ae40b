"""Differentiable building blocks of the segmentation network (NCHW layout)."""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .exceptions import InputError
from .tensor import Tensor, record

IGNORE_LABEL = 255


def _same_padding(kernel: int, dilation: int) -> tuple[int, int]:
    total = dilation * (kernel - 1)
    return total // 2, total - total // 2


def _im2col_nhwc(xh: np.ndarray, k: int, dilation: int, stride: int,
                 ho: int, wo: int) -> np.ndarray:
    """(N, Hp, Wp, C) padded input -> (N*ho*wo, k*k*C) patch matrix."""
    n, _, _, c = xh.shape
    s_n, s_h, s_w, s_c = xh.strides
    win = as_strided(
        xh,
        shape=(n, ho, wo, k, k, c),
        strides=(s_n, s_h * stride, s_w * stride, s_h * dilation, s_w * dilation, s_c),
        writeable=False,
    )
    return win.reshape(n * ho * wo, k * k * c)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, dilation: int = 1) -> Tensor:
    """'Same'-padded 2-D convolution (cross-correlation), output size ceil(H/stride).

    Computed channels-last internally: patches (N*H*W, k*k*C) @ (k*k*C, O).
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise InputError(f"conv2d expects NCHW input and OIKK weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise InputError(f"conv2d channel mismatch: input has {c}, weight expects {ci}")
    if kh != kw or kh not in (1, 3):
        raise InputError(f"conv2d supports 1x1 and 3x3 kernels, got {kh}x{kw}")
    if bias is not None and bias.shape != (o,):
        raise InputError(f"conv2d bias shape {bias.shape} does not match {o} output channels")
    if stride < 1 or dilation < 1:
        raise InputError(f"stride and dilation must be >= 1, got {stride}, {dilation}")
    k = kh
    ho, wo = math.ceil(h / stride), math.ceil(w / stride)
    lo, hi = _same_padding(k, dilation)
    xh = x.data.transpose(0, 2, 3, 1)
    if lo or hi:
        xh = np.pad(xh, ((0, 0), (lo, hi), (lo, hi), (0, 0)))
    else:
        xh = np.ascontiguousarray(xh)
    padded_shape = xh.shape
    cols = _im2col_nhwc(xh, k, dilation, stride, ho, wo)
    # (k, k, C, O) ordering matches the patch columns
    wmat = weight.data.transpose(2, 3, 1, 0).reshape(k * k * c, o)
    out = cols @ wmat
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    def backward_fn(g: np.ndarray):
        gh = np.ascontiguousarray(g.transpose(0, 2, 3, 1))
        g2d = gh.reshape(n * ho * wo, o)
        dw = db = dx = None
        if weight.requires_grad:
            dw = np.ascontiguousarray((cols.T @ g2d).reshape(k, k, c, o).transpose(3, 2, 0, 1))
        if bias is not None and bias.requires_grad:
            db = g2d.sum(axis=0)
        if x.requires_grad:
            if k == 1 and stride == 1:
                dxh = (g2d @ wmat.T).reshape(n, h, w, c)
            elif stride == 1 and lo == hi:
                # transposed conv == conv with spatially flipped, channel-swapped kernel
                gp = np.pad(gh, ((0, 0), (lo, hi), (lo, hi), (0, 0)))
                gcols = _im2col_nhwc(gp, k, dilation, 1, h, w)
                wflip = weight.data[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(k * k * o, c)
                dxh = (gcols @ wflip).reshape(n, h, w, c)
            else:
                dcols = (g2d @ wmat.T).reshape(n, ho, wo, k, k, c)
                dxp = np.zeros(padded_shape, dtype=g.dtype)
                for i in range(k):
                    for j in range(k):
                        r0, c0 = i * dilation, j * dilation
                        dxp[:, r0:r0 + stride * ho:stride, c0:c0 + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
                dxh = dxp[:, lo:lo + h, lo:lo + w, :]
            dx = np.ascontiguousarray(dxh.transpose(0, 3, 1, 2))
        return dx, dw, db

    if bias is None:
        return record((x, weight), out, lambda g: backward_fn(g)[:2])
    return record((x, weight, bias), out, backward_fn)


def maxpool2(x: Tensor, stride: int = 2) -> Tensor:
    """2x2 max pooling; stride 2 halves (ceil), stride 1 keeps the size.

    Gradient goes to the first maximal element of each window (row-major).
    """
    if stride not in (1, 2):
        raise InputError(f"maxpool2 stride must be 1 or 2, got {stride}")
    if x.data.ndim != 4:
        raise InputError(f"maxpool2 expects NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    ho, wo = (math.ceil(h / 2), math.ceil(w / 2)) if stride == 2 else (h, w)
    ph = (ho - 1) * stride + 2 - h
    pw = (wo - 1) * stride + 2 - w
    xp = np.pad(x.data, ((0, 0), (0, 0), (0, ph), (0, pw)), constant_values=-np.inf)
    s_n, s_c, s_h, s_w = xp.strides
    win = as_strided(xp, shape=(n, c, ho, wo, 2, 2),
                     strides=(s_n, s_c, s_h * stride, s_w * stride, s_h, s_w),
                     writeable=False).reshape(n, c, ho, wo, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    padded_shape = xp.shape

    def backward_fn(g: np.ndarray):
        dxp = np.zeros(padded_shape, dtype=g.dtype)
        for a in range(2):
            for b in range(2):
                routed = np.where(arg == 2 * a + b, g, 0)
                dxp[:, :, a:a + stride * ho:stride, b:b + stride * wo:stride] += routed
        return (dxp[:, :, :h, :w],)

    return record((x,), np.ascontiguousarray(out), backward_fn)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record((x,), x.data * mask, lambda g: (g * mask,))


def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Row i holds align-corners bilinear weights for output sample i."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    for i in range(n_out):
        src = i * (n_in - 1) / (n_out - 1) if n_out > 1 else 0.0
        i0 = min(int(math.floor(src)), n_in - 1)
        frac = src - i0
        m[i, i0] += 1.0 - frac
        if frac > 0:
            m[i, min(i0 + 1, n_in - 1)] += frac
    return m.astype(dtype)


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    """Bilinear upsampling by an integer factor, align-corners convention."""
    if factor < 1:
        raise InputError(f"upsample factor must be >= 1, got {factor}")
    if x.data.ndim != 4:
        raise InputError(f"bilinear_upsample expects NCHW input, got shape {x.shape}")
    if factor == 1:
        return record((x,), x.data.copy(), lambda g: (g,))
    _, _, h, w = x.shape
    uh = _interp_matrix(h, h * factor, x.dtype)
    uw = _interp_matrix(w, w * factor, x.dtype)
    out = uh @ x.data @ uw.T
    return record((x,), out, lambda g: (uh.T @ g @ uw,))


def pixel_cross_entropy(logits: Tensor, labels: np.ndarray, ignore_label: int = IGNORE_LABEL) -> Tensor:
    """Mean over non-ignored pixels of -log softmax(logits)[label]."""
    if logits.data.ndim != 4:
        raise InputError(f"logits must be NCHW, got shape {logits.shape}")
    n, c, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise InputError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    labels = labels.astype(np.int64)
    valid = labels != ignore_label
    bad = valid & ((labels < 0) | (labels >= c))
    if bad.any():
        raise InputError(f"label values must be in [0, {c}) or {ignore_label}; "
                         f"found {np.unique(labels[bad]).tolist()}")
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    safe = np.where(valid, labels, 0)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    n_valid = int(valid.sum())
    dtype = z.dtype
    if n_valid == 0:
        loss = np.zeros(1, dtype=dtype)
    else:
        loss = np.array([-(picked[valid].sum(dtype=dtype)) / n_valid], dtype=dtype)

    def backward_fn(g: np.ndarray):
        if n_valid == 0:
            return (np.zeros_like(z),)
        grad = np.exp(logp)
        np.put_along_axis(grad, safe[:, None],
                          np.take_along_axis(grad, safe[:, None], axis=1) - 1, axis=1)
        grad *= valid[:, None]
        grad *= g[0] / n_valid
        return (grad.astype(dtype, copy=False),)

    return record((logits,), loss, backward_fn)
