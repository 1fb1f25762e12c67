"""Image-shaped primitives on NCHW tensors."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import ShapeError, Tensor, _accum, _node, as_tensor


def conv2d(x, weight, bias=None, stride: int = 1, pad: int = 0) -> Tensor:
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: kernel {weight.shape[2:]} larger than padded input {xp.shape[2:]}")
    # im2col once, rows ordered (n, y, x), columns ordered (c, i, j) like the weight
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(o, -1)
    y = cols @ wmat.T
    if bias is not None:
        bias = as_tensor(bias)
        y += bias.data
    y = np.ascontiguousarray(y.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(out):
        g = out.grad.transpose(0, 2, 3, 1).reshape(-1, o)
        if weight.requires_grad:
            _accum(weight, (g.T @ cols).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=0))
        if x.requires_grad:
            gc = (g @ wmat).reshape(n, ho, wo, c, kh, kw)
            gp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gc[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            _accum(x, gp[:, :, pad:pad + h, pad:pad + w] if pad else gp)

    return _node(y, parents, bw)


def maxpool2x2(x) -> Tensor:
    """2x2 max pooling, stride 2; a trailing odd row/column is dropped."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"maxpool2x2: expected NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    xc = x.data[:, :, :2 * ho, :2 * wo]
    blocks = xc.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    idx = blocks.argmax(axis=-1)
    y = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def bw(out):
        g4 = np.zeros((n, c, ho, wo, 4), dtype=x.dtype)
        np.put_along_axis(g4, idx[..., None], out.grad[..., None], axis=-1)
        g = np.zeros_like(x.data)
        g[:, :, :2 * ho, :2 * wo] = g4.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
        _accum(x, g)

    return _node(np.ascontiguousarray(y), (x,), bw)


def batchnorm2d(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Batch normalisation over (N, H, W); running buffers are updated in place when training."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4 or gamma.shape != (x.shape[1],):
        raise ShapeError(f"batchnorm2d: input {x.shape} incompatible with {gamma.shape[0]} channels")
    axes = (0, 2, 3)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = x.size // x.shape[1]
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean.astype(x.dtype), running_var.astype(x.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(1, -1, 1, 1)) * inv.reshape(1, -1, 1, 1)
    y = xhat * gamma.data.reshape(1, -1, 1, 1) + beta.data.reshape(1, -1, 1, 1)

    def bw(out):
        g = out.grad
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=axes))
        if beta.requires_grad:
            _accum(beta, g.sum(axis=axes))
        if x.requires_grad:
            gx = g * gamma.data.reshape(1, -1, 1, 1)
            if training:
                m = x.size // x.shape[1]
                s1 = gx.sum(axis=axes, keepdims=True)
                s2 = (gx * xhat).sum(axis=axes, keepdims=True)
                gx = (m * gx - s1 - xhat * s2) * (inv.reshape(1, -1, 1, 1) / m)
            else:
                gx = gx * inv.reshape(1, -1, 1, 1)
            _accum(x, gx)

    return _node(y.astype(x.dtype), (x, gamma, beta), bw)


def interp_matrix(in_size: int, out_size: int, start: float, end: float, dtype=np.float64) -> np.ndarray:
    """Rows of linear-interpolation weights sampling ``out_size`` evenly spaced
    cell centres of the interval [start, end) (input pixel i spans [i, i+1))."""
    step = (end - start) / out_size
    pos = start + (np.arange(out_size) + 0.5) * step - 0.5
    pos = np.clip(pos, 0.0, in_size - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, in_size - 1)
    frac = pos - lo
    m = np.zeros((out_size, in_size), dtype=dtype)
    rows = np.arange(out_size)
    np.add.at(m, (rows, lo), 1 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def bilinear_sample(x, ay: np.ndarray, ax: np.ndarray) -> Tensor:
    """Separable resampling ``ay @ x @ ax.T`` per sample and channel.

    ``ay``/``ax`` are either shared (P, H)/(Q, W) matrices or per-sample
    (N, P, H)/(N, Q, W) stacks.
    """
    x = as_tensor(x)
    if x.ndim != 4 or ay.shape[-1] != x.shape[2] or ax.shape[-1] != x.shape[3]:
        raise ShapeError(f"bilinear_sample: input {x.shape} vs weights {ay.shape}, {ax.shape}")
    ay = ay.astype(x.dtype, copy=False)
    ax = ax.astype(x.dtype, copy=False)
    if ay.ndim == 2:
        y = np.einsum("ph,nchw,qw->ncpq", ay, x.data, ax, optimize=True)
    else:
        y = np.einsum("nph,nchw,nqw->ncpq", ay, x.data, ax, optimize=True)

    def bw(out):
        if ay.ndim == 2:
            _accum(x, np.einsum("ph,ncpq,qw->nchw", ay, out.grad, ax, optimize=True))
        else:
            _accum(x, np.einsum("nph,ncpq,nqw->nchw", ay, out.grad, ax, optimize=True))

    return _node(np.ascontiguousarray(y), (x,), bw)


def resize_bilinear(x, out_h: int, out_w: int) -> Tensor:
    x = as_tensor(x)
    h, w = x.shape[2], x.shape[3]
    return bilinear_sample(x, interp_matrix(h, out_h, 0, h), interp_matrix(w, out_w, 0, w))


def roi_crop(x, boxes: np.ndarray, size: int, scale: float = 1.0) -> Tensor:
    """Bilinear crop of each sample's feature map over its box.

    ``boxes`` holds one continuous (x0, y0, x1, y1) box per sample in input
    pixel coordinates; ``scale`` maps them onto the feature grid.
    """
    x = as_tensor(x)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if boxes.shape[0] != x.shape[0]:
        raise ShapeError(f"roi_crop: {boxes.shape[0]} boxes for batch of {x.shape[0]}")
    h, w = x.shape[2], x.shape[3]
    ay = np.stack([interp_matrix(h, size, b[1] * scale, b[3] * scale) for b in boxes])
    ax = np.stack([interp_matrix(w, size, b[0] * scale, b[2] * scale) for b in boxes])
    return bilinear_sample(x, ay, ax)
