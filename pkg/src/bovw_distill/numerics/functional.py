"""Differentiable neural building blocks on top of :mod:`tensor`."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DTYPE, ShapeError, Tensor, ensure_tensor, log_softmax

NORM_EPS = 1e-12
BN_EPS = 1e-5


# -- similarity ----------------------------------------------------------------


def l2_normalize(x: Tensor, axis: int = -1, eps: float = NORM_EPS) -> Tensor:
    """x / max(||x||_2, eps) along ``axis``."""
    x = ensure_tensor(x)
    return x / _safe_norm(x, axis, eps)


def _safe_norm(x: Tensor, axis: int, eps: float) -> Tensor:
    sq = x.data * x.data
    n = np.sqrt(sq.sum(axis=axis, keepdims=True))
    clipped = n <= eps
    out = np.where(clipped, eps, n)

    def bw(g):
        safe = np.where(clipped, 1.0, n)
        return (np.where(clipped, 0.0, g * x.data / safe),)

    return Tensor.from_op(out, (x,), bw)


def cosine_sim(u: Tensor, v: Tensor, eps: float = NORM_EPS, axis: int = -1) -> Tensor:
    """u.v / (max(|u|, eps) * max(|v|, eps)) reduced over ``axis``."""
    u, v = ensure_tensor(u), ensure_tensor(v)
    if u.shape[axis] != v.shape[axis]:
        raise ShapeError(f"cosine_sim: vector lengths differ for shapes {u.shape} and {v.shape}")
    return (l2_normalize(u, axis, eps) * l2_normalize(v, axis, eps)).sum(axis=axis)


def pairwise_cosine(a: Tensor, b: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Cosine similarity between rows: a (..., n, d), b (..., m, d) -> (..., n, m)."""
    an = l2_normalize(a, -1, eps)
    bn = l2_normalize(b, -1, eps)
    return an @ bn.transpose(*range(bn.ndim - 2), bn.ndim - 1, bn.ndim - 2)


# -- linear / convolution -------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight.T + bias, weight of shape (out, in)."""
    x = ensure_tensor(x)
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input shape {x.shape} does not match weight shape {weight.shape}")
    out = x @ weight.T
    return out + bias if bias is not None else out


PAD_MODES = ("zeros", "edge")


def _pad(x: np.ndarray, pad: int, mode: str = "zeros") -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="constant" if mode == "zeros" else "edge")


def _unpad(g: np.ndarray, pad: int, mode: str) -> np.ndarray:
    """Adjoint of ``_pad``: edge padding sends border gradients back to the border pixels."""
    if pad == 0:
        return g
    if mode == "edge":
        g = g.copy()
        g[:, :, pad, :] += g[:, :, :pad, :].sum(axis=2)
        g[:, :, -pad - 1, :] += g[:, :, -pad:, :].sum(axis=2)
        g = g[:, :, pad:-pad, :]
        g[:, :, :, pad] += g[:, :, :, :pad].sum(axis=3)
        g[:, :, :, -pad - 1] += g[:, :, :, -pad:].sum(axis=3)
        return g[:, :, :, pad:-pad]
    return g[:, :, pad:-pad, pad:-pad]


def conv2d(
    x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0, pad_mode: str = "zeros"
) -> Tensor:
    """Cross-correlation. x: (N, C, H, W) or (C, H, W); weight: (O, C, k, k).

    ``pad_mode="edge"`` replicates border pixels, so a constant input stays
    exactly constant across the whole output.
    """
    if pad_mode not in PAD_MODES:
        raise ValueError(f"pad_mode must be one of {PAD_MODES}, got {pad_mode!r}")
    x = ensure_tensor(x)
    squeeze = x.ndim == 3
    if squeeze:
        x = x.reshape(1, *x.shape)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, wc, kh, kw = weight.shape
    if wc != c:
        raise ShapeError(f"conv2d: input shape {x.shape} has {c} channels, weight shape {weight.shape} expects {wc}")
    if kh != kw:
        raise ShapeError(f"conv2d: only square kernels are supported, got {weight.shape}")
    k = kh
    hp, wp = h + 2 * padding, w + 2 * padding
    if k > hp or k > wp:
        raise ShapeError(f"conv2d: kernel {k}x{k} larger than padded input {hp}x{wp}")
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1

    xd, wd = x.data, weight.data
    if k == 1 and stride == 1 and padding == 0:
        out = np.einsum("oc,nchw->nohw", wd[:, :, 0, 0], xd, optimize=True)

        def bw(g):
            gx = np.einsum("oc,nohw->nchw", wd[:, :, 0, 0], g, optimize=True)
            gw = np.einsum("nohw,nchw->oc", g, xd, optimize=True)[:, :, None, None]
            gb = g.sum(axis=(0, 2, 3))
            return (gx, gw, gb) if bias is not None else (gx, gw)

    else:
        xp = _pad(xd, padding, pad_mode)
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
        # (N, C, Ho, Wo, k, k) -> (N, Ho, Wo, C*k*k)
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, ho, wo, c * k * k)
        wmat = wd.reshape(o, c * k * k)
        out = (cols @ wmat.T).transpose(0, 3, 1, 2)

        def bw(g):
            gt = g.transpose(0, 2, 3, 1)  # (N, Ho, Wo, O)
            gw = np.tensordot(gt, cols, axes=([0, 1, 2], [0, 1, 2])).reshape(wd.shape)
            gcols = (gt @ wmat).reshape(n, ho, wo, c, k, k)
            gxp = np.zeros((n, c, hp, wp), dtype=DTYPE)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = _unpad(gxp, padding, pad_mode)
            gb = g.sum(axis=(0, 2, 3))
            return (gx, gw, gb) if bias is not None else (gx, gw)

    if bias is not None:
        out = out + bias.data[None, :, None, None]
        parents = (x, weight, bias)
    else:
        parents = (x, weight)
    result = Tensor.from_op(np.ascontiguousarray(out), parents, bw)
    return result.reshape(result.shape[1:]) if squeeze else result


# -- normalization ----------------------------------------------------------------


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = BN_EPS,
) -> Tensor:
    """Batch normalization over (N, C) or (N, C, H, W) input.

    In training mode the running buffers are updated in place using the
    unbiased batch variance.
    """
    x = ensure_tensor(x)
    if x.ndim not in (2, 4):
        raise ShapeError(f"batch_norm: expected (N, C) or (N, C, H, W) input, got {x.shape}")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
    g_arr, b_arr = gamma.data.reshape(bshape), beta.data.reshape(bshape)
    xd = x.data

    if not training:
        inv = 1.0 / np.sqrt(running_var.reshape(bshape) + eps)
        xhat = (xd - running_mean.reshape(bshape)) * inv
        out = xhat * g_arr + b_arr

        def bw(g):
            return (
                g * g_arr * inv,
                (g * xhat).sum(axis=axes).reshape(gamma.shape),
                g.sum(axis=axes).reshape(beta.shape),
            )

        return Tensor.from_op(out, (x, gamma, beta), bw)

    if xd.shape[0] < 2:
        raise ShapeError(f"batch_norm: training mode needs batch size >= 2, got input shape {x.shape}")
    m = xd.size // xd.shape[1]
    mu = xd.mean(axis=axes, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * g_arr + b_arr

    running_mean *= 1.0 - momentum
    running_mean += momentum * mu.reshape(-1)
    running_var *= 1.0 - momentum
    running_var += momentum * var.reshape(-1) * (m / max(m - 1, 1))

    def bw(g):
        gxhat = g * g_arr
        gx = inv * (gxhat - gxhat.mean(axis=axes, keepdims=True) - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True))
        return gx, (g * xhat).sum(axis=axes).reshape(gamma.shape), g.sum(axis=axes).reshape(beta.shape)

    return Tensor.from_op(out, (x, gamma, beta), bw)


# -- resampling ---------------------------------------------------------------------


def interp_matrix(n_in: int, n_out: int, start: float = 0.0, stop: float | None = None) -> np.ndarray:
    """(n_out, n_in) linear-interpolation weights with half-pixel centers.

    ``start``/``stop`` bound the sampled interval in continuous input
    coordinates (pixel ``i`` spans [i, i+1]); samples outside the valid
    center range are clamped to the border pixel.
    """
    if stop is None:
        stop = float(n_in)
    scale = (stop - start) / n_out
    pos = start + (np.arange(n_out) + 0.5) * scale - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    mat = np.zeros((n_out, n_in), dtype=DTYPE)
    rows = np.arange(n_out)
    np.add.at(mat, (rows, lo), 1.0 - frac)
    np.add.at(mat, (rows, hi), frac)
    return mat


def separable_resample(x: Tensor, wy: np.ndarray, wx: np.ndarray) -> Tensor:
    """out[..., i, j] = sum_{h,w} wy[i,h] x[..., h, w] wx[j,w] (constant weights)."""
    x = ensure_tensor(x)
    if x.shape[-2] != wy.shape[1] or x.shape[-1] != wx.shape[1]:
        raise ShapeError(f"resample: input shape {x.shape} does not fit weights {wy.shape} / {wx.shape}")
    out = wy @ x.data @ wx.T

    def bw(g):
        return (wy.T @ g @ wx,)

    return Tensor.from_op(out, (x,), bw)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize the last two axes with half-pixel-center bilinear sampling."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"bilinear_resize: output size must be positive, got {out_h}x{out_w}")
    x = ensure_tensor(x)
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return Tensor.from_op(x.data.copy(), (x,), lambda g: (g,))
    return separable_resample(x, interp_matrix(h, out_h), interp_matrix(w, out_w))


def crop_and_resize(x: Tensor, box, out_h: int, out_w: int, scale: float = 1.0) -> Tensor:
    """Bilinearly sample ``box`` = (x0, y0, x1, y1) onto an out_h x out_w grid.

    Box coordinates are divided by ``scale`` first (feature-map stride).
    """
    x0, y0, x1, y1 = (float(v) / scale for v in box)
    h, w = ensure_tensor(x).shape[-2:]
    return separable_resample(x, interp_matrix(h, out_h, y0, y1), interp_matrix(w, out_w, x0, x1))


# -- losses -------------------------------------------------------------------


def cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy over the last axis of (N, C) logits."""
    logits = ensure_tensor(logits)
    labels = np.asarray(labels, dtype=np.intp).reshape(-1)
    n, c = logits.shape
    if labels.shape[0] != n:
        raise ShapeError(f"cross_entropy: {labels.shape[0]} labels for logits of shape {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"cross_entropy: label out of range [0, {c})")
    nll = -log_softmax(logits, axis=-1)[np.arange(n), labels]
    return nll.mean() if reduction == "mean" else nll.sum() if reduction == "sum" else nll


def nll_from_probs(probs: Tensor, labels) -> Tensor:
    """Mean -log p[label] for already-normalized probabilities (N, C)."""
    probs = ensure_tensor(probs)
    labels = np.asarray(labels, dtype=np.intp).reshape(-1)
    picked = probs[np.arange(probs.shape[0]), labels]
    return -(picked.log()).mean()


def smooth_l1(pred: Tensor, target, beta: float = 1.0) -> Tensor:
    """Elementwise smooth-L1 summed over the last axis, averaged over the rest."""
    pred = ensure_tensor(pred)
    diff = pred.data - np.asarray(target, dtype=DTYPE)
    ad = np.abs(diff)
    quad = ad < beta
    val = np.where(quad, 0.5 * diff * diff / beta, ad - 0.5 * beta)
    count = max(int(np.prod(pred.shape[:-1])), 1)

    def bw(g):
        return (g * np.where(quad, diff / beta, np.sign(diff)) / count,)

    return Tensor.from_op(np.asarray(val.sum() / count), (pred,), bw)


def roi_resample(feats: Tensor, boxes: np.ndarray, index: np.ndarray, size: int, scale: float) -> Tensor:
    """Bilinear RoI extraction: (N, C, H, W) maps + (R, 4) image-space boxes -> (R, C, size, size).

    ``index[r]`` selects the feature map of box r; boxes are divided by
    ``scale`` (the feature stride) before sampling.
    """
    feats = ensure_tensor(feats)
    boxes = np.asarray(boxes, dtype=DTYPE).reshape(-1, 4) / scale
    index = np.asarray(index, dtype=np.intp)
    _, _, h, w = feats.shape
    wy = np.stack([interp_matrix(h, size, b[1], b[3]) for b in boxes])  # (R, S, H)
    wx = np.stack([interp_matrix(w, size, b[0], b[2]) for b in boxes])  # (R, S, W)
    sel = feats.data[index]
    out = np.einsum("rsh,rchw,rtw->rcst", wy, sel, wx, optimize=True)

    def bw(g):
        gsel = np.einsum("rsh,rcst,rtw->rchw", wy, g, wx, optimize=True)
        full = np.zeros_like(feats.data)
        np.add.at(full, index, gsel)
        return (full,)

    return Tensor.from_op(out, (feats,), bw)
