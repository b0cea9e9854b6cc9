"""Differentiable layer primitives on NCHW arrays."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, _as_tensor, _make


class ShapeError(ValueError):
    pass


# set to a list by the gradient checker to collect ReLU masks and pooling argmaxes
_kink_trace: list | None = None


def _out_size(n: int, k: int, stride: int, padding: int) -> int:
    span = n + 2 * padding - k
    if span < 0:
        raise ShapeError(f"kernel {k} larger than padded input {n + 2 * padding}")
    return span // stride + 1


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]


def _scatter_windows(dxp: np.ndarray, dwin: np.ndarray, stride: int):
    """Adds per-window gradients (N, C, OH, OW, KH, KW) back onto the padded input."""
    _, _, oh, ow, kh, kw = dwin.shape
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + (oh - 1) * stride + 1 : stride, j : j + (ow - 1) * stride + 1 : stride] += dwin[..., i, j]


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Direct cross-correlation, lowered to a matrix product over unfolded patches."""
    x = _as_tensor(x)
    weight = _as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    k, wc, kh, kw = weight.shape
    if wc != c:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {wc}")
    oh = _out_size(h, kh, stride, padding)
    ow = _out_size(w, kw, stride, padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _windows(xp, kh, kw, stride, oh, ow).transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    wmat = weight.data.reshape(k, -1)
    out = cols @ wmat.T
    if bias is not None:
        bias = _as_tensor(bias)
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, oh, ow, k).transpose(0, 3, 1, 2))
    need_x = x.requires_grad

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, k)
        dw = (g2.T @ cols).reshape(weight.shape)
        db = g2.sum(axis=0) if bias is not None else None
        dx = None
        if need_x:
            dwin = (g2 @ wmat).reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            _scatter_windows(dxp, dwin, stride)
            dx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
        return (dx, dw, db) if bias is not None else (dx, dw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _make(out, parents, backward)


def batch_norm2d(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization; in training mode the running buffers are updated in place."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm2d: input {x.shape} vs gamma {gamma.shape}, beta {beta.shape}")
    axes = (0, 2, 3)
    m = x.data.size // x.shape[1]
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        unbiased = var * m / max(m - 1, 1)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mu, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    shape = (1, -1, 1, 1)
    xhat = (x.data - mu.reshape(shape).astype(x.dtype)) * inv_std.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(shape)
        if training:
            dx = (
                dxhat
                - dxhat.mean(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True)
            ) * inv_std.reshape(shape)
        else:
            dx = dxhat * inv_std.reshape(shape)
        return dx, dgamma, dbeta

    return _make(out, (x, gamma, beta), backward)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    if _kink_trace is not None:
        _kink_trace.append(mask)
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


def max_pool2d(x, kernel: int = 3, stride: int = 2, padding: int = 1) -> Tensor:
    """Max pooling; ties go to the first maximum in row-major window order."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    oh = _out_size(h, kernel, stride, padding)
    ow = _out_size(w, kernel, stride, padding)
    pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    xp = np.pad(x.data, pad, constant_values=-np.inf) if padding else x.data
    win = _windows(xp, kernel, kernel, stride, oh, ow).reshape(n, c, oh, ow, kernel * kernel)
    arg = win.argmax(axis=-1)
    if _kink_trace is not None:
        _kink_trace.append(arg)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        dxp = np.zeros(xp.shape, dtype=g.dtype)
        for idx in range(kernel * kernel):
            i, j = divmod(idx, kernel)
            sl = (slice(None), slice(None),
                  slice(i, i + (oh - 1) * stride + 1, stride), slice(j, j + (ow - 1) * stride + 1, stride))
            dxp[sl] += np.where(arg == idx, g, 0)
        return (dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp,)

    return _make(np.ascontiguousarray(out), (x,), backward)


def adaptive_avg_pool(x) -> Tensor:
    """Global average pool to (N, C, 1, 1)."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"adaptive_avg_pool expects NCHW input, got {x.shape}")
    shape = x.shape
    hw = shape[2] * shape[3]
    out = x.data.mean(axis=(2, 3), keepdims=True)
    return _make(out, (x,), lambda g: (np.broadcast_to(g / hw, shape).copy(),))


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` with weight shaped (out, in)."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        bias = _as_tensor(bias)
        out = out + bias.data

    def backward(g):
        dx = g @ weight.data
        dw = g.T @ x.data
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward)


def dropout(x, p: float, training: bool, rng: np.random.Generator | None = None, mask=None) -> Tensor:
    """Inverted dropout.  ``mask`` (boolean keep-mask) overrides sampling from ``rng``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    x = _as_tensor(x)
    if not training or p == 0.0:
        return x
    if mask is None:
        if rng is None:
            raise ValueError("training-mode dropout needs an rng or an explicit mask")
        mask = rng.random(x.shape) >= p
    scale = (np.asarray(mask, dtype=x.dtype) / (1.0 - p)).astype(x.dtype)
    return _make(x.data * scale, (x,), lambda g: (g * scale,))


def mse_loss(pred, target) -> Tensor:
    """Mean squared error over every element."""
    pred = _as_tensor(pred)
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    if pred.shape != t.shape:
        raise ShapeError(f"mse_loss: prediction {pred.shape} vs target {t.shape}")
    diff = pred.data - t
    n = diff.size
    return _make(np.asarray((diff * diff).mean()), (pred,), lambda g: (g * 2.0 * diff / n,))
