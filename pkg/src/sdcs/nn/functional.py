"""Forward/backward kernels for the fixed layer set.

All functions take and return NCHW numpy arrays, operate in the input dtype
(float32 on the training path, float64 under the gradient-check oracle), and
are deterministic for fixed inputs. Backward functions are pure: they take
the forward inputs (or cached indices) plus the upstream gradient and return
new gradient arrays.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import (
    CONV1X1,
    CONV3X3,
    LayerParams,
    NonFiniteError,
    ShapeMismatchError,
    check_finite,
)


def _require_nchw(x: np.ndarray, where: str) -> None:
    if x.ndim != 4:
        raise ShapeMismatchError(f"{where}: expected 4-d NCHW input, got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv_forward(x: np.ndarray, params: LayerParams) -> np.ndarray:
    """Stride-1 convolution with same padding (3x3) or pointwise (1x1)."""
    _require_nchw(x, params.kind)
    w = params.weight.data
    if x.shape[1] != w.shape[1]:
        raise ShapeMismatchError(
            f"{params.kind}: input has {x.shape[1]} channels but kernel expects {w.shape[1]}"
        )
    if params.kind == CONV1X1:
        # (N,C,H,W) x (O,C) -> (N,H,W,O)
        y = np.tensordot(x, w[:, :, 0, 0], axes=([1], [1]))
        y = np.ascontiguousarray(y.transpose(0, 3, 1, 2))
    elif params.kind == CONV3X3:
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # (N,C,H,W,3,3)
        y = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # (N,H,W,O)
        y = np.ascontiguousarray(y.transpose(0, 3, 1, 2))
    else:
        raise ValueError(f"conv_forward called with non-conv kind {params.kind!r}")
    if params.bias is not None:
        y += params.bias.data[None, :, None, None]
    return check_finite(y, params.kind)


def conv_backward(
    x: np.ndarray, params: LayerParams, upstream: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients w.r.t. input, weight, and bias for :func:`conv_forward`."""
    w = params.weight.data
    n, c_in, h, wd = x.shape
    if upstream.shape != (n, w.shape[0], h, wd):
        raise ShapeMismatchError(
            f"{params.kind}: upstream grad shape {upstream.shape} != "
            f"forward output shape {(n, w.shape[0], h, wd)}"
        )
    if params.kind == CONV1X1:
        gw2 = np.tensordot(upstream, x, axes=([0, 2, 3], [0, 2, 3]))  # (O, C)
        gw = gw2[:, :, None, None]
        gx = np.tensordot(upstream, w[:, :, 0, 0], axes=([1], [0]))  # (N,H,W,C)
        gx = np.ascontiguousarray(gx.transpose(0, 3, 1, 2))
    else:
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        win = sliding_window_view(xp, (3, 3), axis=(2, 3))
        gw = np.tensordot(upstream, win, axes=([0, 2, 3], [0, 2, 3]))  # (O,C,3,3)
        # input grad = same-padded convolution of upstream with the
        # spatially flipped, in/out-swapped kernel
        w_flip = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        gp = np.pad(upstream, ((0, 0), (0, 0), (1, 1), (1, 1)))
        gwin = sliding_window_view(gp, (3, 3), axis=(2, 3))
        gx = np.tensordot(gwin, w_flip, axes=([1, 4, 5], [1, 2, 3]))
        gx = np.ascontiguousarray(gx.transpose(0, 3, 1, 2))
    gb = upstream.sum(axis=(0, 2, 3))
    return gx, np.ascontiguousarray(gw), gb


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def maxpool2x2(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2/stride-2 max pooling; returns output and flat argmax indices.

    The indices address the flattened input and route gradients exactly in
    the backward pass. Ties pick the first element of the window in row-major
    order, which keeps the op deterministic.
    """
    _require_nchw(x, "maxpool2x2")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeMismatchError(
            f"maxpool2x2: spatial dims ({h}, {w}) must be even; caller must pad first"
        )
    ho, wo = h // 2, w // 2
    win = x.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    flat_arg = win.argmax(axis=-1)  # 0..3 within window
    out = np.take_along_axis(win, flat_arg[..., None], axis=-1)[..., 0]
    # convert the in-window index to a flat index into x
    dy = flat_arg // 2
    dx = flat_arg % 2
    rows = (np.arange(ho)[None, None, :, None] * 2 + dy) * w
    cols = np.arange(wo)[None, None, None, :] * 2 + dx
    base = (np.arange(n)[:, None, None, None] * c + np.arange(c)[None, :, None, None]) * (h * w)
    indices = base + rows + cols
    return np.ascontiguousarray(out), indices


def maxpool2x2_backward(
    indices: np.ndarray, input_shape: tuple, upstream: np.ndarray
) -> np.ndarray:
    """Route the upstream gradient to the argmax positions only."""
    if upstream.shape != indices.shape:
        raise ShapeMismatchError(
            f"maxpool2x2 backward: upstream shape {upstream.shape} != pooled shape {indices.shape}"
        )
    gx = np.zeros(int(np.prod(input_shape)), dtype=upstream.dtype)
    np.add.at(gx, indices.ravel(), upstream.ravel())
    return gx.reshape(input_shape)


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """Spatial mean per channel; output shape (N, C, 1, 1)."""
    _require_nchw(x, "global_avg_pool")
    return x.mean(axis=(2, 3), keepdims=True)


def global_avg_pool_backward(input_shape: tuple, upstream: np.ndarray) -> np.ndarray:
    n, c, h, w = input_shape
    if upstream.shape != (n, c, 1, 1):
        raise ShapeMismatchError(
            f"global_avg_pool backward: upstream shape {upstream.shape} != {(n, c, 1, 1)}"
        )
    scale = upstream.dtype.type(1.0 / (h * w))
    return np.broadcast_to(upstream * scale, input_shape).copy()


# ---------------------------------------------------------------------------
# activation / normalization
# ---------------------------------------------------------------------------

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    if upstream.shape != x.shape:
        raise ShapeMismatchError(
            f"relu backward: upstream shape {upstream.shape} != input shape {x.shape}"
        )
    return np.where(x > 0, upstream, upstream.dtype.type(0.0))


def softmax(x: np.ndarray, axis: int = 1) -> np.ndarray:
    """Numerically stable softmax; outputs are positive and sum to 1."""
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(probs: np.ndarray, upstream: np.ndarray, axis: int = 1) -> np.ndarray:
    dot = (probs * upstream).sum(axis=axis, keepdims=True)
    return probs * (upstream - dot)


# ---------------------------------------------------------------------------
# resampling / concatenation
# ---------------------------------------------------------------------------

def _interp_grid(n_in: int, n_out: int, dtype) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Align-corners source indices and fractional weights for one axis."""
    if n_out == 1 or n_in == 1:
        pos = np.zeros(n_out, dtype=dtype)
    else:
        pos = np.arange(n_out, dtype=dtype) * (dtype(n_in - 1) / dtype(n_out - 1))
    i0 = np.floor(pos).astype(np.intp)
    i0 = np.minimum(i0, n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = (pos - i0).astype(dtype)
    return i0, i1, frac


def upsample_bilinear(x: np.ndarray, target_hw: tuple[int, int]) -> np.ndarray:
    """Align-corners bilinear resampling to ``target_hw``.

    Constants are preserved to float rounding and an identity target returns
    a bitwise-equal copy.
    """
    _require_nchw(x, "upsample_bilinear")
    h_in, w_in = x.shape[2], x.shape[3]
    h_out, w_out = target_hw
    if h_out < h_in or w_out < w_in:
        raise ShapeMismatchError(
            f"upsample_bilinear: target {target_hw} smaller than source ({h_in}, {w_in})"
        )
    if (h_out, w_out) == (h_in, w_in):
        return x.copy()
    dt = x.dtype.type
    y0, y1, fy = _interp_grid(h_in, h_out, dt)
    x0, x1, fx = _interp_grid(w_in, w_out, dt)
    wy = fy[:, None]
    wx = fx[None, :]
    top = x[:, :, y0, :]
    bot = x[:, :, y1, :]
    out = (
        (1 - wy) * ((1 - wx) * top[:, :, :, x0] + wx * top[:, :, :, x1])
        + wy * ((1 - wx) * bot[:, :, :, x0] + wx * bot[:, :, :, x1])
    )
    return np.ascontiguousarray(out)


def upsample_bilinear_backward(
    input_hw: tuple[int, int], upstream: np.ndarray
) -> np.ndarray:
    """Adjoint of :func:`upsample_bilinear`: scatter through the same weights."""
    _require_nchw(upstream, "upsample_bilinear backward")
    n, c, h_out, w_out = upstream.shape
    h_in, w_in = input_hw
    if (h_out, w_out) == (h_in, w_in):
        return upstream.copy()
    dt = upstream.dtype.type
    y0, y1, fy = _interp_grid(h_in, h_out, dt)
    x0, x1, fx = _interp_grid(w_in, w_out, dt)
    gx = np.zeros((n, c, h_in, w_in), dtype=upstream.dtype)
    wy = fy[:, None]
    wx = fx[None, :]
    for rows, wr in ((y0, 1 - wy), (y1, wy)):
        for cols, wc in ((x0, 1 - wx), (x1, wx)):
            contrib = upstream * (wr * wc)
            np.add.at(gx, (slice(None), slice(None), rows[:, None], cols[None, :]), contrib)
    return gx


def channel_concat(parts: list[np.ndarray]) -> np.ndarray:
    if not parts:
        raise ValueError("channel_concat: empty input list")
    hw = parts[0].shape[2:]
    for i, p in enumerate(parts):
        _require_nchw(p, "channel_concat")
        if p.shape[2:] != hw:
            raise ShapeMismatchError(
                f"channel_concat: part {i} spatial dims {p.shape[2:]} != {hw}"
            )
    return np.concatenate(parts, axis=1)


def channel_concat_backward(
    channel_counts: list[int], upstream: np.ndarray
) -> list[np.ndarray]:
    splits = np.cumsum(channel_counts)[:-1]
    return [np.ascontiguousarray(p) for p in np.split(upstream, splits, axis=1)]


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def cross_entropy(
    logits: np.ndarray,
    labels: np.ndarray,
    class_weights: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Weighted mean cross-entropy over rows of (n_samples, n_classes) logits.

    Returns the scalar loss and the gradient w.r.t. the logits. Raises
    :class:`NonFiniteError` when the loss diverges.
    """
    if logits.ndim != 2:
        raise ShapeMismatchError(f"cross_entropy: logits must be 2-d, got {logits.shape}")
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeMismatchError(
            f"cross_entropy: labels shape {labels.shape} != ({n},)"
        )
    probs = softmax(logits, axis=1)
    if class_weights is None:
        w = np.ones(n, dtype=logits.dtype)
    else:
        w = class_weights[labels].astype(logits.dtype)
    w_sum = w.sum()
    picked = np.clip(probs[np.arange(n), labels], 1e-12, None)
    loss = float(-(w * np.log(picked)).sum() / w_sum)
    if not np.isfinite(loss):
        raise NonFiniteError("cross_entropy: non-finite loss")
    grad = probs.astype(logits.dtype)
    grad[np.arange(n), labels] -= 1
    grad *= (w / w_sum)[:, None]
    return loss, grad
