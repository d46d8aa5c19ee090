"""Differentiable operations on Tensors.

Every op returns a new Tensor wired into the graph with a closure computing
parent gradients from the output gradient. Cost accounting follows one fixed
convention, shared with the analytic model in analysis.py:

  * matmul-like ops cost 2 per multiply-accumulate, plus 1 per output for bias
  * elementwise ops cost 1 per output element
  * pooling costs 1 per input position (an index over all axes but channels)
  * layer norm costs 7 per element
  * reshape/transpose/slice/concat/broadcast are free
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .tensor import (ConfigError, NumericFault, ShapeError, Tensor, UsageError,
                     as_tensor, make_op, unbroadcast)

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return make_op(out, (a, b), backward, "add", cost=out.size)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return make_op(out, (a, b), backward, "sub", cost=out.size)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")
    ad, bd = a.data, b.data

    def backward(g):
        ga = unbroadcast(g * bd, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * ad, b.shape) if b.requires_grad else None
        return ga, gb

    return make_op(out, (a, b), backward, "mul", cost=out.size)


def scale(x, s: float) -> Tensor:
    x = as_tensor(x)
    out = x.data * s

    def backward(g):
        return (g * s,)

    return make_op(out, (x,), backward, "scale", cost=out.size)


# ---------------------------------------------------------------------------
# projections

def linear(x, weight, bias=None) -> Tensor:
    """x[..., C_in] @ weight[C_in, C_out] (+ bias[C_out])."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2:
        raise ShapeError(f"linear: weight must be 2-d, got {weight.shape}")
    c_in, c_out = weight.shape
    if x.shape[-1] != c_in:
        raise ShapeError(f"linear: input channels {x.shape[-1]} != weight rows {c_in}")
    rows = x.size // c_in if c_in else 0
    x2 = x.data.reshape(rows, c_in)
    out2 = x2 @ weight.data
    cost = 2 * rows * c_in * c_out
    parents = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise ShapeError(f"linear: bias shape {bias.shape} != ({c_out},)")
        out2 = out2 + bias.data
        cost += rows * c_out
        parents = (x, weight, bias)
    out = out2.reshape(x.shape[:-1] + (c_out,))
    wd = weight.data

    def backward(g):
        g2 = g.reshape(rows, c_out)
        gx = (g2 @ wd.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if len(parents) == 3:
            gb = g2.sum(axis=0) if parents[2].requires_grad else None
            return gx, gw, gb
        return gx, gw

    return make_op(out, parents, backward, "linear", cost=cost)


def pointwise_conv(x, weight) -> Tensor:
    """1x1 convolution over the channel axis: a bias-free linear per token."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2:
        raise ShapeError(f"pointwise_conv: weight must be 2-d, got {weight.shape}")
    c_in, c_out = weight.shape
    if x.shape[-1] != c_in:
        raise ShapeError(
            f"pointwise_conv: input channels {x.shape[-1]} != weight rows {c_in}")
    rows = x.size // c_in if c_in else 0
    x2 = x.data.reshape(rows, c_in)
    out = (x2 @ weight.data).reshape(x.shape[:-1] + (c_out,))
    wd = weight.data

    def backward(g):
        g2 = g.reshape(rows, c_out)
        gx = (g2 @ wd.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        return gx, gw

    return make_op(out, (x, weight), backward, "pointwise_conv",
                   cost=2 * rows * c_in * c_out)


# ---------------------------------------------------------------------------
# depthwise convolutions (same zero padding, stride 1, odd kernels)

def _check_kernel(k: int, what: str) -> None:
    if k < 1 or k % 2 == 0:
        raise ConfigError(f"{what}: kernel size must be odd and positive, got {k}")


def depthwise_conv2d(x, kernel) -> Tensor:
    """Per-channel 2-d convolution. x: (N, H, W, C), kernel: (k, k, C)."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4:
        raise ShapeError(f"depthwise_conv2d: input must be (N,H,W,C), got {x.shape}")
    if kernel.ndim != 3 or kernel.shape[0] != kernel.shape[1]:
        raise ShapeError(f"depthwise_conv2d: kernel must be (k,k,C), got {kernel.shape}")
    k = kernel.shape[0]
    _check_kernel(k, "depthwise_conv2d")
    n, h, w, c = x.shape
    if kernel.shape[2] != c:
        raise ShapeError(
            f"depthwise_conv2d: kernel channels {kernel.shape[2]} != input channels {c}")
    pad = k // 2
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    kd = kernel.data
    out = np.zeros_like(x.data)
    for i in range(k):
        for j in range(k):
            out += xp[:, i:i + h, j:j + w, :] * kd[i, j]

    def backward(g):
        gx = None
        if x.requires_grad:
            gp = np.pad(g, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
            gx = np.zeros_like(x.data)
            for i in range(k):
                for j in range(k):
                    gx += gp[:, i:i + h, j:j + w, :] * kd[k - 1 - i, k - 1 - j]
        gk = None
        if kernel.requires_grad:
            gk = np.empty_like(kd)
            for i in range(k):
                for j in range(k):
                    gk[i, j] = np.einsum(
                        "nhwc,nhwc->c", xp[:, i:i + h, j:j + w, :], g)
        return gx, gk

    return make_op(out, (x, kernel), backward, "depthwise_conv2d",
                   cost=2 * n * h * w * c * k * k)


def depthwise_conv1d(x, kernel) -> Tensor:
    """Per-channel 1-d convolution along axis 1. x: (N, T, C), kernel: (k, C)."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 3:
        raise ShapeError(f"depthwise_conv1d: input must be (N,T,C), got {x.shape}")
    if kernel.ndim != 2:
        raise ShapeError(f"depthwise_conv1d: kernel must be (k,C), got {kernel.shape}")
    k = kernel.shape[0]
    _check_kernel(k, "depthwise_conv1d")
    n, t, c = x.shape
    if kernel.shape[1] != c:
        raise ShapeError(
            f"depthwise_conv1d: kernel channels {kernel.shape[1]} != input channels {c}")
    pad = k // 2
    xp = np.pad(x.data, ((0, 0), (pad, pad), (0, 0)))
    kd = kernel.data
    out = np.zeros_like(x.data)
    for i in range(k):
        out += xp[:, i:i + t, :] * kd[i]

    def backward(g):
        gx = None
        if x.requires_grad:
            gp = np.pad(g, ((0, 0), (pad, pad), (0, 0)))
            gx = np.zeros_like(x.data)
            for i in range(k):
                gx += gp[:, i:i + t, :] * kd[k - 1 - i]
        gk = None
        if kernel.requires_grad:
            gk = np.empty_like(kd)
            for i in range(k):
                gk[i] = np.einsum("ntc,ntc->c", xp[:, i:i + t, :], g)
        return gx, gk

    return make_op(out, (x, kernel), backward, "depthwise_conv1d",
                   cost=2 * n * t * c * k)


# ---------------------------------------------------------------------------
# nonlinearity, pooling, normalization

def gelu(x) -> Tensor:
    """Exact Gaussian error linear unit: x * Phi(x)."""
    x = as_tensor(x)
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = xd * cdf

    def backward(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT2PI
        return (g * (cdf + xd * pdf),)

    return make_op(out, (x,), backward, "gelu", cost=out.size)


def global_avg_pool(x, axes, keepdims: bool = False) -> Tensor:
    """Mean over ``axes``, summing elements in sorted order.

    Sorting before the reduction makes the result a function of the value
    multiset alone, so any permutation of the pooled positions (a reversed
    clip, a translated pattern) reproduces the output bit for bit. The
    gradient is the ordinary 1/n fan-out, unaffected by summation order.
    """
    x = as_tensor(x)
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(sorted(a % x.ndim for a in axes))
    if len(set(axes)) != len(axes) or not axes:
        raise UsageError(f"global_avg_pool: bad axes {axes} for shape {x.shape}")
    keep = [i for i in range(x.ndim) if i not in axes]
    m = 1
    for a in axes:
        m *= x.shape[a]
    moved = np.transpose(x.data, keep + list(axes))
    flat = moved.reshape(tuple(x.shape[i] for i in keep) + (m,))
    summed = np.sort(flat, axis=-1).sum(axis=-1)
    pooled = summed / m
    if keepdims:
        shape = tuple(1 if i in axes else x.shape[i] for i in range(x.ndim))
        out = pooled.reshape(shape)
    else:
        out = pooled
    grad_shape = tuple(1 if i in axes else x.shape[i] for i in range(x.ndim))

    def backward(g):
        gk = g.reshape(grad_shape)
        return (np.broadcast_to(gk, x.shape) / m,)

    positions = x.size // x.shape[-1]
    return make_op(out, (x,), backward, "global_avg_pool", cost=positions)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"layer_norm: gamma/beta must be ({c},), got {gamma.shape}/{beta.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    gd = gamma.data

    def backward(g):
        dxhat = g * gd
        gx = None
        if x.requires_grad:
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            gx = inv * (dxhat - m1 - xhat * m2)
        axes = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return make_op(out, (x, gamma, beta), backward, "layer_norm", cost=7 * x.size)


# ---------------------------------------------------------------------------
# loss

def smooth_labels(labels: np.ndarray, num_classes: int, epsilon: float) -> np.ndarray:
    """One-hot rows with (1 - eps) on the label and eps/(K-1) elsewhere.

    The on-value is nudged by one float step if needed so every row sums to
    exactly 1.0 in float64.
    """
    if num_classes < 2:
        raise ConfigError(f"smooth_labels: need at least 2 classes, got {num_classes}")
    if not 0.0 <= epsilon < 1.0:
        raise ConfigError(f"smooth_labels: epsilon must be in [0, 1), got {epsilon}")
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ShapeError(f"smooth_labels: labels must be 1-d, got {labels.shape}")
    off = epsilon / (num_classes - 1)
    on = 1.0 - epsilon
    # one representative row decides the compensation for all of them
    probe = np.full(num_classes, off, dtype=np.float64)
    probe[0] = on
    for _ in range(4):
        gap = 1.0 - probe.sum()
        if gap == 0.0:
            break
        probe[0] += gap
    on = probe[0]
    out = np.full((labels.shape[0], num_classes), off, dtype=np.float64)
    out[np.arange(labels.shape[0]), labels] = on
    return out


def softmax_cross_entropy(logits, targets, label_smoothing: float = 0.0) -> Tensor:
    """Mean cross entropy between softmax(logits) and targets.

    ``targets`` is either an integer class vector (label smoothing applies)
    or an explicit (B, K) distribution, e.g. from mixup, in which case
    ``label_smoothing`` must be zero.
    """
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be (B,K), got {logits.shape}")
    b, k = logits.shape
    targets = targets.data if isinstance(targets, Tensor) else np.asarray(targets)
    if targets.ndim == 1:
        if targets.shape[0] != b:
            raise ShapeError(f"softmax_cross_entropy: {targets.shape[0]} labels for {b} rows")
        if targets.dtype.kind not in "iu":
            raise UsageError("softmax_cross_entropy: 1-d targets must be integer classes")
        if targets.size and (targets.min() < 0 or targets.max() >= k):
            raise ConfigError("softmax_cross_entropy: label out of range")
        t = smooth_labels(targets, k, label_smoothing)
    elif targets.shape == (b, k):
        if label_smoothing != 0.0:
            raise UsageError(
                "softmax_cross_entropy: distribution targets already encode smoothing")
        t = targets
    else:
        raise ShapeError(
            f"softmax_cross_entropy: targets shape {targets.shape} incompatible with {logits.shape}")
    z = logits.data
    t = t.astype(z.dtype, copy=False)
    zmax = z.max(axis=-1, keepdims=True)
    ez = np.exp(z - zmax)
    sez = ez.sum(axis=-1, keepdims=True)
    logp = (z - zmax) - np.log(sez)
    loss = -(t * logp).sum(axis=-1).mean()
    if not np.isfinite(loss):
        raise NumericFault("softmax_cross_entropy: non-finite loss")

    def backward(g):
        p = ez / sez
        return ((p - t) * (g / b),)

    return make_op(np.asarray(loss), (logits,), backward,
                   "softmax_cross_entropy", cost=5 * z.size)


# ---------------------------------------------------------------------------
# shape plumbing (all free under the cost convention)

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)
    orig = x.shape

    def backward(g):
        return (g.reshape(orig),)

    return make_op(out, (x,), backward, "reshape")


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    out = np.transpose(x.data, axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return make_op(out, (x,), backward, "transpose")


def narrow(x, axis: int, start: int, length: int) -> Tensor:
    """Slice ``length`` entries from ``start`` along ``axis``."""
    x = as_tensor(x)
    axis = axis % x.ndim
    if start < 0 or start + length > x.shape[axis]:
        raise ShapeError(
            f"narrow: [{start}:{start + length}) out of range for axis {axis} of {x.shape}")
    index = tuple(slice(None) if i != axis else slice(start, start + length)
                  for i in range(x.ndim))
    out = x.data[index]

    def backward(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return make_op(out, (x,), backward, "narrow")


def concat(parts, axis: int) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise UsageError("concat: empty input list")
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[p.shape for p in parts]} do not align")
    axis = axis % parts[0].ndim
    sizes = [p.shape[axis] for p in parts]

    def backward(g):
        grads = []
        start = 0
        for p, s in zip(parts, sizes):
            index = tuple(slice(None) if i != axis else slice(start, start + s)
                          for i in range(g.ndim))
            grads.append(g[index] if p.requires_grad else None)
            start += s
        return tuple(grads)

    return make_op(out, tuple(parts), backward, "concat")


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: {x.shape} does not broadcast to {shape}")

    def backward(g):
        return (unbroadcast(g, x.shape),)

    return make_op(out, (x,), backward, "broadcast_to")


def tensor_sum(x) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    x = as_tensor(x)
    out = np.asarray(x.data.sum())

    def backward(g):
        return (np.broadcast_to(g, x.shape),)

    return make_op(out, (x,), backward, "sum", cost=x.size)
