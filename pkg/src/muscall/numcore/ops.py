"""Differentiable kernels.

Image-like tensors use channels-last layout ``(batch, height, width, channels)``.
Each kernel returns a new :class:`Tensor` whose backward closure returns one
gradient per parent (``None`` for non-differentiable inputs).
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, make_result

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# --- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return make_result(out, (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return make_result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return make_result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def gelu(a) -> Tensor:
    """Tanh-approximated GELU."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    inner = _SQRT_2_OVER_PI * x * (1.0 + 0.044715 * x2)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return make_result(out, (a,), bw, "gelu")


# --- reductions ------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_result(np.asarray(out), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return make_result(np.asarray(out), (a,), bw, "mean")


def logsumexp(a, axis=-1, keepdims=False) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    shifted = np.exp(a.data - m)
    s = shifted.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    soft = shifted / s

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    result = out if keepdims else np.squeeze(out, axis=axis)
    return make_result(result, (a,), bw, "logsumexp")


def softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (a,), bw, "softmax")


def log_softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def bw(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (a,), bw, "log_softmax")


def l2_normalize(a, axis=-1, eps: float = 1e-12) -> Tensor:
    """Scale rows to unit norm; ``eps`` is added to the norm so zero rows map to zero."""
    a = as_tensor(a)
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True)) + eps
    out = a.data / norm

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - out * dot) / norm,)

    return make_result(out, (a,), bw, "l2_normalize")


# --- linear algebra / shape ------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    out = a.data @ b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), bw, "matmul")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, axes)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return make_result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return make_result(np.array(out), (a,), bw, "getitem")


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(i != ax and x != y for i, (x, y) in enumerate(zip(t.shape, ref))):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return make_result(out, tensors, bw, "concat")


def embedding(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"embedding: id out of range for table of {weight.shape[0]} rows")
    out = weight.data[ids]

    def bw(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (full,)

    return make_result(out, (weight,), bw, "embedding")


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: gain {gamma.shape}/bias {beta.shape} vs features {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gxhat = g * gamma.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(x.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return make_result(out, (x, gamma, beta), bw, "layer_norm")


# --- spatial kernels (channels-last) ----------------------------------------

def _conv_output(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution. ``x``: (B, H, W, Cin); ``weight``: (kh, kw, Cin, Cout).

    Computed as a sum over kernel taps of (shifted input) @ (tap weights),
    which avoids materialising the full im2col matrix.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[3] != weight.shape[2]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    b, h, w, cin = x.shape
    kh, kw, _, cout = weight.shape
    ho, wo = _conv_output(h, kh, stride, padding), _conv_output(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {x.shape} smaller than kernel {weight.shape[:2]}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x.data
    taps = [(i, j) for i in range(kh) for j in range(kw)]

    def window(i, j):
        return xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]

    out = np.zeros((b * ho * wo, cout), dtype=np.result_type(x.data, weight.data))
    for i, j in taps:
        out += np.ascontiguousarray(window(i, j)).reshape(-1, cin) @ weight.data[i, j]
    out = out.reshape(b, ho, wo, cout)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data
        parents.append(bias)

    def bw(g):
        g2 = g.reshape(-1, cout)
        gw = np.empty_like(weight.data) if weight.requires_grad else None
        gxp = np.zeros(xp.shape, dtype=g.dtype) if x.requires_grad else None
        for i, j in taps:
            if gw is not None:
                gw[i, j] = np.ascontiguousarray(window(i, j)).reshape(-1, cin).T @ g2
            if gxp is not None:
                gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += (
                    (g2 @ weight.data[i, j].T).reshape(b, ho, wo, cin))
        gx = None
        if gxp is not None:
            gx = gxp[:, padding:padding + h, padding:padding + w, :] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return make_result(out, parents, bw, "conv2d")


def avg_pool2d(x, size: int = 2) -> Tensor:
    """Non-overlapping average pooling; trailing rows/cols that don't fill a window are dropped."""
    x = as_tensor(x)
    b, h, w, c = x.shape
    ho, wo = h // size, w // size
    if ho < 1 or wo < 1:
        raise ShapeError(f"avg_pool2d: input {x.shape} smaller than window {size}")
    view = x.data[:, :ho * size, :wo * size, :].reshape(b, ho, size, wo, size, c)
    out = view.mean(axis=(2, 4))

    def bw(g):
        full = np.zeros_like(x.data)
        spread = np.repeat(np.repeat(g / (size * size), size, axis=1), size, axis=2)
        full[:, :ho * size, :wo * size, :] = spread
        return (full,)

    return make_result(out, (x,), bw, "avg_pool2d")


_BINOMIAL = np.array([1.0, 2.0, 1.0])
BLUR_KERNEL = np.outer(_BINOMIAL, _BINOMIAL) / 16.0


def blur_pool2d(x, stride: int = 2) -> Tensor:
    """Anti-aliased downsampling: depthwise 3x3 binomial blur (reflect padding) then subsample."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"blur_pool2d: expected (B, H, W, C), got {x.shape}")
    b, h, w, c = x.shape
    if h < 3 or w < 3:
        raise ShapeError(f"blur_pool2d: spatial size {h}x{w} below the 3x3 minimum")
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)), mode="reflect")
    ho, wo = _conv_output(h, 3, stride, 1), _conv_output(w, 3, stride, 1)
    out = np.zeros((b, ho, wo, c), dtype=x.data.dtype)
    for i in range(3):
        for j in range(3):
            out += BLUR_KERNEL[i, j] * xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]

    def bw(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(3):
            for j in range(3):
                gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += BLUR_KERNEL[i, j] * g
        # fold reflected border back onto its source rows/cols
        gxp[:, 2, :, :] += gxp[:, 0, :, :]
        gxp[:, h - 1, :, :] += gxp[:, h + 1, :, :]
        gxp[:, :, 2, :] += gxp[:, :, 0, :]
        gxp[:, :, w - 1, :] += gxp[:, :, w + 1, :]
        return (gxp[:, 1:h + 1, 1:w + 1, :].copy(),)

    return make_result(out, (x,), bw, "blur_pool2d")


def cross_entropy_diagonal(logits) -> Tensor:
    """Per-row cross-entropy of a square logit matrix against the diagonal target."""
    logits = as_tensor(logits)
    n = logits.shape[0]
    idx = np.arange(n)
    return sub(logsumexp(logits, axis=1), getitem(logits, (idx, idx)))

