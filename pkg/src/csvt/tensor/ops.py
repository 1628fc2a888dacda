"""Differentiable tensor operations.

Every op takes and returns :class:`Tensor`; plain numbers and arrays are
promoted to constant tensors. Leading batch dimensions broadcast the numpy
way unless an op says otherwise.
"""

from __future__ import annotations

import math

import numpy as np

from .core import DimensionError, Tensor, record

LN_EPS = 1e-5
BN_EPS = 1e-5
L2_EPS = 1e-12


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise ----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(
        "add", a.data + b.data, (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(
        "sub", a.data - b.data, (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(
        "mul", a.data * b.data, (a, b),
        lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        ga = g / b.data
        return unbroadcast(ga, a.shape), unbroadcast(-ga * out, b.shape)

    return record("div", out, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return record("neg", -a.data, (a,), lambda g: (-g,))


def scale(a, s: float) -> Tensor:
    """Multiply by a python scalar that is not itself differentiated."""
    a = as_tensor(a)
    s = a.data.dtype.type(s)
    return record("scale", a.data * s, (a,), lambda g: (g * s,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return record("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return record("log", out, (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return record("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return record("relu", a.data * mask, (a,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    c = x.dtype.type(_GELU_C)
    k = x.dtype.type(0.044715)
    t = np.tanh(c * (x + k * x**3))
    out = 0.5 * x * (1 + t)

    def bw(g):
        dt = (1 - t * t) * c * (1 + 3 * k * x * x)
        return (g * (0.5 * (1 + t) + 0.5 * x * dt),)

    return record("gelu", out, (a,), bw)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return record("tanh", out, (a,), lambda g: (g * (1 - out * out),))


# -- shape ----------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return record("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swapaxes(a, ax1: int = -2, ax2: int = -1) -> Tensor:
    a = as_tensor(a)
    return record(
        "transpose", np.swapaxes(a.data, ax1, ax2), (a,),
        lambda g: (np.swapaxes(g, ax1, ax2),),
    )


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return record("getitem", a.data[index], (a,), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


# -- reductions -----------------------------------------------------------


def _expand(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))
    return record("sum", out, (a,), lambda g: (_expand(g, a.shape, axis, keepdims),))


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    count = a.size // max(out.size, 1)
    return record(
        "mean", out, (a,), lambda g: (_expand(g / count, a.shape, axis, keepdims),)
    )


# -- linear algebra -------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs operands with ndim >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")

    if b.ndim == 2 and a.ndim > 2:
        # shared weight: fold batch dims into one GEMM
        k, n = b.shape
        a2 = a.data.reshape(-1, k)

        def bw(g):
            g2 = g.reshape(-1, n)
            return (g2 @ b.data.T).reshape(a.shape), a2.T @ g2

        out = (a2 @ b.data).reshape(a.shape[:-1] + (n,))
        return record("matmul", out, (a, b), bw)

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return record("matmul", a.data @ b.data, (a, b), bw)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as (in, out)."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# -- normalisation and attention kernels ----------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record("softmax", out, (a,), bw)


def softmax_rows(a) -> Tensor:
    return softmax(a, axis=-1)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return record("log_softmax", out, (a,), bw)


def layer_norm(x, gamma, beta, eps: float = LN_EPS) -> Tensor:
    """Normalise over the last axis, then apply the affine ``gamma``/``beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim < 1 or x.shape[-1] < 1:
        raise DimensionError("layer_norm needs a non-empty last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def bw(g):
        gxhat = g * gamma.data
        gx = rstd * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, unbroadcast(g * xhat, gamma.shape), unbroadcast(g, beta.shape)

    return record("layer_norm", out, (x, gamma, beta), bw)


def batch_norm(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel batch norm; channels are the last axis.

    In training mode the statistics come from every other axis and the
    running buffers are updated in place (unbiased variance, as is usual).
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    axes = tuple(range(x.ndim - 1))
    if training:
        m = x.data.size // x.shape[-1]
        mu = x.data.mean(axis=axes)
        xc = x.data - mu
        var = (xc * xc).mean(axis=axes)
        rstd = 1.0 / np.sqrt(var + eps)
        xhat = xc * rstd
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))

        def bw(g):
            gxhat = g * gamma.data
            gx = rstd * (
                gxhat - gxhat.mean(axis=axes) - xhat * (gxhat * xhat).mean(axis=axes)
            )
            return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)
    else:
        rstd = (1.0 / np.sqrt(running_var + eps)).astype(x.dtype)
        xhat = (x.data - running_mean.astype(x.dtype)) * rstd

        def bw(g):
            return g * gamma.data * rstd, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    out = xhat * gamma.data + beta.data
    return record("batch_norm", out, (x, gamma, beta), bw)


def l2_normalize(x, axis: int = -1, eps: float = L2_EPS) -> Tensor:
    """``x / max(||x||, eps)`` along ``axis``."""
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    out = x.data / denom
    live = norm > eps

    def bw(g):
        proj = (g * out).sum(axis=axis, keepdims=True)
        return (np.where(live, g - out * proj, g) / denom,)

    return record("l2_normalize", out, (x,), bw)


def l2_normalize_cols(x, eps: float = L2_EPS) -> Tensor:
    """Unit L2 norm per column of an (..., n, d) tensor (norm over the n axis)."""
    return l2_normalize(x, axis=-2, eps=eps)


def depthwise_conv3x3(x, kernels, bias=None, padding: int = 1, stride: int = 1) -> Tensor:
    """Same-padded 3x3 depthwise convolution on (..., H, W, C) input.

    ``kernels`` is (3, 3, C); channel ``c`` of the output only sees channel
    ``c`` of the input. Cross-correlation convention, as in most frameworks.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    if padding != 1 or stride != 1:
        raise ValueError("only padding=1, stride=1 is supported")
    if x.ndim < 3:
        raise DimensionError(f"depthwise_conv3x3 needs (..., H, W, C) input, got {x.shape}")
    if kernels.shape != (3, 3, x.shape[-1]):
        raise DimensionError(
            f"kernel shape {kernels.shape} does not match {x.shape[-1]} input channels"
        )
    h, w = x.shape[-3], x.shape[-2]
    pad = [(0, 0)] * (x.ndim - 3) + [(1, 1), (1, 1), (0, 0)]
    xp = np.pad(x.data, pad)
    k = kernels.data
    out = np.zeros_like(x.data)
    for i in range(3):
        for j in range(3):
            out += xp[..., i : i + h, j : j + w, :] * k[i, j]

    def bw(g):
        gp = np.zeros_like(xp)
        gk = np.empty_like(k)
        c = g.shape[-1]
        g2 = g.reshape(-1, c)
        for i in range(3):
            for j in range(3):
                gp[..., i : i + h, j : j + w, :] += g * k[i, j]
                gk[i, j] = (xp[..., i : i + h, j : j + w, :].reshape(-1, c) * g2).sum(axis=0)
        return gp[..., 1:-1, 1:-1, :], gk

    y = record("depthwise_conv3x3", out, (x, kernels), bw)
    return y if bias is None else add(y, bias)


# -- losses ---------------------------------------------------------------


def soft_cross_entropy(logits, targets) -> Tensor:
    """Mean over rows of ``-sum(targets * log_softmax(logits))``."""
    targets = as_tensor(targets)
    return neg(mean(sum(mul(targets, log_softmax(logits)), axis=-1)))


# -- operator sugar -------------------------------------------------------

Tensor.__add__ = add
Tensor.__radd__ = lambda self, other: add(other, self)
Tensor.__sub__ = sub
Tensor.__rsub__ = lambda self, other: sub(other, self)
Tensor.__mul__ = mul
Tensor.__rmul__ = lambda self, other: mul(other, self)
Tensor.__truediv__ = div
Tensor.__rtruediv__ = lambda self, other: div(other, self)
Tensor.__neg__ = neg
Tensor.__matmul__ = matmul
Tensor.__getitem__ = getitem
Tensor.reshape = lambda self, *shape: reshape(self, shape[0] if len(shape) == 1 else shape)
Tensor.sum = lambda self, axis=None, keepdims=False: sum(self, axis, keepdims)
Tensor.mean = lambda self, axis=None, keepdims=False: mean(self, axis, keepdims)
Tensor.T = property(lambda self: transpose(self))
