"""Differentiable operators. Image tensors are NHWC: (batch, height, width, channels)."""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import Tensor, as_tensor, make_result


class DimensionError(ValueError):
    pass


def _check_nhwc(x: Tensor, op: str) -> None:
    if x.data.ndim != 4:
        raise DimensionError(f"{op}: expected NHWC input, got shape {x.shape}")


def _windows(x: np.ndarray, kernel: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    n, _, _, c = x.shape
    sn, sh, sw, sc = x.strides
    return as_strided(
        x,
        shape=(n, out_h, out_w, kernel, kernel, c),
        strides=(sn, sh * stride, sw * stride, sh, sw, sc),
        writeable=False,
    )


def conv2d(x, weight, bias=None, stride: int = 1) -> Tensor:
    """Valid cross-correlation. ``weight`` is (k, k, C, F); ``bias`` is (F,)."""
    x, weight = as_tensor(x), as_tensor(weight)
    _check_nhwc(x, "conv2d")
    n, h, w, c = x.shape
    k, k2, wc, f = weight.shape
    if k != k2:
        raise DimensionError(f"conv2d: kernel must be square, got {k}x{k2}")
    if wc != c:
        raise DimensionError(f"conv2d: input has {c} channels but filters expect {wc}")
    if k > h:
        raise DimensionError(f"conv2d: kernel {k} exceeds input height {h}")
    if k > w:
        raise DimensionError(f"conv2d: kernel {k} exceeds input width {w}")
    if stride < 1:
        raise DimensionError(f"conv2d: stride must be >= 1, got {stride}")
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1

    xd = np.ascontiguousarray(x.data)
    cols = _windows(xd, k, stride, oh, ow).reshape(n * oh * ow, k * k * c)
    w2 = weight.data.reshape(k * k * c, f)
    out = cols @ w2
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data
    out = out.reshape(n, oh, ow, f)

    def backward(g):
        g2 = g.reshape(n * oh * ow, f)
        dx = dw = db = None
        if x.requires_grad:
            # one small matmul per kernel tap beats scattering a full column buffer
            dx = np.zeros_like(xd)
            hi, wi = stride * (oh - 1) + 1, stride * (ow - 1) + 1
            for i in range(k):
                for j in range(k):
                    tap = (g2 @ weight.data[i, j].T).reshape(n, oh, ow, c)
                    dx[:, i:i + hi:stride, j:j + wi:stride, :] += tap
        if weight.requires_grad:
            dw = (cols.T @ g2).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            db = g2.sum(axis=0)
        return dx, dw, db

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward)


def pool_output_size(size: int, kernel: int, stride: int) -> int:
    """Ceil-mode pooling extent; the last window must start inside the input."""
    out = int(math.ceil((size - kernel) / stride)) + 1
    if (out - 1) * stride >= size:
        out -= 1
    return out


def _pool_setup(x: Tensor, kernel: int, stride: int, op: str):
    _check_nhwc(x, op)
    _, h, w, _ = x.shape
    if kernel < 1 or stride < 1:
        raise DimensionError(f"{op}: kernel and stride must be >= 1, got {kernel}, {stride}")
    if kernel > h:
        raise DimensionError(f"{op}: kernel {kernel} exceeds input height {h}")
    if kernel > w:
        raise DimensionError(f"{op}: kernel {kernel} exceeds input width {w}")
    oh = pool_output_size(h, kernel, stride)
    ow = pool_output_size(w, kernel, stride)
    ph = (oh - 1) * stride + kernel
    pw = (ow - 1) * stride + kernel
    return oh, ow, ph, pw


def max_pool(x, kernel: int, stride: int) -> Tensor:
    """Windowed max; border windows shrink to their in-range cells."""
    x = as_tensor(x)
    oh, ow, ph, pw = _pool_setup(x, kernel, stride, "max_pool")
    n, h, w, c = x.shape
    xp = np.full((n, ph, pw, c), -np.inf, dtype=x.dtype)
    xp[:, :h, :w, :] = x.data
    hi, wi = stride * (oh - 1) + 1, stride * (ow - 1) + 1
    out = None
    for i in range(kernel):
        for j in range(kernel):
            sl = xp[:, i:i + hi:stride, j:j + wi:stride, :]
            out = sl.copy() if out is None else np.maximum(out, sl)

    def backward(g):
        dxp = np.zeros_like(xp)
        taken = np.zeros(out.shape, dtype=bool)
        for i in range(kernel):
            for j in range(kernel):
                hit = (xp[:, i:i + hi:stride, j:j + wi:stride, :] == out) & ~taken
                dxp[:, i:i + hi:stride, j:j + wi:stride, :] += np.where(hit, g, 0)
                taken |= hit
        return (dxp[:, :h, :w, :],)

    return make_result(out, (x,), backward)


def avg_pool(x, kernel: int, stride: int) -> Tensor:
    """Windowed mean over in-range cells only."""
    x = as_tensor(x)
    oh, ow, ph, pw = _pool_setup(x, kernel, stride, "avg_pool")
    n, h, w, c = x.shape
    xp = np.zeros((n, ph, pw, c), dtype=x.dtype)
    xp[:, :h, :w, :] = x.data
    valid = np.zeros((ph, pw), dtype=x.dtype)
    valid[:h, :w] = 1
    hi, wi = stride * (oh - 1) + 1, stride * (ow - 1) + 1
    total = np.zeros((n, oh, ow, c), dtype=x.dtype)
    count = np.zeros((oh, ow), dtype=x.dtype)
    for i in range(kernel):
        for j in range(kernel):
            total += xp[:, i:i + hi:stride, j:j + wi:stride, :]
            count += valid[i:i + hi:stride, j:j + wi:stride]
    scale = (1.0 / count)[None, :, :, None].astype(x.dtype)
    out = total * scale

    def backward(g):
        gs = g * scale
        dxp = np.zeros_like(xp)
        for i in range(kernel):
            for j in range(kernel):
                dxp[:, i:i + hi:stride, j:j + wi:stride, :] += gs
        return (dxp[:, :h, :w, :],)

    return make_result(out, (x,), backward)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype)
    return make_result(out, (x,), lambda g: (g * mask,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # exp overflows to inf for very negative z, which yields exactly 0.
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-z))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = _sigmoid(x.data).astype(x.dtype)
    return make_result(out, (x,), lambda g: (g * out * (1 - out),))


def add_bias(x, bias) -> Tensor:
    """Add a per-channel bias along the last axis."""
    x, bias = as_tensor(x), as_tensor(bias)
    if bias.shape != (x.shape[-1],):
        raise DimensionError(f"add_bias: bias shape {bias.shape} does not match {x.shape[-1]} channels")
    out = x.data + bias.data

    def backward(g):
        return g, g.reshape(-1, g.shape[-1]).sum(axis=0)

    return make_result(out, (x, bias), backward)


def subtract_levels(x, levels) -> Tensor:
    """(N, H, W, F) minus (L,) broadcast to (N, H, W, L*F); channel index is l*F + f."""
    x, levels = as_tensor(x), as_tensor(levels)
    _check_nhwc(x, "subtract_levels")
    n, h, w, f = x.shape
    nl = levels.shape[0]
    out = (x.data[:, :, :, None, :] - levels.data[:, None]).reshape(n, h, w, nl * f)

    def backward(g):
        g5 = g.reshape(n, h, w, nl, f)
        dx = g5.sum(axis=3) if x.requires_grad else None
        dl = -g5.sum(axis=(0, 1, 2, 4)) if levels.requires_grad else None
        return dx, dl

    return make_result(out, (x, levels), backward)


def scale(x, factor: float) -> Tensor:
    x = as_tensor(x)
    factor = x.dtype.type(factor)
    return make_result(x.data * factor, (x,), lambda g: (g * factor,))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    orig = x.shape
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(orig),))


def inner_product(x, weight, bias=None) -> Tensor:
    """Flatten all but the batch axis, then apply ``x @ weight + bias``."""
    x, weight = as_tensor(x), as_tensor(weight)
    n = x.shape[0]
    flat = x.data.reshape(n, -1)
    if flat.shape[1] != weight.shape[0]:
        raise DimensionError(
            f"inner_product: flattened input has {flat.shape[1]} features, weights expect {weight.shape[0]}"
        )
    out = flat @ weight.data
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data
    xshape = x.shape

    def backward(g):
        dx = (g @ weight.data.T).reshape(xshape) if x.requires_grad else None
        dw = flat.T @ g if weight.requires_grad else None
        db = g.sum(axis=0) if bias is not None and bias.requires_grad else None
        return dx, dw, db

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward)


def softmax(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return make_result(p, (x,), backward)


def softmax_xent(logits, labels):
    """Mean cross-entropy of a softmax over the last axis.

    Returns ``(probs, loss)`` where ``probs`` is a plain array and ``loss`` a
    scalar tensor.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logsum
    probs = np.exp(logp)
    loss = -logp[np.arange(n), labels].mean()

    def backward(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1
        return (d * (g / n),)

    return probs, make_result(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def diff_conv(x, kernel=(1.0, -1.0)) -> Tensor:
    """Valid 1-D cross-correlation along axis 1 of an (N, L, F) tensor."""
    x = as_tensor(x)
    if x.data.ndim != 3:
        raise DimensionError(f"diff_conv: expected (N, L, F) input, got {x.shape}")
    k = np.asarray(kernel, dtype=x.dtype)
    length = x.shape[1]
    if length < len(k):
        raise DimensionError(f"diff_conv: need at least {len(k)} samples along axis 1, got {length}")
    m = length - len(k) + 1
    out = sum(k[t] * x.data[:, t:t + m, :] for t in range(len(k)))

    def backward(g):
        dx = np.zeros_like(x.data)
        for t in range(len(k)):
            dx[:, t:t + m, :] += k[t] * g
        return (dx,)

    return make_result(np.asarray(out, dtype=x.dtype), (x,), backward)
