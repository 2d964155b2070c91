"""Differentiable operations over :class:`~mctoken.autodiff.tensor.Tensor`.

Heavy ops (layer norm, softmax, attention, convolution) are fused with
hand-derived backward rules to keep the tape short at training time.
"""
from __future__ import annotations

import math

import numpy as np
from scipy import special

from .tensor import Tensor, as_tensor

POOL_KINDS = ("gap", "gmp", "gwrp")


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype), dtype=like.data.dtype)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic ----------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a) if isinstance(a, Tensor) or not isinstance(b, Tensor) else _lift(a, b)
    b = _lift(b, a)
    sa, sb = a.shape, b.shape
    return Tensor._from_op(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a) if isinstance(a, Tensor) or not isinstance(b, Tensor) else _lift(a, b)
    b = _lift(b, a)
    sa, sb = a.shape, b.shape
    return Tensor._from_op(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a = as_tensor(a) if isinstance(a, Tensor) or not isinstance(b, Tensor) else _lift(a, b)
    b = _lift(b, a)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a = as_tensor(a) if isinstance(a, Tensor) or not isinstance(b, Tensor) else _lift(a, b)
    b = _lift(b, a)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(out, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    p = float(exponent)
    return Tensor._from_op(
        ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


# -- linear algebra --------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(ad @ bd, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis of ``x`` (weight is in×out)."""
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(f"linear dimension mismatch: {x.shape} @ {weight.shape}")
    xd, wd = x.data, weight.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ wd
    if bias is not None:
        out += bias.data
    out = out.reshape(*lead, wd.shape[1])

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd.T).reshape(xd.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward, "linear")


# -- shape manipulation -----------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return Tensor._from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return Tensor._from_op(
        np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    return Tensor._from_op(
        np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),), "swapaxes")


def getitem(a: Tensor, index) -> Tensor:
    src_shape, dtype = a.shape, a.data.dtype
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros(src_shape, dtype=dtype)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return Tensor._from_op(a.data[index], (a,), backward, "getitem")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._from_op(
        np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def broadcast_to(a: Tensor, shape) -> Tensor:
    src = a.shape
    return Tensor._from_op(
        np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, src),), "broadcast")


# -- reductions -----------------------------------------------------------------

def _expand(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=a.data.dtype)
    return Tensor._from_op(
        out, (a,), lambda g: (_expand(g, shape, axis, keepdims).copy(),), "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([shape[ax] for ax in axes]))
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims), dtype=a.data.dtype)
    scale = a.data.dtype.type(1.0 / count)
    return Tensor._from_op(
        out, (a,), lambda g: (_expand(g * scale, shape, axis, keepdims).copy(),), "mean")


def max(a: Tensor, axis: int) -> Tensor:  # noqa: A001
    """Max along one axis; the gradient goes to the first maximal entry."""
    ad = a.data
    idx = np.expand_dims(ad.argmax(axis=axis), axis)
    out = np.take_along_axis(ad, idx, axis=axis)

    def backward(g):
        full = np.zeros_like(ad)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return Tensor._from_op(np.squeeze(out, axis=axis), (a,), backward, "max")


# -- pointwise nonlinearities --------------------------------------------------------

def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._from_op(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return special.expit(x).astype(x.dtype, copy=False)


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def softplus(a: Tensor) -> Tensor:
    """``log(1 + exp(x))`` without overflow."""
    ad = a.data
    out = np.logaddexp(ad.dtype.type(0), ad)
    return Tensor._from_op(out, (a,), lambda g: (g * _sigmoid(ad),), "softplus")


def relu(a: Tensor) -> Tensor:
    ad = a.data
    mask = ad > 0
    return Tensor._from_op(np.where(mask, ad, 0).astype(ad.dtype), (a,), lambda g: (g * mask,), "relu")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    ad = a.data
    cdf = 0.5 * (1.0 + special.erf(ad * _INV_SQRT2))
    out = (ad * cdf).astype(ad.dtype, copy=False)

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * ad * ad)
        return ((g * (cdf + ad * pdf)).astype(ad.dtype, copy=False),)

    return Tensor._from_op(out, (a,), backward, "gelu")


# -- normalizations ----------------------------------------------------------------

def _softmax(x: np.ndarray, axis: int) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    out = _softmax(a.data, axis)

    def backward(g):
        return ((g - (g * out).sum(axis=axis, keepdims=True)) * out,)

    return Tensor._from_op(out, (a,), backward, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    ad = a.data
    shifted = ad - ad.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    prob = np.exp(out)

    def backward(g):
        return (g - prob * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(out, (a,), backward, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then scale and shift per channel."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data
    d = xd.shape[-1]

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gb = g.sum(axis=lead) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).sum(axis=-1, keepdims=True) / d)
        return gx, gg, gb

    return Tensor._from_op(out, (x, gamma, beta), backward, "layer_norm")


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True) + eps)
    out = xd / norm

    def backward(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return Tensor._from_op(out, (x,), backward, "l2_normalize")


# -- attention ----------------------------------------------------------------------

def attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, np.ndarray]:
    """Scaled dot-product attention over (..., tokens, head_dim) operands.

    Returns the attended values and the attention weights (a plain array,
    used by the explanation maps and never differentiated through).
    """
    qd, kd, vd = q.data, k.data, v.data
    scale = qd.dtype.type(qd.shape[-1] ** -0.5)
    scores = (qd @ np.swapaxes(kd, -1, -2)) * scale
    attn = _softmax(scores, -1)
    out = attn @ vd

    def backward(g):
        gv = np.swapaxes(attn, -1, -2) @ g
        ga = g @ np.swapaxes(vd, -1, -2)
        gs = (ga - (ga * attn).sum(axis=-1, keepdims=True)) * attn * scale
        gq = gs @ kd
        gk = np.swapaxes(gs, -1, -2) @ qd
        return (_unbroadcast(gq, qd.shape), _unbroadcast(gk, kd.shape), _unbroadcast(gv, vd.shape))

    return Tensor._from_op(out, (q, k, v), backward, "attention"), attn


# -- convolution and pooling ----------------------------------------------------------

PAD_MODES = ("zeros", "edge")


def _fold_edges(gp: np.ndarray, pad: int, h: int, w: int) -> np.ndarray:
    """Adjoint of edge padding: add the gradient of padded cells to the border cells."""
    g = gp[:, pad:pad + h].copy()
    g[:, 0] += gp[:, :pad].sum(axis=1)
    g[:, -1] += gp[:, pad + h:].sum(axis=1)
    out = g[:, :, pad:pad + w].copy()
    out[:, :, 0] += g[:, :, :pad].sum(axis=2)
    out[:, :, -1] += g[:, :, pad + w:].sum(axis=2)
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: int | None = None,
           pad_mode: str = "zeros") -> Tensor:
    """Stride-1 cross-correlation over channels-last input.

    ``x`` is (H, W, Cin) or (B, H, W, Cin); ``weight`` is (k, k, Cin, Cout).
    ``padding`` defaults to ``k // 2`` which keeps the spatial size for odd k.
    ``pad_mode`` is ``"zeros"`` or ``"edge"`` (border values repeated).
    """
    if pad_mode not in PAD_MODES:
        raise ValueError(f"unknown pad_mode {pad_mode!r}; expected one of {PAD_MODES}")
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    k, k2, cin, cout = weight.shape
    if k != k2:
        raise ValueError(f"square kernels only, got {weight.shape[:2]}")
    if xd.shape[-1] != cin:
        raise ValueError(f"conv2d channel mismatch: input has {xd.shape[-1]}, kernel expects {cin}")
    pad = k // 2 if padding is None else int(padding)
    b, h, w, _ = xd.shape
    widths = ((0, 0), (pad, pad), (pad, pad), (0, 0))
    xp = np.pad(xd, widths, mode="constant" if pad_mode == "zeros" else "edge") if pad else xd
    ho, wo = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    # (B, Ho, Wo, Cin, k, k) -> (B, Ho, Wo, k, k, Cin)
    windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    cols = np.ascontiguousarray(windows.transpose(0, 1, 2, 4, 5, 3)).reshape(b * ho * wo, k * k * cin)
    wmat = weight.data.reshape(k * k * cin, cout)
    out = cols @ wmat
    if bias is not None:
        out += bias.data
    out = out.reshape(b, ho, wo, cout)

    def backward(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(b, ho, wo, k, k, cin)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, i:i + ho, j:j + wo, :] += gcols[:, :, :, i, j, :]
            if not pad:
                gx = gxp
            elif pad_mode == "edge":
                gx = _fold_edges(gxp, pad, h, w)
            else:
                gx = gxp[:, pad:pad + h, pad:pad + w, :]
            if squeeze:
                gx = gx[0]
        return (gx, gw, gb) if bias is not None else (gx, gw)

    if squeeze:
        out = out[0]
    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward, "conv2d")


def gwrp_weights(count: int, decay: float, dtype=np.float64) -> np.ndarray:
    """Normalized rank weights ``decay**j / sum(decay**j)`` for j = 0..count-1."""
    w = np.power(float(decay), np.arange(count, dtype=np.float64))
    return (w / w.sum()).astype(dtype)


def pool(x: Tensor, kind: str = "gmp", decay: float = 0.9) -> Tensor:
    """Global spatial pooling of a (..., H, W, C) map down to (..., C).

    ``gap`` averages, ``gmp`` takes the maximum and ``gwrp`` sorts each
    channel in descending order and takes a decay-weighted average.
    """
    kind = kind.lower()
    if kind not in POOL_KINDS:
        raise ValueError(f"unknown pooling kind {kind!r}; expected one of {POOL_KINDS}")
    if x.ndim < 3:
        raise ValueError(f"pool expects (..., H, W, C), got {x.shape}")
    lead = x.shape[:-3]
    c = x.shape[-1]
    flat = reshape(x, (*lead, -1, c))
    if kind == "gap":
        return mean(flat, axis=-2)
    if kind == "gmp":
        return max(flat, axis=-2)
    if not 0.0 < decay <= 1.0:
        raise ValueError(f"gwrp decay must lie in (0, 1], got {decay}")
    fd = flat.data
    order = np.argsort(-fd, axis=-2, kind="stable")
    ranked = np.take_along_axis(fd, order, axis=-2)
    weights = gwrp_weights(fd.shape[-2], decay, fd.dtype)[:, None]
    out = (ranked * weights).sum(axis=-2)

    def backward(g):
        full = np.zeros_like(fd)
        np.put_along_axis(full, order, np.expand_dims(g, -2) * weights, axis=-2)
        return (full,)

    return Tensor._from_op(out, (flat,), backward, "gwrp")
