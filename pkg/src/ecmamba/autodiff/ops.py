"""Differentiable primitives.

Every function takes Tensors (or array-likes, treated as constants) and
returns a Tensor. Adjoints are registered on the active tape through
:func:`record`. Image tensors use the [B, C, H, W] layout.
"""

from __future__ import annotations

import math

import numba
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .tensor import ContractError, Tensor, as_tensor, record

_SQRT_HALF = 1.0 / math.sqrt(2.0)
# fast-math minus the no-NaN/no-Inf assumptions, so non-finite values still
# propagate to the validity checks; numpy error model: x/0 gives inf, not an exception
FAST = {"nsz", "arcp", "contract", "afn", "reassoc"}
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _const(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(name: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = _const(a, b if isinstance(b, Tensor) else None), _const(b, a if isinstance(a, Tensor) else None)
    _check_broadcast("add", a, b)
    return record("add", a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _const(a, b if isinstance(b, Tensor) else None), _const(b, a if isinstance(a, Tensor) else None)
    _check_broadcast("sub", a, b)
    return record("sub", a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _const(a, b if isinstance(b, Tensor) else None), _const(b, a if isinstance(a, Tensor) else None)
    _check_broadcast("mul", a, b)

    def adjoint(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return record("mul", a.data * b.data, (a, b), adjoint)


def div(a, b) -> Tensor:
    a, b = _const(a, b if isinstance(b, Tensor) else None), _const(b, a if isinstance(a, Tensor) else None)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def adjoint(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return record("div", out, (a, b), adjoint)


def neg(x) -> Tensor:
    x = as_tensor(x)
    return record("neg", -x.data, (x,), lambda g: (-g,))


def square(x) -> Tensor:
    x = as_tensor(x)
    return record("square", x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def abs(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    return record("abs", np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def clamp_max(x, limit: float) -> Tensor:
    """min(x, limit); gradient passes where x < limit."""
    x = as_tensor(x)
    mask = x.data < limit
    return record("clamp_max", np.minimum(x.data, limit), (x,), lambda g: (g * mask,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return record("exp", out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return record("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return record("sqrt", out, (x,), lambda g: (0.5 * g / out,))


# ---------------------------------------------------------------------------
# activations

def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = expit(x.data)
    return record("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


@numba.njit(cache=True, fastmath=FAST, error_model="numpy")
def _silu_kernel(x):
    out = np.empty_like(x)
    d = np.empty_like(x)
    for i in range(x.size):
        v = x[i]
        s = 1.0 / (1.0 + math.exp(-v))
        out[i] = v * s
        d[i] = s * (1.0 + v * (1.0 - s))
    return out, d


@numba.njit(cache=True, fastmath=FAST, error_model="numpy")
def _softplus_kernel(x):
    out = np.empty_like(x)
    d = np.empty_like(x)
    for i in range(x.size):
        v = x[i]
        e = math.exp(-math.fabs(v))
        out[i] = (v if v > 0 else 0.0) + math.log1p(e)
        d[i] = 1.0 / (1.0 + e) if v >= 0 else e / (1.0 + e)
    return out, d


@numba.njit(cache=True, fastmath=FAST, error_model="numpy")
def _gelu_kernel(x):
    out = np.empty_like(x)
    d = np.empty_like(x)
    for i in range(x.size):
        v = x[i]
        cdf = 0.5 * (1.0 + math.erf(v * _SQRT_HALF))
        out[i] = v * cdf
        d[i] = cdf + v * _INV_SQRT_2PI * math.exp(-0.5 * v * v)
    return out, d


def _pointwise(name: str, kernel, x) -> Tensor:
    # kernel maps a flat array to (value, derivative) in one pass
    x = as_tensor(x)
    flat = np.ascontiguousarray(x.data).reshape(-1)
    out, d = kernel(flat)
    return record(name, out.reshape(x.shape), (x,), lambda g: (g * d.reshape(x.shape),))


def silu(x) -> Tensor:
    return _pointwise("silu", _silu_kernel, x)


def softplus(x) -> Tensor:
    """log(1 + e^x), computed stably."""
    return _pointwise("softplus", _softplus_kernel, x)


def gelu(x) -> Tensor:
    """Exact (erf-based) GELU."""
    return _pointwise("gelu", _gelu_kernel, x)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return record("relu", x.data * mask, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# reductions and shape

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def adjoint(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return record("sum", np.asarray(out), (x,), adjoint)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def adjoint(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return record("mean", np.asarray(out, dtype=x.dtype), (x,), adjoint)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ContractError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}") from None
    return record("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ContractError(f"concat: {exc}") from None
    splits = np.cumsum(sizes)[:-1]

    def adjoint(g):
        return tuple(np.split(g, splits, axis=axis))

    return record("concat", out, tensors, adjoint)


def index(x, key) -> Tensor:
    """Basic/advanced indexing ``x[key]``; the adjoint scatters into zeros."""
    x = as_tensor(x)
    out = x.data[key]

    basic = all(isinstance(k, (int, slice, type(Ellipsis), type(None)))
                for k in (key if isinstance(key, tuple) else (key,)))

    def adjoint(g):
        full = np.zeros_like(x.data)
        if basic:
            full[key] += g
        else:
            np.add.at(full, key, g)
        return (full,)

    return record("index", np.array(out), (x,), adjoint)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ContractError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def adjoint(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return record("matmul", a.data @ b.data, (a, b), adjoint)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis; weight is [out, in]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[1]:
        raise ContractError(f"linear: input features {x.shape[-1]} != weight in-dim {weight.shape[1]}")
    out = x.data @ weight.data.T
    inputs = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        inputs.append(bias)

    def adjoint(g):
        gx = g @ weight.data if x.requires_grad else None
        g2 = g.reshape(-1, g.shape[-1])
        gw = g2.T @ x.data.reshape(-1, x.shape[-1]) if weight.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return record("linear", out, inputs, adjoint)


# ---------------------------------------------------------------------------
# gather / scatter

def _flat_positions(shape, index: np.ndarray, axis: int) -> np.ndarray:
    grids = list(np.ogrid[tuple(slice(n) for n in index.shape)])
    grids[axis] = index
    grids = np.broadcast_arrays(*grids)
    return np.ravel_multi_index(tuple(grids), shape)


def gather(x, index, axis: int) -> Tensor:
    """``take_along_axis``: out[..., i, ...] = x[..., index[..., i, ...], ...]."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.intp)
    axis %= x.ndim
    if index.ndim != x.ndim:
        raise ContractError(f"gather: index rank {index.ndim} != input rank {x.ndim}")
    for d in range(x.ndim):
        if d != axis and index.shape[d] not in (1, x.shape[d]):
            raise ContractError(f"gather: index dim {d} is {index.shape[d]}, input has {x.shape[d]}")
    out = np.take_along_axis(x.data, index, axis=axis)

    def adjoint(g):
        full_index = np.broadcast_to(index, g.shape)
        flat = _flat_positions(x.shape, full_index, axis)
        gx = np.bincount(flat.ravel(), weights=g.ravel(), minlength=x.size)
        return (gx.reshape(x.shape).astype(x.dtype, copy=False),)

    return record("gather", out, (x,), adjoint)


def _take(arr: np.ndarray, index: np.ndarray, axis: int) -> np.ndarray:
    # per-row token gathers ([B, L, 1] index on axis 1) are much faster as fancy indexing
    if axis == 1 and arr.ndim == 3 and index.shape[2] == 1:
        return arr[np.arange(arr.shape[0])[:, None], index[:, :, 0]]
    return np.take_along_axis(arr, index, axis=axis)


def permute(x, index, axis: int) -> Tensor:
    """``gather`` where ``index`` is a permutation along ``axis``.

    The adjoint is a gather with the inverse permutation instead of a
    scatter-add.
    """
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.intp)
    axis %= x.ndim
    n = x.shape[axis]
    if index.ndim != x.ndim or index.shape[axis] != n:
        raise ContractError(f"permute: index shape {index.shape} does not match input {x.shape} on axis {axis}")
    ramp_shape = [1] * x.ndim
    ramp_shape[axis] = n
    ramp = np.broadcast_to(np.arange(n).reshape(ramp_shape), index.shape)
    inverse = np.full(index.shape, -1, dtype=np.intp)
    if index.size and (index.min() < 0 or index.max() >= n):
        raise ContractError(f"permute: index out of range for axis of size {n}")
    np.put_along_axis(inverse, index, ramp, axis=axis)
    if (inverse < 0).any():
        raise ContractError("permute: index is not a permutation")
    out = _take(x.data, index, axis)
    return record("permute", out, (x,), lambda g: (_take(g, inverse, axis),))


def scatter(src, index, axis: int, size: int) -> Tensor:
    """Scatter-add along ``axis`` into a zero tensor with ``size`` slots there."""
    src = as_tensor(src)
    index = np.asarray(index, dtype=np.intp)
    axis %= src.ndim
    full_index = np.broadcast_to(index, src.shape)
    if full_index.size and (full_index.min() < 0 or full_index.max() >= size):
        raise ContractError(f"scatter: index out of range for size {size}")
    out_shape = list(src.shape)
    out_shape[axis] = size
    out_shape = tuple(out_shape)
    flat = _flat_positions(out_shape, full_index, axis)
    n_out = int(np.prod(out_shape))
    out = np.bincount(flat.ravel(), weights=src.data.ravel(), minlength=n_out)
    out = out.reshape(out_shape).astype(src.dtype, copy=False)

    def adjoint(g):
        return (np.take_along_axis(g, full_index, axis=axis),)

    return record("scatter", out, (src,), adjoint)


# ---------------------------------------------------------------------------
# convolution family

def pad2d(x, padding: int) -> Tensor:
    """Zero-pad the two trailing spatial axes."""
    x = as_tensor(x)
    if padding == 0:
        return x
    p = padding
    widths = [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)]
    out = np.pad(x.data, widths)
    return record("pad2d", out, (x,), lambda g: (g[..., p:-p, p:-p],))


def _conv_out(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


@numba.njit(cache=True, fastmath=FAST, error_model="numpy")
def _depthwise_forward(xp, w, Ho, Wo):
    # stride 1; a literal unit stride keeps the inner loop vectorisable
    B, C = xp.shape[0], xp.shape[1]
    kh, kw = w.shape[2], w.shape[3]
    out = np.zeros((B, C, Ho, Wo), dtype=xp.dtype)
    for b in range(B):
        for c in range(C):
            for i in range(kh):
                for j in range(kw):
                    wt = w[c, 0, i, j]
                    for ho in range(Ho):
                        for wo in range(Wo):
                            out[b, c, ho, wo] += wt * xp[b, c, ho + i, wo + j]
    return out


@numba.njit(cache=True, fastmath=FAST, error_model="numpy")
def _depthwise_backward(xp, w, g):
    B, C = xp.shape[0], xp.shape[1]
    kh, kw = w.shape[2], w.shape[3]
    Ho, Wo = g.shape[2], g.shape[3]
    gxp = np.zeros(xp.shape, dtype=xp.dtype)
    gw = np.zeros(w.shape)
    for b in range(B):
        for c in range(C):
            for i in range(kh):
                for j in range(kw):
                    wt = w[c, 0, i, j]
                    acc = 0.0
                    for ho in range(Ho):
                        for wo in range(Wo):
                            gv = g[b, c, ho, wo]
                            acc += gv * xp[b, c, ho + i, wo + j]
                            gxp[b, c, ho + i, wo + j] += gv * wt
                    gw[c, 0, i, j] += acc
    return gxp, gw


@numba.njit(cache=True, fastmath=FAST, error_model="numpy")
def _im2col(xp, kh, kw, Ho, Wo):
    # stride-1 patches as [B, C·kh·kw, Ho·Wo]
    B, C = xp.shape[0], xp.shape[1]
    col = np.empty((B, C, kh, kw, Ho, Wo), dtype=xp.dtype)
    for b in range(B):
        for c in range(C):
            for i in range(kh):
                for j in range(kw):
                    for ho in range(Ho):
                        for wo in range(Wo):
                            col[b, c, i, j, ho, wo] = xp[b, c, ho + i, wo + j]
    return col.reshape(B, C * kh * kw, Ho * Wo)
@numba.njit(cache=True, fastmath=FAST, error_model="numpy")
def _col2im(dcol, Hp, Wp):
    B, C, kh, kw, Ho, Wo = dcol.shape
    gxp = np.zeros((B, C, Hp, Wp), dtype=dcol.dtype)
    for b in range(B):
        for c in range(C):
            for i in range(kh):
                for j in range(kw):
                    for ho in range(Ho):
                        for wo in range(Wo):
                            gxp[b, c, ho + i, wo + j] += dcol[b, c, i, j, ho, wo]
    return gxp
def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """2D cross-correlation. weight is [C_out, C_in // groups, kh, kw]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ContractError(f"conv2d: expected 4D input and weight, got {x.shape} and {weight.shape}")
    B, C, H, W = x.shape
    Co, cpg, kh, kw = weight.shape
    if groups < 1 or C % groups or Co % groups:
        raise ContractError(f"conv2d: groups={groups} must divide C_in={C} and C_out={Co}")
    if cpg != C // groups:
        raise ContractError(f"conv2d: weight expects {cpg * groups} input channels, got {C}")
    Ho, Wo = _conv_out(H, kh, stride, padding), _conv_out(W, kw, stride, padding)
    if Ho < 1 or Wo < 1:
        raise ContractError(f"conv2d: kernel {kh}x{kw} larger than padded input {H}x{W}")
    s, p = stride, padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    depthwise = cpg == 1 and Co == C and groups == C
    pointwise = kh == kw == 1 and s == 1 and p == 0 and groups == 1
    opg = Co // groups

    def window(arr, i, j, ho, wo):
        return arr[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]

    if pointwise:
        out = (weight.data[:, :, 0, 0] @ x.data.reshape(B, C, H * W)).reshape(B, Co, H, W)
        win = None
    elif depthwise and s == 1 and x.dtype == weight.dtype:
        xp = np.ascontiguousarray(xp)
        out = _depthwise_forward(xp, np.ascontiguousarray(weight.data), Ho, Wo)
        win = None
    elif depthwise:
        out = np.zeros((B, Co, Ho, Wo), dtype=np.result_type(x.dtype, weight.dtype))
        for i in range(kh):
            for j in range(kw):
                out += window(xp, i, j, Ho, Wo) * weight.data[None, :, 0, i, j, None, None]
        win = None
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :Ho, :Wo]
        if groups == 1 and s == 1:
            col = _im2col(np.ascontiguousarray(xp), kh, kw, Ho, Wo)
            out = (weight.data.reshape(Co, -1) @ col).reshape(B, Co, Ho, Wo)
        elif groups == 1:
            # im2col once; the adjoint reuses it for the weight gradient
            col = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(B, C * kh * kw, Ho * Wo)
            out = (weight.data.reshape(Co, -1) @ col).reshape(B, Co, Ho, Wo)
        else:
            wg = win.reshape(B, groups, cpg, Ho, Wo, kh, kw)
            kg = weight.data.reshape(groups, opg, cpg, kh, kw)
            out = np.einsum("bgchwij,gocij->bgohw", wg, kg, optimize=True).reshape(B, Co, Ho, Wo)
        out = np.ascontiguousarray(out)
    inputs = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None, None]
        inputs.append(bias)

    def adjoint(g):
        gx = gw = None
        if depthwise and s == 1 and x.dtype == weight.dtype:
            gxp, gw = _depthwise_backward(xp, np.ascontiguousarray(weight.data),
                                          np.ascontiguousarray(g, dtype=x.dtype))
            gx = gxp[:, :, p:p + H, p:p + W] if p else gxp
            gw = gw.astype(weight.dtype, copy=False)
        elif pointwise:
            g2 = g.reshape(B, Co, H * W)
            if x.requires_grad:
                gx = (weight.data[:, :, 0, 0].T @ g2).reshape(x.shape)
            if weight.requires_grad:
                gw = (g2 @ x.data.reshape(B, C, H * W).transpose(0, 2, 1)).sum(axis=0)[:, :, None, None]
        elif x.requires_grad:
            gxp = np.zeros_like(xp)
            if depthwise:
                for i in range(kh):
                    for j in range(kw):
                        window(gxp, i, j, Ho, Wo)[...] += g * weight.data[None, :, 0, i, j, None, None]
            elif groups == 1:
                dcol = (weight.data.reshape(Co, -1).T @ g.reshape(B, Co, Ho * Wo)).reshape(B, C, kh, kw, Ho, Wo)
                if s == 1:
                    gxp = _col2im(dcol, *xp.shape[2:])
                else:
                    for i in range(kh):
                        for j in range(kw):
                            window(gxp, i, j, Ho, Wo)[...] += dcol[:, :, i, j]
            else:
                gg = g.reshape(B, groups, opg, Ho, Wo)
                kg = weight.data.reshape(groups, opg, cpg, kh, kw)
                dcol = np.einsum("bgohw,gocij->bgchwij", gg, kg, optimize=True).reshape(B, C, Ho, Wo, kh, kw)
                for i in range(kh):
                    for j in range(kw):
                        window(gxp, i, j, Ho, Wo)[...] += dcol[..., i, j]
            gx = gxp[:, :, p:p + H, p:p + W] if p else gxp
        if weight.requires_grad and not pointwise and gw is None:
            if depthwise:
                gw = np.empty_like(weight.data)
                for i in range(kh):
                    for j in range(kw):
                        gw[:, 0, i, j] = np.einsum("bchw,bchw->c", g, window(xp, i, j, Ho, Wo))
            elif groups == 1:
                g2 = g.reshape(B, Co, Ho * Wo)
                gw = (g2 @ col.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
            else:
                gg = g.reshape(B, groups, opg, Ho, Wo)
                wg = win.reshape(B, groups, cpg, Ho, Wo, kh, kw)
                gw = np.einsum("bgohw,bgchwij->gocij", gg, wg, optimize=True).reshape(weight.shape)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.reshape(B, Co, -1).sum(axis=(0, 2)))
        return tuple(grads)

    return record("conv2d", out, inputs, adjoint)


def conv_transpose2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution (adjoint of conv2d). weight is [C_in, C_out, kh, kw]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[0]:
        raise ContractError(f"conv_transpose2d: input {x.shape} incompatible with weight {weight.shape}")
    B, C, H, W = x.shape
    _, Co, kh, kw = weight.shape
    s, p = stride, padding
    Hf, Wf = (H - 1) * s + kh, (W - 1) * s + kw
    Ho, Wo = Hf - 2 * p, Wf - 2 * p
    if Ho < 1 or Wo < 1:
        raise ContractError(f"conv_transpose2d: padding {p} leaves empty output")

    def window(arr, i, j):
        return arr[:, :, i:i + s * (H - 1) + 1:s, j:j + s * (W - 1) + 1:s]

    cols = np.tensordot(x.data, weight.data, axes=([1], [0]))  # [B,H,W,Co,kh,kw]
    full = np.zeros((B, Co, Hf, Wf), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            window(full, i, j)[...] += cols[..., i, j].transpose(0, 3, 1, 2)
    out = full[:, :, p:p + Ho, p:p + Wo] if p else full
    inputs = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None, None]
        inputs.append(bias)
    out = np.ascontiguousarray(out)

    def adjoint(g):
        gp = np.pad(g, ((0, 0), (0, 0), (p, p), (p, p))) if p else g
        win = sliding_window_view(gp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :H, :W]
        gx = np.tensordot(win, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2) \
            if x.requires_grad else None
        gw = np.tensordot(x.data, win, axes=([0, 2, 3], [0, 2, 3])) if weight.requires_grad else None
        grads = [None if gx is None else np.ascontiguousarray(gx), gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return record("conv_transpose2d", out, inputs, adjoint)


def avg_pool2d(x, k: int) -> Tensor:
    x = as_tensor(x)
    B, C, H, W = x.shape
    if H % k or W % k:
        raise ContractError(f"avg_pool2d: spatial dims {H}x{W} not divisible by {k}")
    out = x.data.reshape(B, C, H // k, k, W // k, k).mean(axis=(3, 5))

    def adjoint(g):
        return (np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k),)

    return record("avg_pool2d", out, (x,), adjoint)


def layer_norm(x, weight=None, bias=None, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalize over a single ``axis``; weight/bias have that axis' length."""
    x = as_tensor(x)
    axis %= x.ndim
    n = x.shape[axis]
    bshape = [1] * x.ndim
    bshape[axis] = n
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat
    inputs = [x]
    if weight is not None:
        weight = as_tensor(weight)
        out = out * weight.data.reshape(bshape)
        inputs.append(weight)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(bshape)
        inputs.append(bias)
    red = tuple(i for i in range(x.ndim) if i != axis)

    def adjoint(g):
        dxhat = g * weight.data.reshape(bshape) if weight is not None else g
        gx = rstd * (dxhat - dxhat.mean(axis=axis, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=axis, keepdims=True))
        grads = [gx]
        if weight is not None:
            grads.append((g * xhat).sum(axis=red))
        if bias is not None:
            grads.append(g.sum(axis=red))
        return tuple(grads)

    return record("layer_norm", out, inputs, adjoint)


# ---------------------------------------------------------------------------
# bilinear sampling

@numba.njit(cache=True, inline="always")
def _corners(y, x, H, W):
    yc = min(max(y, 0.0), H - 1.0)
    xc = min(max(x, 0.0), W - 1.0)
    y0 = int(math.floor(yc))
    x0 = int(math.floor(xc))
    y1 = min(y0 + 1, H - 1)
    x1 = min(x0 + 1, W - 1)
    return y0, x0, y1, x1, yc - y0, xc - x0


@numba.njit(cache=True, error_model="numpy")
def _bilinear_forward(src, coords):
    B, C, H, W = src.shape
    P = coords.shape[1]
    out = np.empty((B, C, P), dtype=src.dtype)
    for b in range(B):
        for p in range(P):
            y0, x0, y1, x1, wy, wx = _corners(coords[b, p, 0], coords[b, p, 1], H, W)
            w00 = (1 - wy) * (1 - wx)
            w01 = (1 - wy) * wx
            w10 = wy * (1 - wx)
            w11 = wy * wx
            for c in range(C):
                out[b, c, p] = (w00 * src[b, c, y0, x0] + w01 * src[b, c, y0, x1]
                                + w10 * src[b, c, y1, x0] + w11 * src[b, c, y1, x1])
    return out


@numba.njit(cache=True, error_model="numpy")
def _bilinear_backward(src, coords, g, want_src, want_coords):
    B, C, H, W = src.shape
    P = coords.shape[1]
    gsrc = np.zeros_like(src)
    gcoords = np.zeros(coords.shape, dtype=coords.dtype)
    for b in range(B):
        for p in range(P):
            y = coords[b, p, 0]
            x = coords[b, p, 1]
            y0, x0, y1, x1, wy, wx = _corners(y, x, H, W)
            w00 = (1 - wy) * (1 - wx)
            w01 = (1 - wy) * wx
            w10 = wy * (1 - wx)
            w11 = wy * wx
            gy = 0.0
            gx = 0.0
            for c in range(C):
                gv = g[b, c, p]
                if want_src:
                    gsrc[b, c, y0, x0] += w00 * gv
                    gsrc[b, c, y0, x1] += w01 * gv
                    gsrc[b, c, y1, x0] += w10 * gv
                    gsrc[b, c, y1, x1] += w11 * gv
                if want_coords:
                    v00 = src[b, c, y0, x0]
                    v01 = src[b, c, y0, x1]
                    v10 = src[b, c, y1, x0]
                    v11 = src[b, c, y1, x1]
                    gy += gv * ((1 - wx) * (v10 - v00) + wx * (v11 - v01))
                    gx += gv * ((1 - wy) * (v01 - v00) + wy * (v11 - v10))
            # clamped components get no gradient
            if want_coords:
                if 0.0 <= y <= H - 1.0:
                    gcoords[b, p, 0] = gy
                if 0.0 <= x <= W - 1.0:
                    gcoords[b, p, 1] = gx
    return gsrc, gcoords


def bilinear_sample(src, coords) -> Tensor:
    """Sample ``src`` [B,C,H,W] at fractional (y, x) ``coords`` [B,P,2] -> [B,C,P].

    Coordinates outside the grid are clamped to it; the clamped component
    gets zero gradient while the source gradient lands on the clamped location.
    """
    src, coords = as_tensor(src), as_tensor(coords)
    if src.ndim != 4 or coords.ndim != 3 or coords.shape[-1] != 2 or coords.shape[0] != src.shape[0]:
        raise ContractError(f"bilinear_sample: src {src.shape} / coords {coords.shape} mismatch")
    if not np.isfinite(coords.data).all():
        raise ContractError("bilinear_sample: coordinates must be finite")
    dtype = np.result_type(src.dtype, coords.dtype)
    s = np.ascontiguousarray(src.data, dtype=dtype)
    c = np.ascontiguousarray(coords.data, dtype=dtype)
    out = _bilinear_forward(s, c)

    def adjoint(g):
        gsrc, gcoords = _bilinear_backward(s, c, np.ascontiguousarray(g, dtype=dtype),
                                           src.requires_grad, coords.requires_grad)
        return (gsrc.astype(src.dtype, copy=False) if src.requires_grad else None,
                gcoords.astype(coords.dtype, copy=False) if coords.requires_grad else None)

    return record("bilinear_sample", out, (src, coords), adjoint)
