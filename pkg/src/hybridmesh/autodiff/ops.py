"""Differentiable operations on :class:`DiffValue`.

Every op computes its forward result with numpy and registers a closure that
maps the upstream gradient to one gradient per input (``None`` for inputs
that are constants).
"""
from __future__ import annotations

from itertools import product
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .core import DiffValue, as_value, check_finite, make_node


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> DiffValue:
    a, b = as_value(a), as_value(b)
    _check_broadcast("add", a.data, b.data)
    check_finite("add", a.data, b.data)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return make_node(a.data + b.data, (a, b), "add", bw)


def sub(a, b) -> DiffValue:
    a, b = as_value(a), as_value(b)
    _check_broadcast("sub", a.data, b.data)
    check_finite("sub", a.data, b.data)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return make_node(a.data - b.data, (a, b), "sub", bw)


def mul(a, b) -> DiffValue:
    a, b = as_value(a), as_value(b)
    _check_broadcast("mul", a.data, b.data)
    check_finite("mul", a.data, b.data)
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_node(ad * bd, (a, b), "mul", bw)


def div(a, b) -> DiffValue:
    a, b = as_value(a), as_value(b)
    _check_broadcast("div", a.data, b.data)
    check_finite("div", a.data, b.data)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_node(out, (a, b), "div", bw)


def exp(x) -> DiffValue:
    x = as_value(x)
    check_finite("exp", x.data)
    out = np.exp(x.data)
    return make_node(out, (x,), "exp", lambda g: (g * out,))


def log(x) -> DiffValue:
    x = as_value(x)
    check_finite("log", x.data)
    xd = x.data
    return make_node(np.log(xd), (x,), "log", lambda g: (g / xd,))


def sqrt(x) -> DiffValue:
    x = as_value(x)
    check_finite("sqrt", x.data)
    out = np.sqrt(x.data)
    return make_node(out, (x,), "sqrt", lambda g: (g * 0.5 / out,))


def relu(x) -> DiffValue:
    x = as_value(x)
    check_finite("relu", x.data)
    mask = x.data > 0.0  # subgradient at 0 is 0
    return make_node(np.where(mask, x.data, 0.0), (x,), "relu", lambda g: (g * mask,))


def clip(x, lo: float, hi: float) -> DiffValue:
    x = as_value(x)
    check_finite("clip", x.data)
    mask = (x.data >= lo) & (x.data <= hi)
    return make_node(np.clip(x.data, lo, hi), (x,), "clip", lambda g: (g * mask,))


# --------------------------------------------------------------------------
# reductions and shape manipulation


def sum(x, axis=None, keepdims: bool = False) -> DiffValue:  # noqa: A001
    x = as_value(x)
    check_finite("sum", x.data)
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_node(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), "sum", bw)


def mean(x, axis=None, keepdims: bool = False) -> DiffValue:
    x = as_value(x)
    check_finite("mean", x.data)
    shape = x.shape
    out = np.mean(x.data, axis=axis, keepdims=keepdims)
    count = x.data.size // max(np.size(out), 1)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return make_node(out, (x,), "mean", bw)


def reshape(x, shape) -> DiffValue:
    x = as_value(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot reshape {old} into {tuple(shape)}") from None
    return make_node(out, (x,), "reshape", lambda g: (g.reshape(old),))


def transpose(x, axes) -> DiffValue:
    x = as_value(x)
    inv = np.argsort(axes)
    return make_node(np.transpose(x.data, axes), (x,), "transpose", lambda g: (np.transpose(g, inv),))


def concat(values: Sequence, axis: int = 0) -> DiffValue:
    vals = [as_value(v) for v in values]
    ref = vals[0].shape
    ax = axis % len(ref)
    for v in vals[1:]:
        if len(v.shape) != len(ref) or any(
            a != b for i, (a, b) in enumerate(zip(v.shape, ref)) if i != ax
        ):
            raise ValueError(f"concat: shape {v.shape} incompatible with {ref} along axis {axis}")
    sizes = [v.shape[ax] for v in vals]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return make_node(np.concatenate([v.data for v in vals], axis=ax), vals, "concat", bw)


def gather_rows(x, idx, axis: int = 0) -> DiffValue:
    """``np.take(x, idx, axis)`` with scatter-add backward."""
    x = as_value(x)
    idx = np.asarray(idx, dtype=np.int64)
    shape = x.shape
    ax = axis % len(shape)
    if idx.size and (idx.min() < -shape[ax] or idx.max() >= shape[ax]):
        raise IndexError(f"gather_rows: index out of range for axis {ax} of size {shape[ax]}")

    def bw(g):
        out = np.zeros(shape)
        gm = np.moveaxis(g, list(range(ax, ax + idx.ndim)), list(range(idx.ndim)))
        om = np.moveaxis(out, ax, 0)
        np.add.at(om, idx, gm)
        return (out,)

    return make_node(np.take(x.data, idx, axis=ax), (x,), "gather_rows", bw)


def index(x, key) -> DiffValue:
    """Basic/advanced numpy indexing with scatter-add backward."""
    x = as_value(x)
    shape = x.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, key, g)
        return (out,)

    return make_node(x.data[key], (x,), "index", bw)


# --------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> DiffValue:
    """``a @ b`` where ``b`` is 2-D and ``a`` has any leading batch axes."""
    a, b = as_value(a), as_value(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    check_finite("matmul", a.data, b.data)
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, bd.shape[1])
        return ga, gb

    return make_node(ad @ bd, (a, b), "matmul", bw)


def sparse_dense_matmul(S: sp.spmatrix, x, S_t: sp.spmatrix | None = None) -> DiffValue:
    """Constant sparse matrix times dense ``x`` of shape (M, C) or (B, M, C)."""
    x = as_value(x)
    S = sp.csr_matrix(S)
    n_out, n_in = S.shape
    xd = x.data
    if xd.ndim not in (2, 3) or xd.shape[-2] != n_in:
        raise ValueError(f"sparse_dense_matmul: matrix {S.shape} incompatible with {xd.shape}")
    check_finite("sparse_dense_matmul", xd)
    S_t = sp.csr_matrix(S.T) if S_t is None else S_t

    def apply(mat, arr, rows):
        if arr.ndim == 2:
            return np.asarray(mat @ arr)
        B, _, C = arr.shape
        flat = np.transpose(arr, (1, 0, 2)).reshape(arr.shape[1], B * C)
        return np.asarray(mat @ flat).reshape(rows, B, C).transpose(1, 0, 2)

    out = apply(S, xd, n_out)
    return make_node(out, (x,), "sparse_dense_matmul", lambda g: (apply(S_t, g, n_in),))


# --------------------------------------------------------------------------
# convolution and pooling (channels-first: (B, C, *spatial))


def _conv(kind: str, x, w, b, padding, stride) -> DiffValue:
    x, w = as_value(x), as_value(w)
    nd = w.ndim - 2
    if x.ndim != nd + 2 or x.shape[1] != w.shape[1]:
        raise ValueError(f"{kind}: input {x.shape} incompatible with weight {w.shape}")
    check_finite(kind, x.data, w.data)
    pad = (padding,) * nd if np.isscalar(padding) else tuple(padding)
    st = (stride,) * nd if np.isscalar(stride) else tuple(stride)
    ksz = w.shape[2:]
    xp = np.pad(x.data, [(0, 0), (0, 0)] + [(p, p) for p in pad])
    out_sz = tuple((xp.shape[2 + i] - ksz[i]) // st[i] + 1 for i in range(nd))
    if any(n <= 0 for n in out_sz):
        raise ValueError(f"{kind}: kernel {ksz} larger than padded input {xp.shape[2:]}")
    B, Cout = x.shape[0], w.shape[0]
    offsets = list(product(*[range(k) for k in ksz]))

    def window(o):
        return (slice(None), slice(None)) + tuple(
            slice(o[i], o[i] + st[i] * (out_sz[i] - 1) + 1, st[i]) for i in range(nd)
        )

    wd = w.data
    acc = np.zeros((Cout, B) + out_sz)
    for o in offsets:
        acc += np.tensordot(wd[(slice(None), slice(None)) + o], xp[window(o)], axes=([1], [1]))
    out = np.moveaxis(acc, 0, 1)
    parents = [x, w]
    if b is not None:
        b = as_value(b)
        if b.shape != (Cout,):
            raise ValueError(f"{kind}: bias shape {b.shape} does not match {Cout} output channels")
        out = out + b.data.reshape((1, Cout) + (1,) * nd)
        parents.append(b)
    out = np.ascontiguousarray(out)
    xshape = x.shape

    def bw(g):
        gT = np.moveaxis(g, 1, 0)  # (Cout, B, *out)
        gx = gw = gb = None
        if x.requires_grad:
            gxp = np.zeros(xp.shape)
            for o in offsets:
                contrib = np.tensordot(wd[(slice(None), slice(None)) + o], gT, axes=([0], [0]))
                gxp[window(o)] += np.moveaxis(contrib, 0, 1)
            crop = (slice(None), slice(None)) + tuple(
                slice(pad[i], pad[i] + xshape[2 + i]) for i in range(nd)
            )
            gx = gxp[crop]
        if w.requires_grad:
            gw = np.zeros(wd.shape)
            red = [0] + list(range(2, nd + 2))
            for o in offsets:
                gw[(slice(None), slice(None)) + o] = np.tensordot(g, xp[window(o)], axes=(red, red))
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0,) + tuple(range(2, nd + 2)))
        return (gx, gw, gb) if b is not None else (gx, gw)

    return make_node(out, parents, kind, bw)


def conv2d(x, w, b=None, padding=0, stride=1) -> DiffValue:
    """x: (B, Cin, H, W); w: (Cout, Cin, kh, kw)."""
    if as_value(w).ndim != 4:
        raise ValueError(f"conv2d: weight must be 4-D, got {as_value(w).shape}")
    return _conv("conv2d", x, w, b, padding, stride)


def conv3d(x, w, b=None, padding=0, stride=1) -> DiffValue:
    """x: (B, Cin, D0, D1, D2); w: (Cout, Cin, k0, k1, k2)."""
    if as_value(w).ndim != 5:
        raise ValueError(f"conv3d: weight must be 5-D, got {as_value(w).shape}")
    return _conv("conv3d", x, w, b, padding, stride)


def _maxpool(kind: str, x, kernel) -> DiffValue:
    x = as_value(x)
    nd = x.ndim - 2
    k = (kernel,) * nd if np.isscalar(kernel) else tuple(kernel)
    if len(k) != nd:
        raise ValueError(f"{kind}: kernel {k} does not match input {x.shape}")
    check_finite(kind, x.data)
    out_sz = tuple(x.shape[2 + i] // k[i] for i in range(nd))
    if any(n == 0 for n in out_sz):
        raise ValueError(f"{kind}: kernel {k} larger than input {x.shape}")
    B, C = x.shape[:2]
    crop = x.data[(slice(None), slice(None)) + tuple(slice(0, out_sz[i] * k[i]) for i in range(nd))]
    # (B, C, o0, k0, o1, k1, ...) -> (B, C, o0, o1, ..., k0*k1*...)
    split = crop.reshape((B, C) + tuple(v for i in range(nd) for v in (out_sz[i], k[i])))
    perm = [0, 1] + [2 + 2 * i for i in range(nd)] + [3 + 2 * i for i in range(nd)]
    win = split.transpose(perm).reshape((B, C) + out_sz + (int(np.prod(k)),))
    arg = np.argmax(win, axis=-1)  # first max -> lowest linear index inside the window
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    xshape = x.shape
    inv = np.argsort(perm)

    def bw(g):
        gwin = np.zeros(win.shape)
        np.put_along_axis(gwin, arg[..., None], g[..., None], axis=-1)
        gsplit = gwin.reshape((B, C) + out_sz + k).transpose(inv)
        gcrop = gsplit.reshape(crop.shape)
        gx = np.zeros(xshape)
        gx[(slice(None), slice(None)) + tuple(slice(0, out_sz[i] * k[i]) for i in range(nd))] = gcrop
        return (gx,)

    return make_node(out, (x,), kind, bw)


def maxpool2d(x, kernel=2) -> DiffValue:
    return _maxpool("maxpool2d", x, kernel)


def maxpool3d(x, kernel=(2, 2, 1)) -> DiffValue:
    """Anisotropic 3D max pooling; stride equals the kernel."""
    return _maxpool("maxpool3d", x, kernel)


# --------------------------------------------------------------------------
# normalisation


def layer_norm(x, gamma, beta, axes: Sequence[int], channel_axis: int, eps: float = 1e-5) -> DiffValue:
    """Normalise over ``axes`` per sample, then apply a per-channel affine."""
    x, gamma, beta = as_value(x), as_value(gamma), as_value(beta)
    C = x.shape[channel_axis]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ValueError(
            f"layer_norm: affine shapes {gamma.shape}/{beta.shape} do not match {C} channels of {x.shape}"
        )
    check_finite("layer_norm", x.data, gamma.data, beta.data)
    axes = tuple(a % x.ndim for a in axes)
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    inv_std = 1.0 / np.sqrt((xc * xc).mean(axis=axes, keepdims=True) + eps)
    xhat = xc * inv_std
    bshape = [1] * x.ndim
    bshape[channel_axis] = C
    gb = gamma.data.reshape(bshape)
    out = xhat * gb + beta.data.reshape(bshape)
    other = tuple(i for i in range(x.ndim) if i != channel_axis % x.ndim)

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gb
            gx = inv_std * (
                gh - gh.mean(axis=axes, keepdims=True) - xhat * (gh * xhat).mean(axis=axes, keepdims=True)
            )
        ggamma = (g * xhat).sum(axis=other) if gamma.requires_grad else None
        gbeta = g.sum(axis=other) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return make_node(out, (x, gamma, beta), "layer_norm", bw)


# --------------------------------------------------------------------------
# dispatcher

OPS = {
    "matmul": matmul,
    "sparse_dense_matmul": sparse_dense_matmul,
    "conv2d": conv2d,
    "conv3d": conv3d,
    "maxpool2d": maxpool2d,
    "maxpool3d": maxpool3d,
    "relu": relu,
    "layer_norm": layer_norm,
    "add": add,
    "concat": concat,
    "reshape": reshape,
    "transpose": transpose,
    "mean": mean,
    "sum": sum,
    "mul": mul,
    "sub": sub,
    "div": div,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "clip": clip,
    "gather_rows": gather_rows,
    "index": index,
}


def forward_op(kind: str, inputs: Sequence, **attrs) -> DiffValue:
    """Run op ``kind`` on ``inputs``; see :data:`OPS` for the available kinds."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    if kind == "concat":
        return fn(list(inputs), **attrs)
    if kind == "sparse_dense_matmul":
        return fn(attrs.pop("matrix"), *inputs, **attrs)
    return fn(*inputs, **attrs)
