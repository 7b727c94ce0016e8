"""Forward ops with exact vector-Jacobian products.

Elementwise binary ops follow numpy broadcasting; the backward pass
sum-reduces gradients over broadcast axes. Convolutions run on [H, W, C]
grids via im2col and BLAS matmul (no batch axis: encoders process one view
at a time). All ops verify output finiteness through
:func:`kpnf.diffcore.node.make_node`.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from kpnf.diffcore.node import DiffNode, as_node, make_node
from kpnf.errors import ShapeMismatchError


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum-reduce ``grad`` back to ``shape`` (inverse of numpy broadcasting)."""
    g = grad
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _coerce_binary(a, b) -> tuple[DiffNode, DiffNode]:
    if isinstance(a, DiffNode) and isinstance(b, DiffNode):
        if a.dtype != b.dtype:
            raise ShapeMismatchError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
        return a, b
    if isinstance(a, DiffNode):
        return a, as_node(b, dtype=a.dtype)
    if isinstance(b, DiffNode):
        return as_node(a, dtype=b.dtype), b
    return as_node(a), as_node(b)


# --- elementwise arithmetic --------------------------------------------------


def add(a, b) -> DiffNode:
    a, b = _coerce_binary(a, b)
    out = a.values + b.values
    return make_node(
        out,
        (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(g, b.shape)),
        "add",
    )


def subtract(a, b) -> DiffNode:
    a, b = _coerce_binary(a, b)
    out = a.values - b.values
    return make_node(
        out,
        (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(-g, b.shape)),
        "subtract",
    )


def multiply(a, b) -> DiffNode:
    a, b = _coerce_binary(a, b)
    out = a.values * b.values
    return make_node(
        out,
        (a, b),
        (
            lambda g: _unbroadcast(g * b.values, a.shape),
            lambda g: _unbroadcast(g * a.values, b.shape),
        ),
        "multiply",
    )


def divide(a, b) -> DiffNode:
    a, b = _coerce_binary(a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.values / b.values
    return make_node(
        out,
        (a, b),
        (
            lambda g: _unbroadcast(g / b.values, a.shape),
            lambda g: _unbroadcast(-g * a.values / (b.values * b.values), b.shape),
        ),
        "divide",
    )


def negate(a) -> DiffNode:
    a = as_node(a)
    return make_node(-a.values, (a,), (lambda g: -g,), "negate")


def matmul(a, b) -> DiffNode:
    a, b = _coerce_binary(a, b)
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ShapeMismatchError(f"matmul needs 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = a.values @ b.values
    return make_node(
        out,
        (a, b),
        (lambda g: g @ b.values.T, lambda g: a.values.T @ g),
        "matmul",
    )


# --- elementwise nonlinearities ----------------------------------------------


def relu(a) -> DiffNode:
    a = as_node(a)
    out = np.maximum(a.values, 0)
    return make_node(out, (a,), (lambda g: g * (a.values > 0),), "relu")


def softplus(a) -> DiffNode:
    """log(1 + e^x), computed stably as max(x, 0) + log1p(e^{-|x|})."""
    a = as_node(a)
    x = a.values
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))

    def vjp(g):
        # sigmoid(x) = 1 - exp(-softplus(x)); out >= 0 so this never overflows
        return g * (1.0 - np.exp(-out))

    return make_node(out, (a,), (vjp,), "softplus")


def elu(a, alpha: float = 1.0) -> DiffNode:
    a = as_node(a)
    x = a.values
    neg = alpha * np.expm1(np.minimum(x, 0))
    out = np.where(x > 0, x, neg)
    return make_node(out, (a,), (lambda g: g * np.where(x > 0, 1.0, neg + alpha),), "elu")


def exp(a) -> DiffNode:
    a = as_node(a)
    with np.errstate(over="ignore"):  # overflow surfaces as NonFiniteValueError
        out = np.exp(a.values)
    return make_node(out, (a,), (lambda g: g * out,), "exp")


def absolute(a) -> DiffNode:
    a = as_node(a)
    return make_node(np.abs(a.values), (a,), (lambda g: g * np.sign(a.values),), "absolute")


def clip_max(a, cap: float) -> DiffNode:
    """min(x, cap); gradient passes where x <= cap."""
    a = as_node(a)
    out = np.minimum(a.values, cap)
    return make_node(out, (a,), (lambda g: g * (a.values <= cap),), "clip_max")


def gaussian_kernel(a, alpha: float) -> DiffNode:
    """exp(-x^2 / (2 alpha^2)) elementwise; alpha = inf gives a constant 1 kernel."""
    a = as_node(a)
    if math.isinf(alpha):
        out = np.ones_like(a.values)
        return make_node(out, (a,), (lambda g: np.zeros_like(a.values),), "gaussian_kernel")
    inv2a2 = 1.0 / (2.0 * alpha * alpha)
    out = np.exp(-a.values * a.values * inv2a2)
    return make_node(
        out, (a,), (lambda g: g * out * (-a.values / (alpha * alpha)),), "gaussian_kernel"
    )


# --- shape manipulation -------------------------------------------------------


def reshape(a, shape) -> DiffNode:
    a = as_node(a)
    out = a.values.reshape(shape)
    return make_node(out, (a,), (lambda g: g.reshape(a.shape),), "reshape")


def broadcast(a, shape) -> DiffNode:
    # read-only view; downstream ops never mutate node values
    a = as_node(a)
    out = np.broadcast_to(a.values, shape)
    return make_node(out, (a,), (lambda g: _unbroadcast(g, a.shape),), "broadcast")


def concat(nodes, axis: int = 0) -> DiffNode:
    nodes = [as_node(n) for n in nodes]
    if not nodes:
        raise ShapeMismatchError("concat of zero nodes")
    out = np.concatenate([n.values for n in nodes], axis=axis)
    sizes = [n.shape[axis] for n in nodes]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(k):
        lo, hi = offsets[k], offsets[k + 1]

        def vjp(g):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            return g[tuple(index)]

        return vjp

    return make_node(out, tuple(nodes), tuple(make_vjp(k) for k in range(len(nodes))), "concat")


# --- reductions ----------------------------------------------------------------


def sum_reduce(a, axis=None) -> DiffNode:
    a = as_node(a)
    out = np.sum(a.values, axis=axis)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.shape).copy()
        return np.broadcast_to(np.expand_dims(g, axis), a.shape).copy()

    return make_node(np.asarray(out), (a,), (vjp,), "sum_reduce")


def mean_reduce(a, axis=None) -> DiffNode:
    a = as_node(a)
    out = np.mean(a.values, axis=axis)
    n = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g / n, a.shape).copy()
        return np.broadcast_to(np.expand_dims(g, axis), a.shape) / n

    return make_node(np.asarray(out), (a,), (vjp,), "mean_reduce")


def variance_reduce(a, axis=None) -> DiffNode:
    """Population variance (ddof 0) along ``axis``.

    d var / d x_i = 2 (x_i - mean) / n; the cross-term through the mean cancels.
    """
    a = as_node(a)
    out = np.var(a.values, axis=axis)
    mu = np.mean(a.values, axis=axis, keepdims=True)
    n = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])

    def vjp(g):
        ge = g if axis is None else np.expand_dims(g, axis)
        return (2.0 / n) * ge * (a.values - mu)

    return make_node(np.asarray(out), (a,), (vjp,), "variance_reduce")


def softmax(a, axis: int = -1) -> DiffNode:
    a = as_node(a)
    shifted = a.values - np.max(a.values, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g):
        inner = np.sum(g * out, axis=axis, keepdims=True)
        return out * (g - inner)

    return make_node(out, (a,), (vjp,), "softmax")


def cumsum(a, axis: int = -1, exclusive: bool = False) -> DiffNode:
    """Running sum along ``axis``; exclusive mode yields [0, x0, x0+x1, ...]."""
    a = as_node(a)
    inc = np.cumsum(a.values, axis=axis)
    if exclusive:
        moved = np.moveaxis(inc, axis, -1)
        shifted = np.concatenate(
            [np.zeros_like(moved[..., :1]), moved[..., :-1]], axis=-1
        )
        out = np.moveaxis(shifted, -1, axis)
    else:
        out = inc

    def vjp(g):
        # dL/dx_j = sum over downstream outputs that include x_j
        gf = np.flip(g, axis=axis)
        rev = np.flip(np.cumsum(gf, axis=axis), axis=axis)
        if exclusive:
            return rev - g
        return rev

    return make_node(out, (a,), (vjp,), "cumsum")


# --- convolution family ---------------------------------------------------------


def _im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int) -> np.ndarray:
    """[Hp, Wp, C] -> [Ho, Wo, kh*kw*C] patch matrix (copies)."""
    windows = sliding_window_view(xp, (kh, kw), axis=(0, 1))  # [Ho', Wo', C, kh, kw]
    windows = windows[::sh, ::sw]
    ho, wo = windows.shape[0], windows.shape[1]
    return windows.transpose(0, 1, 3, 4, 2).reshape(ho, wo, kh * kw * xp.shape[2])


def conv2d(x, w, stride=1, padding=0) -> DiffNode:
    """2-d cross-correlation of [H, W, Cin] with [kh, kw, Cin, Cout].

    Zero padding on both sides; output [Ho, Wo, Cout] with
    Ho = (H + 2 ph - kh) // sh + 1.
    """
    x, w = as_node(x), as_node(w)
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if x.values.ndim != 3 or w.values.ndim != 4:
        raise ShapeMismatchError(f"conv2d expects [H,W,C] x [kh,kw,Cin,Cout], got {x.shape}, {w.shape}")
    H, W, cin = x.shape
    kh, kw, wcin, cout = w.shape
    if wcin != cin:
        raise ShapeMismatchError(f"conv2d channel mismatch: input {cin}, kernel {wcin}")
    hp, wp = H + 2 * ph, W + 2 * pw
    if hp < kh or wp < kw:
        raise ShapeMismatchError("conv2d kernel larger than padded input")

    xp = np.pad(x.values, ((ph, ph), (pw, pw), (0, 0)))
    cols = _im2col(xp, kh, kw, sh, sw)  # [Ho, Wo, kh*kw*Cin]
    ho, wo = cols.shape[0], cols.shape[1]
    cols2 = cols.reshape(ho * wo, -1)
    wmat = w.values.reshape(kh * kw * cin, cout)
    out = (cols2 @ wmat).reshape(ho, wo, cout)

    def vjp_x(g):
        gcols = (g.reshape(ho * wo, cout) @ wmat.T).reshape(ho, wo, kh, kw, cin)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[i : i + sh * ho : sh, j : j + sw * wo : sw] += gcols[:, :, i, j, :]
        return gxp[ph : ph + H, pw : pw + W]

    def vjp_w(g):
        return (cols2.T @ g.reshape(ho * wo, cout)).reshape(kh, kw, cin, cout)

    return make_node(out, (x, w), (vjp_x, vjp_w), "conv2d")


def transposed_conv2d(x, w, stride=1, padding=0) -> DiffNode:
    """Gradient-of-conv upsampling: [H, W, Cin] -> [(H-1) sh + kh - 2 ph, ..., Cout]."""
    x, w = as_node(x), as_node(w)
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if x.values.ndim != 3 or w.values.ndim != 4:
        raise ShapeMismatchError(
            f"transposed_conv2d expects [H,W,C] x [kh,kw,Cin,Cout], got {x.shape}, {w.shape}"
        )
    H, W, cin = x.shape
    kh, kw, wcin, cout = w.shape
    if wcin != cin:
        raise ShapeMismatchError(f"transposed_conv2d channel mismatch: input {cin}, kernel {wcin}")
    hf = (H - 1) * sh + kh
    wf = (W - 1) * sw + kw
    ho, wo = hf - 2 * ph, wf - 2 * pw
    if ho <= 0 or wo <= 0:
        raise ShapeMismatchError("transposed_conv2d padding consumes entire output")

    w_r = w.values.transpose(2, 0, 1, 3).reshape(cin, kh * kw * cout)
    cols = (x.values.reshape(H * W, cin) @ w_r).reshape(H, W, kh, kw, cout)
    full = np.zeros((hf, wf, cout), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            full[i : i + sh * (H - 1) + 1 : sh, j : j + sw * (W - 1) + 1 : sw] += cols[:, :, i, j, :]
    out = full[ph : hf - ph, pw : wf - pw]

    def _regather(g):
        gf = np.zeros((hf, wf, cout), dtype=g.dtype)
        gf[ph : hf - ph, pw : wf - pw] = g
        gcols = np.empty((H, W, kh, kw, cout), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gcols[:, :, i, j, :] = gf[i : i + sh * (H - 1) + 1 : sh, j : j + sw * (W - 1) + 1 : sw]
        return gcols.reshape(H * W, kh * kw * cout)

    def vjp_x(g):
        return (_regather(g) @ w_r.T).reshape(H, W, cin)

    def vjp_w(g):
        gw = x.values.reshape(H * W, cin).T @ _regather(g)
        return gw.reshape(cin, kh, kw, cout).transpose(1, 2, 0, 3)

    return make_node(out.copy(), (x, w), (vjp_x, vjp_w), "transposed_conv2d")


def group_norm(x, gamma, beta, groups: int, eps: float = 1e-5) -> DiffNode:
    """Group normalization over an [H, W, C] grid.

    Channels split into ``groups`` groups; mean/variance taken over
    (H, W, C/groups) per group, then a per-channel affine.
    """
    x, gamma, beta = as_node(x), as_node(gamma), as_node(beta)
    if x.values.ndim != 3:
        raise ShapeMismatchError(f"group_norm expects [H,W,C], got {x.shape}")
    H, W, C = x.shape
    if C % groups != 0:
        raise ShapeMismatchError(f"channels {C} not divisible by groups {groups}")
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeMismatchError("group_norm affine params must have shape [C]")
    cg = C // groups
    n = H * W * cg

    xg = x.values.reshape(H, W, groups, cg)
    mu = xg.mean(axis=(0, 1, 3), keepdims=True)
    var = xg.var(axis=(0, 1, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat_g = (xg - mu) * inv
    xhat = xhat_g.reshape(H, W, C)
    out = xhat * gamma.values + beta.values

    def vjp_x(g):
        dxhat = (g * gamma.values).reshape(H, W, groups, cg)
        m1 = dxhat.mean(axis=(0, 1, 3), keepdims=True)
        m2 = (dxhat * xhat_g).mean(axis=(0, 1, 3), keepdims=True)
        dx = inv * (dxhat - m1 - xhat_g * m2)
        return dx.reshape(H, W, C)

    def vjp_gamma(g):
        return (g * xhat).sum(axis=(0, 1))

    def vjp_beta(g):
        return g.sum(axis=(0, 1))

    return make_node(out, (x, gamma, beta), (vjp_x, vjp_gamma, vjp_beta), "group_norm")


# --- grid sampling ----------------------------------------------------------------


def bilinear_sample(grid, uv) -> DiffNode:
    """Bilinear interpolation of a [H, W, C] grid at [M, 2] (row, col) coordinates.

    Coordinates outside [0, H-1] x [0, W-1] (or non-finite) produce exact
    zeros with zero gradient. Gradient flows into the grid always, and into
    ``uv`` too when it is a DiffNode.
    """
    grid = as_node(grid)
    uv_node = uv if isinstance(uv, DiffNode) else None
    uq = uv.values if uv_node is not None else np.asarray(uv)
    if grid.values.ndim != 3 or uq.ndim != 2 or uq.shape[1] != 2:
        raise ShapeMismatchError(f"bilinear_sample expects [H,W,C] grid and [M,2] uv, got {grid.shape}, {uq.shape}")
    H, W, C = grid.shape
    gv = grid.values

    r, c = uq[:, 0], uq[:, 1]
    valid = np.isfinite(r) & np.isfinite(c) & (r >= 0) & (r <= H - 1) & (c >= 0) & (c <= W - 1)
    rs = np.where(valid, r, 0.0)
    cs = np.where(valid, c, 0.0)
    i0 = np.floor(rs).astype(np.intp)
    j0 = np.floor(cs).astype(np.intp)
    i0 = np.clip(i0, 0, H - 1)
    j0 = np.clip(j0, 0, W - 1)
    fr = (rs - i0).astype(gv.dtype)
    fc = (cs - j0).astype(gv.dtype)
    i1 = np.minimum(i0 + 1, H - 1)
    j1 = np.minimum(j0 + 1, W - 1)

    vmask = valid.astype(gv.dtype)
    w00 = (1 - fr) * (1 - fc) * vmask
    w01 = (1 - fr) * fc * vmask
    w10 = fr * (1 - fc) * vmask
    w11 = fr * fc * vmask

    out = (
        w00[:, None] * gv[i0, j0]
        + w01[:, None] * gv[i0, j1]
        + w10[:, None] * gv[i1, j0]
        + w11[:, None] * gv[i1, j1]
    )

    def vjp_grid(g):
        # one flat bincount over (cell, channel) pairs per stencil corner
        ch_offsets = np.arange(C, dtype=np.intp)
        acc = np.zeros(H * W * C, dtype=np.float64)
        for idx, wgt in (
            (i0 * W + j0, w00),
            (i0 * W + j1, w01),
            (i1 * W + j0, w10),
            (i1 * W + j1, w11),
        ):
            flat_idx = (idx[:, None] * C + ch_offsets).ravel()
            vals = (g * wgt[:, None]).ravel()
            acc += np.bincount(flat_idx, weights=vals, minlength=H * W * C)
        return acc.reshape(H, W, C).astype(gv.dtype)

    vjps = [vjp_grid]
    parents = [grid]
    if uv_node is not None:
        def vjp_uv(g):
            dr = (1 - fc)[:, None] * (gv[i1, j0] - gv[i0, j0]) + fc[:, None] * (gv[i1, j1] - gv[i0, j1])
            dc = (1 - fr)[:, None] * (gv[i0, j1] - gv[i0, j0]) + fr[:, None] * (gv[i1, j1] - gv[i1, j0])
            gr = np.sum(g * dr, axis=1) * vmask
            gc = np.sum(g * dc, axis=1) * vmask
            return np.stack([gr, gc], axis=1)

        parents.append(uv_node)
        vjps.append(vjp_uv)

    return make_node(out, tuple(parents), tuple(vjps), "bilinear_sample")
