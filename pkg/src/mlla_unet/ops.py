"""Differentiable operation catalog.

Every function takes :class:`Tensor` (or array-like) arguments, computes its
result with numpy, and records the backward rule on the output.  Convolutions
are cross-correlations (no kernel flip), as in every mainstream framework.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import ConfigError, ShapeError
from .tensor import Tensor, make_result, record_macs

LN_EPS = 1e-5


def _t(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary(a, b):
    if isinstance(a, Tensor):
        return a, _t(b, a)
    b = _t(b)
    return _t(a, b), b


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _binary(a, b)
    out = a.data + b.data
    return make_result(
        "add", out, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _binary(a, b)
    out = a.data - b.data
    return make_result(
        "sub", out, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _binary(a, b)
    out = a.data * b.data
    return make_result(
        "mul", out, (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        ),
    )


def div(a, b) -> Tensor:
    a, b = _binary(a, b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result("div", out, (a, b), bw)


def neg(a) -> Tensor:
    a = _t(a)
    return make_result("neg", -a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = _t(a)
    out = np.exp(a.data)
    return make_result("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _t(a)
    out = np.log(a.data)
    return make_result("log", out, (a,), lambda g: (g / a.data,))


def clamp_min(a, lo: float) -> Tensor:
    a = _t(a)
    keep = a.data >= lo
    out = np.where(keep, a.data, a.dtype.type(lo))
    return make_result("clamp_min", out, (a,), lambda g: (g * keep,))


def gelu(a) -> Tensor:
    """Exact (erf) GELU."""
    a = _t(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    out = x * cdf

    def bw(g):
        pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        return (g * (cdf + x * pdf),)

    return make_result("gelu", out.astype(x.dtype, copy=False), (a,), bw)


def silu(a) -> Tensor:
    a = _t(a)
    x = a.data
    sig = 1.0 / (1.0 + np.exp(-x))
    out = x * sig
    return make_result("silu", out, (a,), lambda g: (g * sig * (1.0 + x * (1.0 - sig)),))


def elu(a) -> Tensor:
    a = _t(a)
    x = a.data
    pos = x > 0
    ex = np.exp(np.minimum(x, 0))
    out = np.where(pos, x, ex - 1)
    return make_result("elu", out, (a,), lambda g: (g * np.where(pos, 1, ex).astype(x.dtype),))


def elu_plus_one(a) -> Tensor:
    """``elu(x) + 1`` evaluated without the cancellation of ``(exp(x) - 1) + 1``."""
    a = _t(a)
    x = a.data
    pos = x > 0
    ex = np.exp(np.minimum(x, 0))
    out = np.where(pos, x + 1, ex)
    return make_result("elu_plus_one", out, (a,), lambda g: (g * np.where(pos, 1, ex).astype(x.dtype),))


# ---------------------------------------------------------------------------
# reductions and layout


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _t(a)
    axes = _norm_axes(axis, a.ndim)
    out = np.sum(a.data, axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_result("sum", np.asarray(out), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _t(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum(a, axis=axes, keepdims=keepdims), a.dtype.type(1.0 / count))


def reshape(a, shape) -> Tensor:
    a = _t(a)
    out = a.data.reshape(shape)
    return make_result("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = _t(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return make_result("transpose", out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    ts = [_t(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result("concat", out, ts, bw)


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes (numpy broadcasting on the rest)."""
    a, b = _binary(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    record_macs(out.size * a.shape[-1])

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return make_result("matmul", out, (a, b), bw)


def softmax(a, axis: int = -1) -> Tensor:
    a = _t(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result("softmax", out, (a,), bw)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _t(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_result("log_softmax", out, (a,), bw)


def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` with ``w`` stored as [in, out]."""
    y = matmul(x, w)
    return add(y, b) if b is not None else y


# ---------------------------------------------------------------------------
# normalization


def layer_norm(x, gamma, beta, eps: float = LN_EPS) -> Tensor:
    """Normalize over the last axis, then apply ``gamma * xhat + beta``."""
    x, gamma, beta = _t(x), _t(gamma), _t(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match C={c}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        dbeta = g.sum(axis=lead) if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            dx = rstd * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        return dx, dgamma, dbeta

    return make_result("layer_norm", out, (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# rotary embedding


def rotate_pairs(x, cos, sin) -> Tensor:
    """Rotate consecutive pairs ``(x[2i], x[2i+1])`` by the angle with ``cos``/``sin``.

    ``cos`` and ``sin`` are plain arrays broadcastable to ``x.shape[:-1] + (d/2,)``.
    """
    x = _t(x)
    d = x.shape[-1]
    if d % 2:
        raise ConfigError(f"pairwise rotation needs an even last axis, got {d}")
    cos = np.asarray(cos, dtype=x.dtype)
    sin = np.asarray(sin, dtype=x.dtype)

    def rot(v, s):
        pairs = v.reshape(v.shape[:-1] + (d // 2, 2))
        ev, od = pairs[..., 0], pairs[..., 1]
        res = np.empty_like(pairs)
        res[..., 0] = ev * cos - od * s
        res[..., 1] = ev * s + od * cos
        return res.reshape(v.shape)

    out = rot(x.data, sin)
    return make_result("rotate_pairs", out, (x,), lambda g: (rot(g, -sin),))


# ---------------------------------------------------------------------------
# convolution


@dataclass(frozen=True)
class ConvSpec:
    kernel_size: int
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        if self.kernel_size < 1 or self.stride < 1 or self.groups < 1 or self.padding < 0:
            raise ConfigError(f"invalid convolution spec {self}")

    def out_extent(self, n: int) -> int:
        o = (n + 2 * self.padding - self.kernel_size) // self.stride + 1
        if o < 1:
            raise ShapeError(f"convolution {self} on extent {n} gives degenerate output extent {o}")
        return o


def _check_conv(x_shape, w_shape, spec: ConvSpec):
    if len(x_shape) != 4 or len(w_shape) != 4:
        raise ShapeError(f"conv expects NCHW input and OIkk weight, got {x_shape} and {w_shape}")
    _, c, h, w = x_shape
    o, cg, kh, kw = w_shape
    g = spec.groups
    if kh != spec.kernel_size or kw != spec.kernel_size:
        raise ShapeError(f"weight kernel {kh}x{kw} does not match spec k={spec.kernel_size}")
    if c % g or o % g:
        raise ShapeError(f"groups={g} must divide C_in={c} and C_out={o}")
    if cg != c // g:
        raise ShapeError(f"weight expects {cg} channels per group, input provides {c // g}")
    return spec.out_extent(h), spec.out_extent(w)


def _taps(spec: ConvSpec, ho: int, wo: int):
    s, k = spec.stride, spec.kernel_size
    for i in range(k):
        for j in range(k):
            yield i, j, (slice(None), slice(None), slice(i, i + s * (ho - 1) + 1, s), slice(j, j + s * (wo - 1) + 1, s))


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _is_depthwise(c: int, spec: ConvSpec, cg: int) -> bool:
    return spec.groups == c and cg == 1


def _conv_fwd(x: np.ndarray, w: np.ndarray, spec: ConvSpec) -> np.ndarray:
    ho, wo = _check_conv(x.shape, w.shape, spec)
    n, c, _, _ = x.shape
    o, cg, k, _ = w.shape
    record_macs(n * o * ho * wo * cg * k * k)
    xp = _pad(x, spec.padding)
    if _is_depthwise(c, spec, cg):
        m = o // c
        if m > 1:
            xp = np.repeat(xp, m, axis=1)
        out = np.zeros((n, o, ho, wo), dtype=x.dtype)
        for i, j, sl in _taps(spec, ho, wo):
            out += xp[sl] * w[:, 0, i, j][None, :, None, None]
        return out
    g = spec.groups
    og = o // g
    outs = []
    for gi in range(g):
        xg = xp[:, gi * cg:(gi + 1) * cg]
        cols = sliding_window_view(xg, (k, k), axis=(2, 3))[:, :, ::spec.stride, ::spec.stride][:, :, :ho, :wo]
        mat = cols.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cg * k * k)
        wg = w[gi * og:(gi + 1) * og].reshape(og, cg * k * k)
        outs.append((mat @ wg.T).reshape(n, ho, wo, og))
    res = outs[0] if g == 1 else np.concatenate(outs, axis=-1)
    return np.ascontiguousarray(res.transpose(0, 3, 1, 2))


def _conv_input_grad(gout: np.ndarray, w: np.ndarray, x_shape, spec: ConvSpec) -> np.ndarray:
    """Adjoint of :func:`_conv_fwd` with respect to its input."""
    n, c, h, wd = x_shape
    o, cg, k, _ = w.shape
    ho, wo = _check_conv(x_shape, w.shape, spec)
    if gout.shape != (n, o, ho, wo):
        raise ShapeError(f"gradient shape {gout.shape} does not match conv output {(n, o, ho, wo)}")
    p = spec.padding
    dxp = np.zeros((n, c, h + 2 * p, wd + 2 * p), dtype=gout.dtype)
    if _is_depthwise(c, spec, cg):
        m = o // c
        for i, j, sl in _taps(spec, ho, wo):
            contrib = gout * w[:, 0, i, j][None, :, None, None]
            if m > 1:
                contrib = contrib.reshape(n, c, m, ho, wo).sum(axis=2)
            dxp[sl] += contrib
    else:
        g = spec.groups
        og = o // g
        for gi in range(g):
            gg = gout[:, gi * og:(gi + 1) * og].transpose(0, 2, 3, 1).reshape(-1, og)
            wg = w[gi * og:(gi + 1) * og].reshape(og, cg * k * k)
            dcols = (gg @ wg).reshape(n, ho, wo, cg, k, k)
            for i, j, sl in _taps(spec, ho, wo):
                dxp[:, gi * cg:(gi + 1) * cg][sl] += dcols[..., i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, p:p + h, p:p + wd]


def _conv_weight_grad(x: np.ndarray, gout: np.ndarray, w_shape, spec: ConvSpec) -> np.ndarray:
    ho, wo = _check_conv(x.shape, w_shape, spec)
    n, c, _, _ = x.shape
    o, cg, k, _ = w_shape
    xp = _pad(x, spec.padding)
    dw = np.zeros(w_shape, dtype=gout.dtype)
    if _is_depthwise(c, spec, cg):
        m = o // c
        if m > 1:
            xp = np.repeat(xp, m, axis=1)
        for i, j, sl in _taps(spec, ho, wo):
            dw[:, 0, i, j] = (gout * xp[sl]).sum(axis=(0, 2, 3))
        return dw
    g = spec.groups
    og = o // g
    for gi in range(g):
        xg = xp[:, gi * cg:(gi + 1) * cg]
        cols = sliding_window_view(xg, (k, k), axis=(2, 3))[:, :, ::spec.stride, ::spec.stride][:, :, :ho, :wo]
        mat = cols.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cg * k * k)
        gg = gout[:, gi * og:(gi + 1) * og].transpose(1, 0, 2, 3).reshape(og, -1)
        dw[gi * og:(gi + 1) * og] = (gg @ mat).reshape(og, cg, k, k)
    return dw


def conv2d(x, w, b=None, spec: ConvSpec = ConvSpec(1)) -> Tensor:
    """2-D cross-correlation of NCHW ``x`` with OIkk ``w``."""
    x = _t(x)
    w = _t(w, x)
    out = _conv_fwd(x.data, w.data, spec)
    inputs = [x, w]
    if b is not None:
        b = _t(b, x)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"bias shape {b.shape} does not match C_out={w.shape[0]}")
        out = out + b.data[None, :, None, None]
        inputs.append(b)

    def bw(g):
        gx = _conv_input_grad(g, w.data, x.shape, spec) if x.requires_grad else None
        gw = _conv_weight_grad(x.data, g, w.shape, spec) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return make_result("conv2d", out, inputs, bw)


UPSAMPLE_SPEC_K = 3


def transposed_conv2d(x, w, b=None, spec: Optional[ConvSpec] = None, output_padding: int = 1) -> Tensor:
    """Transposed convolution that doubles both spatial extents.

    ``w`` is laid out [C_in, C_out/groups, k, k].  The forward pass is the
    input-gradient of the matching stride-2 :func:`conv2d`.
    """
    x = _t(x)
    w = _t(w, x)
    if x.ndim != 4:
        raise ShapeError(f"transposed_conv2d expects NCHW input, got {x.shape}")
    n, cin, h, wd = x.shape
    if spec is None:
        spec = ConvSpec(UPSAMPLE_SPEC_K, stride=2, padding=1, groups=cin)
    ho = (h - 1) * spec.stride - 2 * spec.padding + spec.kernel_size + output_padding
    wo = (wd - 1) * spec.stride - 2 * spec.padding + spec.kernel_size + output_padding
    if (ho, wo) != (2 * h, 2 * wd):
        raise ConfigError(
            f"transposed conv {spec} with output_padding={output_padding} maps {h}x{wd} to {ho}x{wo}, not 2x"
        )
    if w.shape[0] != cin:
        raise ShapeError(f"weight expects {w.shape[0]} input channels, got {cin}")
    cout = w.shape[1] * spec.groups
    y_shape = (n, cout, ho, wo)
    out = _conv_input_grad(x.data, w.data, y_shape, spec)
    record_macs(n * cin * h * wd * w.shape[1] * spec.kernel_size ** 2)
    inputs = [x, w]
    if b is not None:
        b = _t(b, x)
        if b.shape != (cout,):
            raise ShapeError(f"bias shape {b.shape} does not match C_out={cout}")
        out = out + b.data[None, :, None, None]
        inputs.append(b)

    def bw(g):
        gx = _conv_fwd(g, w.data, spec) if x.requires_grad else None
        gw = _conv_weight_grad(g, x.data, w.shape, spec) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return make_result("transposed_conv2d", out, inputs, bw)
