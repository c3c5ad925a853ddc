"""Differentiable operations over :class:`~sarunet.tensor.Tensor4`.

Every public function computes forward values eagerly and registers a
backward rule on the active tape. Conventions fixed here for bit-stable
tests: relu'(0) = 0, max-pool ties break to the first index in row-major
window order, bilinear upsampling uses the corner-aligned-false mapping
``src = (dst + 0.5) / 2 - 0.5`` with clamping.

Convolution ships two code paths: ``im2col`` (patch matrix + BLAS matmul,
the default) and ``direct`` (sliding-window accumulation kept as an
in-library reference). Both produce the same function; the test suite holds
an additional fully scalar loop oracle.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .errors import ConfigurationError, DimensionError, UsageError
from .tensor import Tensor4, make_result

__all__ = [
    "conv2d", "batch_norm", "relu", "sigmoid", "add", "sub", "mul",
    "mul_broadcast", "smul", "concat_channels", "slice_channels",
    "max_pool2", "upsample_bilinear2", "global_pool", "sum_all", "mean_all",
]


def _same_dtype(*tensors: Tensor4) -> np.dtype:
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise UsageError(f"mixed dtypes {dt} vs {t.dtype}; build all tensors in one precision")
    return dt


# -- convolution -------------------------------------------------------------

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c, _, _ = xp.shape
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, n: int, c: int, hp: int, wp: int,
            kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    xp = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    cols6 = cols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols6[:, :, i, j]
    return xp


def _conv_shapes(x: Tensor4, weight: Tensor4, bias: Optional[Tensor4],
                 stride: int, padding: int, groups: int):
    n, cin, h, w = x.shape
    cout, cin_g, kh, kw = weight.shape
    if groups < 1:
        raise ConfigurationError(f"groups must be >= 1, got {groups}")
    if cin % groups != 0 or cout % groups != 0:
        raise DimensionError(
            f"channels not divisible by groups: cin={cin}, cout={cout}, groups={groups}")
    if cin_g != cin // groups:
        raise DimensionError(
            f"weight expects {cin_g} input channels per group, input provides {cin // groups}")
    if stride < 1 or padding < 0:
        raise ConfigurationError(f"invalid stride={stride} / padding={padding}")
    ho, rem_h = divmod(h + 2 * padding - kh, stride)
    wo, rem_w = divmod(w + 2 * padding - kw, stride)
    ho += 1
    wo += 1
    if rem_h != 0 or rem_w != 0 or ho < 1 or wo < 1:
        raise ConfigurationError(
            f"non-integral or empty conv output for input {h}x{w}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {padding}")
    if bias is not None and bias.shape != (1, cout, 1, 1):
        raise DimensionError(f"bias must have shape (1,{cout},1,1), got {bias.shape}")
    return n, cin, h, w, cout, kh, kw, ho, wo


def _conv_forward_im2col(x, w, stride, padding, groups, ho, wo):
    n, cin = x.shape[:2]
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    k = (cin // groups) * kh * kw
    colsg = cols.reshape(n, groups, k, ho * wo)
    wg = w.reshape(groups, cout // groups, k)
    out = np.matmul(wg[None, :, :, :], colsg)          # [n, g, cout/g, L]
    return out.reshape(n, cout, ho, wo), cols


def _conv_forward_direct(x, w, stride, padding, groups, ho, wo):
    n, cin = x.shape[:2]
    cout, cin_g, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    out = np.zeros((n, cout, ho, wo), dtype=x.dtype)
    og = cout // groups
    for o in range(cout):
        g = o // og
        for ci in range(cin_g):
            src = xp[:, g * cin_g + ci]
            for i in range(kh):
                for j in range(kw):
                    out[:, o] += w[o, ci, i, j] * src[:, i:i + stride * ho:stride,
                                                      j:j + stride * wo:stride]
    return out


def conv2d(x: Tensor4, weight: Tensor4, bias: Optional[Tensor4] = None, *,
           stride: int = 1, padding: int = 0, groups: int = 1,
           method: str = "im2col") -> Tensor4:
    """Grouped 2-d cross-correlation with zero padding.

    ``weight`` is ``[cout, cin/groups, kh, kw]``; ``bias``, when given, is a
    per-output-channel vector stored as ``[1, cout, 1, 1]``. ``groups=cin``
    yields a depthwise convolution.
    """
    _same_dtype(*( (x, weight) + ((bias,) if bias is not None else ()) ))
    n, cin, h, w_in, cout, kh, kw, ho, wo = _conv_shapes(x, weight, bias, stride, padding, groups)
    if method == "im2col":
        out, cols = _conv_forward_im2col(x.data, weight.data, stride, padding, groups, ho, wo)
    elif method == "direct":
        out = _conv_forward_direct(x.data, weight.data, stride, padding, groups, ho, wo)
        cols = None
    else:
        raise UsageError(f"unknown conv method {method!r}; use 'im2col' or 'direct'")
    if bias is not None:
        out = out + bias.data
    k = (cin // groups) * kh * kw
    hp, wp = h + 2 * padding, w_in + 2 * padding

    def backward_fn(gout: np.ndarray):
        nonlocal cols
        if cols is None:  # direct path shares the im2col backward
            xp = (np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
                  if padding else x.data)
            cols = _im2col(xp, kh, kw, stride, ho, wo)
        go = gout.reshape(n, groups, cout // groups, ho * wo)
        colsg = cols.reshape(n, groups, k, ho * wo)
        wg = weight.data.reshape(groups, cout // groups, k)
        dw = np.matmul(go, colsg.transpose(0, 1, 3, 2)).sum(axis=0).reshape(weight.shape)
        dcols = np.matmul(wg.transpose(0, 2, 1)[None, :, :, :], go)
        dxp = _col2im(dcols.reshape(n, cin * kh * kw, ho * wo),
                      n, cin, hp, wp, kh, kw, stride, ho, wo)
        dx = dxp[:, :, padding:hp - padding, padding:wp - padding] if padding else dxp
        grads = [dx, dw]
        if bias is not None:
            grads.append(gout.sum(axis=(0, 2, 3)).reshape(1, cout, 1, 1))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, "conv2d", inputs, backward_fn)


# -- batch normalization ------------------------------------------------------

def batch_norm(x: Tensor4, gamma: Tensor4, beta: Tensor4,
               running_mean: np.ndarray, running_var: np.ndarray, *,
               train: bool, eps: float = 1e-5, momentum: float = 0.1) -> Tensor4:
    """Per-channel normalization over ``(n, h, w)``.

    Train mode uses biased batch statistics and folds them into the running
    buffers in place (``running = (1-momentum)*running + momentum*batch``);
    eval mode normalizes with the running buffers. Differentiable w.r.t.
    input, gamma and beta in both modes.
    """
    _same_dtype(x, gamma, beta)
    n, c, h, w = x.shape
    if gamma.shape != (1, c, 1, 1) or beta.shape != (1, c, 1, 1):
        raise DimensionError(f"gamma/beta must be (1,{c},1,1), got {gamma.shape}/{beta.shape}")
    if running_mean.shape != (c,) or running_var.shape != (c,):
        raise DimensionError(f"running stats must be ({c},)")
    m = n * h * w
    if train and m < 2:
        raise DimensionError(f"batch_norm train mode needs n*h*w >= 2, got {m}")
    dt = x.dtype
    if train:
        mean = x.data.mean(axis=(0, 2, 3), dtype=dt)
        var = x.data.var(axis=(0, 2, 3), dtype=dt)     # biased
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mean.astype(running_mean.dtype)
        running_var *= (1.0 - momentum)
        running_var += momentum * var.astype(running_var.dtype)
    else:
        mean = running_mean.astype(dt)
        var = running_var.astype(dt)
    inv_std = 1.0 / np.sqrt(var + dt.type(eps))
    xhat = (x.data - mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
    out = gamma.data * xhat + beta.data

    def backward_fn(gout: np.ndarray):
        dgamma = (gout * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
        dbeta = gout.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
        dxhat = gout * gamma.data
        istd = inv_std.reshape(1, c, 1, 1)
        if train:
            mean_dxhat = dxhat.mean(axis=(0, 2, 3), keepdims=True)
            mean_dxhat_xhat = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
            dx = istd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)
        else:
            dx = istd * dxhat
        return [dx, dgamma, dbeta]

    return make_result(out, "batch_norm", (x, gamma, beta), backward_fn)


# -- elementwise --------------------------------------------------------------

def relu(x: Tensor4) -> Tensor4:
    out = np.maximum(x.data, 0)
    mask = x.data > 0  # subgradient at 0 fixed to 0

    def backward_fn(gout):
        return [gout * mask]

    return make_result(out, "relu", (x,), backward_fn)


def sigmoid(x: Tensor4) -> Tensor4:
    # numerically stable split over sign
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward_fn(gout):
        return [gout * out * (1.0 - out)]

    return make_result(out, "sigmoid", (x,), backward_fn)


def _check_same_shape(a: Tensor4, b: Tensor4, opname: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{opname} needs equal shapes, got {a.shape} vs {b.shape}")


def add(a: Tensor4, b: Tensor4) -> Tensor4:
    _same_dtype(a, b)
    _check_same_shape(a, b, "add")
    return make_result(a.data + b.data, "add", (a, b), lambda g: [g, g])


def sub(a: Tensor4, b: Tensor4) -> Tensor4:
    _same_dtype(a, b)
    _check_same_shape(a, b, "sub")
    return make_result(a.data - b.data, "sub", (a, b), lambda g: [g, -g])


def mul(a: Tensor4, b: Tensor4) -> Tensor4:
    """Elementwise product of equal shapes."""
    _same_dtype(a, b)
    _check_same_shape(a, b, "mul")
    return make_result(a.data * b.data, "mul", (a, b),
                       lambda g: [g * b.data, g * a.data])


def smul(x: Tensor4, scalar: float) -> Tensor4:
    """Multiply by a python scalar constant."""
    s = x.dtype.type(scalar)
    return make_result(x.data * s, "smul", (x,), lambda g: [g * s])


def mul_broadcast(a: Tensor4, b: Tensor4) -> Tensor4:
    """Gate ``a`` with a per-channel ``[n,c,1,1]`` or per-pixel ``[n,1,h,w]`` factor."""
    _same_dtype(a, b)
    n, c, h, w = a.shape
    if b.shape == (n, c, 1, 1):
        reduce_axes = (2, 3)
    elif b.shape == (n, 1, h, w):
        reduce_axes = (1,)
    else:
        raise DimensionError(
            f"mul_broadcast factor must be ({n},{c},1,1) or ({n},1,{h},{w}), got {b.shape}")

    def backward_fn(gout):
        da = gout * b.data
        db = (gout * a.data).sum(axis=reduce_axes, keepdims=True)
        return [da, db]

    return make_result(a.data * b.data, "mul_broadcast", (a, b), backward_fn)


def concat_channels(a: Tensor4, b: Tensor4) -> Tensor4:
    _same_dtype(a, b)
    na, ca, ha, wa = a.shape
    nb, cb, hb, wb = b.shape
    if (na, ha, wa) != (nb, hb, wb):
        raise DimensionError(f"concat_channels needs matching n/h/w, got {a.shape} vs {b.shape}")
    out = np.concatenate([a.data, b.data], axis=1)

    def backward_fn(gout):
        return [gout[:, :ca], gout[:, ca:]]

    return make_result(out, "concat_channels", (a, b), backward_fn)


def slice_channels(x: Tensor4, start: int, stop: int) -> Tensor4:
    n, c, h, w = x.shape
    if not (0 <= start < stop <= c):
        raise DimensionError(f"invalid channel slice [{start}:{stop}] for c={c}")
    out = x.data[:, start:stop].copy()

    def backward_fn(gout):
        dx = np.zeros_like(x.data)
        dx[:, start:stop] = gout
        return [dx]

    return make_result(out, "slice_channels", (x,), backward_fn)


# -- pooling / resampling ------------------------------------------------------

def max_pool2(x: Tensor4) -> Tensor4:
    """2x2 max pooling, stride 2. Ties route gradient to the first index in
    row-major window order."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"max_pool2 needs even spatial dims, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    windows = (x.data.reshape(n, c, h2, 2, w2, 2)
               .transpose(0, 1, 2, 4, 3, 5)
               .reshape(n, c, h2, w2, 4))
    am = windows.argmax(axis=-1)           # first max in (0,0),(0,1),(1,0),(1,1) order
    out = np.take_along_axis(windows, am[..., None], axis=-1)[..., 0]

    def backward_fn(gout):
        dwin = np.zeros_like(windows)
        np.put_along_axis(dwin, am[..., None], gout[..., None], axis=-1)
        dx = (dwin.reshape(n, c, h2, w2, 2, 2)
              .transpose(0, 1, 2, 4, 3, 5)
              .reshape(n, c, h, w))
        return [dx]

    return make_result(out, "max_pool2", (x,), backward_fn)


def _bilinear_axis(size: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Index/weight vectors mapping an axis of length `size` to `2*size`."""
    dst = np.arange(2 * size, dtype=np.float64)
    src = np.clip((dst + 0.5) / 2.0 - 0.5, 0.0, size - 1.0)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, size - 1)
    w1 = src - i0
    w0 = 1.0 - w1
    return i0, i1, w0, w1


def upsample_bilinear2(x: Tensor4) -> Tensor4:
    """Double both spatial dims with bilinear interpolation
    (``src = (dst+0.5)/2 - 0.5``, clamped)."""
    n, c, h, w = x.shape
    r0, r1, rw0, rw1 = _bilinear_axis(h)
    c0, c1, cw0, cw1 = _bilinear_axis(w)
    dt = x.dtype
    rw0c = rw0.astype(dt)[None, None, :, None]
    rw1c = rw1.astype(dt)[None, None, :, None]
    cw0c = cw0.astype(dt)[None, None, None, :]
    cw1c = cw1.astype(dt)[None, None, None, :]
    rows = x.data[:, :, r0, :] * rw0c + x.data[:, :, r1, :] * rw1c   # [n,c,2h,w]
    out = rows[:, :, :, c0] * cw0c + rows[:, :, :, c1] * cw1c        # [n,c,2h,2w]

    def backward_fn(gout):
        drows = np.zeros((n, c, 2 * h, w), dtype=gout.dtype)
        np.add.at(drows, (slice(None), slice(None), slice(None), c0), gout * cw0c)
        np.add.at(drows, (slice(None), slice(None), slice(None), c1), gout * cw1c)
        dx = np.zeros_like(x.data)
        np.add.at(dx, (slice(None), slice(None), r0, slice(None)), drows * rw0c)
        np.add.at(dx, (slice(None), slice(None), r1, slice(None)), drows * rw1c)
        return [dx]

    return make_result(out, "upsample_bilinear2", (x,), backward_fn)


def global_pool(x: Tensor4, kind: str = "avg", axis: str = "spatial") -> Tensor4:
    """Exact mean/max either over space (``[n,c,1,1]``) or channels (``[n,1,h,w]``)."""
    if kind not in ("avg", "max") or axis not in ("spatial", "channel"):
        raise UsageError(f"global_pool kind must be avg|max and axis spatial|channel, "
                         f"got {kind}/{axis}")
    n, c, h, w = x.shape
    if axis == "spatial":
        if kind == "avg":
            out = x.data.mean(axis=(2, 3), keepdims=True)

            def backward_fn(gout):
                return [np.broadcast_to(gout / (h * w), x.shape).astype(gout.dtype).copy()]
        else:
            flat = x.data.reshape(n, c, h * w)
            am = flat.argmax(axis=-1)
            out = np.take_along_axis(flat, am[..., None], axis=-1).reshape(n, c, 1, 1)

            def backward_fn(gout):
                dflat = np.zeros_like(flat)
                np.put_along_axis(dflat, am[..., None], gout.reshape(n, c, 1), axis=-1)
                return [dflat.reshape(x.shape)]
    else:
        if kind == "avg":
            out = x.data.mean(axis=1, keepdims=True)

            def backward_fn(gout):
                return [np.broadcast_to(gout / c, x.shape).astype(gout.dtype).copy()]
        else:
            am = x.data.argmax(axis=1)
            out = np.take_along_axis(x.data, am[:, None], axis=1)

            def backward_fn(gout):
                dx = np.zeros_like(x.data)
                np.put_along_axis(dx, am[:, None], gout, axis=1)
                return [dx]

    return make_result(out, f"global_pool_{kind}_{axis}", (x,), backward_fn)


# -- reductions ---------------------------------------------------------------

def sum_all(x: Tensor4) -> Tensor4:
    out = np.array(x.data.sum(dtype=np.float64), dtype=x.dtype).reshape(1, 1, 1, 1)

    def backward_fn(gout):
        return [np.broadcast_to(gout.reshape(()), x.shape).astype(gout.dtype).copy()]

    return make_result(out, "sum_all", (x,), backward_fn)


def mean_all(x: Tensor4) -> Tensor4:
    size = x.data.size
    out = np.array(x.data.sum(dtype=np.float64) / size, dtype=x.dtype).reshape(1, 1, 1, 1)

    def backward_fn(gout):
        g = gout.reshape(()) / x.dtype.type(size)
        return [np.broadcast_to(g, x.shape).astype(gout.dtype).copy()]

    return make_result(out, "mean_all", (x,), backward_fn)
