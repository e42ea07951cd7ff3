"""Raw 3D convolution kernels on numpy arrays (no autodiff here).

Convolution uses the cross-correlation convention (no kernel flip) and the
layout (batch, channel, depth, height, width) with weights
(out_channels, in_channels, kd, kh, kw).

`same` padding produces ceil(extent / stride) outputs with left-biased
padding (pad_before = total // 2).  Forward, input-gradient and
weight-gradient are all expressed as im2col + GEMM over depth slabs so the
transient column buffer stays below a fixed byte budget.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import ShapeError

# Upper bound for one im2col slab buffer.
_COL_BUDGET_BYTES = 64 * 1024 * 1024


def conv_geometry(in_spatial, kernel, stride, padding: str):
    """Output extents and (before, after) pads per spatial axis."""
    out = []
    pads = []
    for ext, k, s in zip(in_spatial, kernel, stride):
        if s < 1:
            raise ShapeError(f"stride must be >= 1, got {stride}")
        if padding == "same":
            o = -(-ext // s)  # ceil
            total = max((o - 1) * s + k - ext, 0)
            before = total // 2
            pads.append((before, total - before))
        elif padding == "valid":
            if ext < k:
                raise ShapeError(
                    f"valid padding requires extent >= kernel, got {ext} < {k}")
            o = (ext - k) // s + 1
            pads.append((0, 0))
        else:
            raise ShapeError(f"unknown padding mode {padding!r}")
        out.append(o)
        if k > ext + pads[-1][0] + pads[-1][1]:
            raise ShapeError(
                f"kernel extent {k} exceeds padded input extent "
                f"{ext + pads[-1][0] + pads[-1][1]}")
    return tuple(out), tuple(pads)


def conv_transpose_out_spatial(in_spatial, kernel, stride, padding: str):
    """Extents produced by the transposed convolution (adjoint of conv)."""
    if padding == "same":
        return tuple(ext * s for ext, s in zip(in_spatial, stride))
    if padding == "valid":
        return tuple((ext - 1) * s + k
                     for ext, k, s in zip(in_spatial, kernel, stride))
    raise ShapeError(f"unknown padding mode {padding!r}")


def _pad_input(x, pads):
    (d0, d1), (h0, h1), (w0, w1) = pads
    if d0 == d1 == h0 == h1 == w0 == w1 == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (d0, d1), (h0, h1), (w0, w1)))


def _window_view(xp, kernel, stride, out_spatial):
    """Strided window view (N, od, oh, ow, C, kd, kh, kw); no copy."""
    n, c = xp.shape[:2]
    od, oh, ow = out_spatial
    kd, kh, kw = kernel
    sn, sc, sd, sh, sw = xp.strides
    s0, s1, s2 = stride
    shape = (n, od, oh, ow, c, kd, kh, kw)
    strides = (sn, sd * s0, sh * s1, sw * s2, sc, sd, sh, sw)
    return as_strided(xp, shape=shape, strides=strides)


def _slab_depth(n, out_spatial, col_width, itemsize):
    od, oh, ow = out_spatial
    per_depth = max(n * oh * ow * col_width * itemsize, 1)
    return max(1, min(od, _COL_BUDGET_BYTES // per_depth))


def conv3d_fwd(x, w, stride, padding: str):
    n, cin, *in_sp = x.shape
    cout, wcin, *kernel = w.shape
    if cin != wcin:
        raise ShapeError(
            f"input channels {tuple(x.shape)} do not match weight channels "
            f"{tuple(w.shape)}")
    out_sp, pads = conv_geometry(in_sp, kernel, stride, padding)
    xp = _pad_input(x, pads)
    view = _window_view(xp, kernel, stride, out_sp)
    col_width = cin * kernel[0] * kernel[1] * kernel[2]
    wmat = w.reshape(cout, col_width)
    od, oh, ow = out_sp
    y = np.empty((n, cout, od, oh, ow), dtype=x.dtype)
    zstep = _slab_depth(n, out_sp, col_width, x.dtype.itemsize)
    for z0 in range(0, od, zstep):
        z1 = min(z0 + zstep, od)
        col = np.ascontiguousarray(view[:, z0:z1]).reshape(-1, col_width)
        out = col @ wmat.T  # (rows, cout)
        y[:, :, z0:z1] = np.moveaxis(
            out.reshape(n, z1 - z0, oh, ow, cout), -1, 1)
    return y


def conv3d_grad_input(gy, w, stride, padding: str, in_spatial):
    """Gradient w.r.t. the conv input; also the transposed-conv forward."""
    n, cout, *out_sp = gy.shape
    wcout, cin, *kernel = w.shape
    if cout != wcout:
        raise ShapeError(
            f"gradient channels {tuple(gy.shape)} do not match weight "
            f"channels {tuple(w.shape)}")
    exp_out, pads = conv_geometry(in_spatial, kernel, stride, padding)
    if tuple(exp_out) != tuple(out_sp):
        raise ShapeError(
            f"output grid {tuple(out_sp)} inconsistent with input grid "
            f"{tuple(in_spatial)} under stride {tuple(stride)} ({padding})")
    col_width = cin * kernel[0] * kernel[1] * kernel[2]
    wmat = w.reshape(cout, col_width)
    (d0, _), (h0, _), (w0, _) = pads
    padded_sp = [ext + p0 + p1 for ext, (p0, p1) in zip(in_spatial, pads)]
    gxp = np.zeros((n, cin, *padded_sp), dtype=gy.dtype)
    od, oh, ow = out_sp
    kd, kh, kw = kernel
    s0, s1, s2 = stride
    zstep = _slab_depth(n, out_sp, col_width, gy.dtype.itemsize)
    for z0 in range(0, od, zstep):
        z1 = min(z0 + zstep, od)
        zn = z1 - z0
        gmat = np.ascontiguousarray(
            np.moveaxis(gy[:, :, z0:z1], 1, -1)).reshape(-1, cout)
        gcol = (gmat @ wmat).reshape(n, zn, oh, ow, cin, kd, kh, kw)
        zbase = z0 * s0
        for a in range(kd):
            for b in range(kh):
                for c in range(kw):
                    gxp[:, :,
                        zbase + a: zbase + a + zn * s0: s0,
                        b: b + oh * s1: s1,
                        c: c + ow * s2: s2] += np.moveaxis(
                            gcol[..., a, b, c], -1, 1)
    return gxp[:, :,
               d0: d0 + in_spatial[0],
               h0: h0 + in_spatial[1],
               w0: w0 + in_spatial[2]]


def conv3d_grad_weight(x, gy, kernel, stride, padding: str):
    """Gradient w.r.t. the conv weight, with explicit kernel extents."""
    n, cin, *in_sp = x.shape
    _, cout, *out_sp = gy.shape
    exp_out, pads = conv_geometry(in_sp, kernel, stride, padding)
    if tuple(exp_out) != tuple(out_sp):
        raise ShapeError(
            f"output grid {tuple(out_sp)} inconsistent with input grid "
            f"{tuple(in_sp)} under stride {tuple(stride)} ({padding})")
    xp = _pad_input(x, pads)
    view = _window_view(xp, kernel, stride, tuple(out_sp))
    col_width = cin * kernel[0] * kernel[1] * kernel[2]
    gw = np.zeros((col_width, cout), dtype=x.dtype)
    od, oh, ow = out_sp
    zstep = _slab_depth(n, out_sp, col_width, x.dtype.itemsize)
    for z0 in range(0, od, zstep):
        z1 = min(z0 + zstep, od)
        col = np.ascontiguousarray(view[:, z0:z1]).reshape(-1, col_width)
        gmat = np.ascontiguousarray(
            np.moveaxis(gy[:, :, z0:z1], 1, -1)).reshape(-1, cout)
        gw += col.T @ gmat
    return gw.T.reshape(cout, cin, *kernel)
