"""Differentiable operations over :class:`~vgan3d.volgrad.tensor.Tensor`.

An operation records itself on a graph when (a) at least one input is
attached to a graph and (b) at least one input requires a gradient.  Inputs
with ``requires_grad`` that are still free are attached automatically, so
model parameters can be created once and reused across many per-step graphs.
If no input is attached anywhere, the op is a plain numpy computation.

Element types are uniform per graph: mixing float32 and float64 operands in
one op is an error.
"""

from __future__ import annotations

import numpy as np

from . import convkernels as kern
from .tensor import (ContractError, Rng, ShapeError, Tensor, active_graph,
                     check_finite)


def _as_triple(v):
    if isinstance(v, (tuple, list)):
        if len(v) != 3:
            raise ShapeError(f"expected 3 stride components, got {v}")
        return tuple(int(x) for x in v)
    return (int(v),) * 3


def _check_dtypes(op, *tensors):
    dt = None
    for t in tensors:
        if t is None:
            continue
        if t.data.dtype not in (np.float32, np.float64):
            raise ContractError(f"{op}: unsupported dtype {t.data.dtype}")
        if dt is None:
            dt = t.data.dtype
        elif t.data.dtype != dt:
            raise ContractError(
                f"{op}: mixed element types {dt} and {t.data.dtype}")
    return dt


def _apply(op, inputs, out_data, make_backward):
    """Wrap a computed array, recording a node when gradients are needed."""
    check_finite(out_data, op)
    g = active_graph()
    needs = tuple(t is not None and t.requires_grad for t in inputs)
    if g is None or not any(needs):
        return Tensor(out_data)
    ids = []
    for t, nd in zip(inputs, needs):
        if t is not None and t.graph is not None and t.graph is not g:
            raise ContractError(
                f"{op}: operand belongs to a different graph")
        if not nd:
            ids.append(None)
        elif t.node_id is not None:
            ids.append(t.node_id)
        else:
            ids.append(g.watch(t))
    return g.record(op, ids, make_backward(needs), out_data)


# --------------------------------------------------------------------------
# convolutions

def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride=1, padding: str = "same") -> Tensor:
    """3D cross-correlation; weight layout (out_ch, in_ch, kd, kh, kw)."""
    stride = _as_triple(stride)
    _check_dtypes("conv3d", x, w, b)
    if x.data.ndim != 5 or w.data.ndim != 5:
        raise ShapeError(
            f"conv3d expects rank-5 operands, got {tuple(x.shape)} and "
            f"{tuple(w.shape)}")
    if x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(
            f"conv3d channel mismatch: input {tuple(x.shape)} vs weight "
            f"{tuple(w.shape)}")
    y = kern.conv3d_fwd(x.data, w.data, stride, padding)
    if b is not None:
        if b.data.shape != (w.data.shape[0],):
            raise ShapeError(
                f"conv3d bias shape {tuple(b.shape)} does not match "
                f"{w.data.shape[0]} output channels")
        y += b.data.reshape(1, -1, 1, 1, 1)
    xd, wd = x.data, w.data
    in_sp, kernel = xd.shape[2:], wd.shape[2:]

    def make_backward(needs):
        def backward(gy):
            gx = (kern.conv3d_grad_input(gy, wd, stride, padding, in_sp)
                  if needs[0] else None)
            gw = (kern.conv3d_grad_weight(xd, gy, kernel, stride, padding)
                  if needs[1] else None)
            gb = gy.sum(axis=(0, 2, 3, 4)) if needs[2] else None
            return gx, gw, gb
        return backward

    return _apply("conv3d", [x, w, b], y, make_backward)


def conv_transpose3d(x: Tensor, w: Tensor, b: Tensor | None = None,
                     stride=1, padding: str = "same") -> Tensor:
    """Transposed 3D convolution (adjoint of :func:`conv3d`).

    Weight layout (in_ch, out_ch, kd, kh, kw): the same array convolves
    out_ch -> in_ch under conv3d, which is what makes
    <conv3d(x, w), y> == <x, conv_transpose3d(y, w)> hold.
    With kernel 3, stride 2 and `same` padding every spatial extent doubles.
    """
    stride = _as_triple(stride)
    _check_dtypes("conv_transpose3d", x, w, b)
    if x.data.ndim != 5 or w.data.ndim != 5:
        raise ShapeError(
            f"conv_transpose3d expects rank-5 operands, got "
            f"{tuple(x.shape)} and {tuple(w.shape)}")
    if x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(
            f"conv_transpose3d channel mismatch: input {tuple(x.shape)} vs "
            f"weight {tuple(w.shape)}")
    in_sp, kernel = x.data.shape[2:], w.data.shape[2:]
    out_sp = kern.conv_transpose_out_spatial(in_sp, kernel, stride, padding)
    y = kern.conv3d_grad_input(x.data, w.data, stride, padding, out_sp)
    if b is not None:
        if b.data.shape != (w.data.shape[1],):
            raise ShapeError(
                f"conv_transpose3d bias shape {tuple(b.shape)} does not "
                f"match {w.data.shape[1]} output channels")
        y += b.data.reshape(1, -1, 1, 1, 1)
    xd, wd = x.data, w.data

    def make_backward(needs):
        def backward(gy):
            gx = (kern.conv3d_fwd(gy, wd, stride, padding)
                  if needs[0] else None)
            gw = (kern.conv3d_grad_weight(gy, xd, kernel, stride, padding)
                  if needs[1] else None)
            gb = gy.sum(axis=(0, 2, 3, 4)) if needs[2] else None
            return gx, gw, gb
        return backward

    return _apply("conv_transpose3d", [x, w, b], y, make_backward)


# --------------------------------------------------------------------------
# pointwise and normalization

def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    if not 0.0 <= slope < 1.0:
        raise ContractError(f"leaky_relu slope must be in [0, 1), got {slope}")
    mask = x.data >= 0  # subgradient at 0 takes the non-leaky branch
    y = np.where(mask, x.data, x.data * slope)

    def make_backward(needs):
        def backward(gy):
            return (np.where(mask, gy, gy * slope),)
        return backward

    return _apply("leaky_relu", [x], y, make_backward)


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per (sample, channel) standardization over the spatial voxels.

    Uses biased variance; eps guards constant slices (their output is 0).
    """
    if x.data.ndim != 5:
        raise ShapeError(f"instance_norm expects rank 5, got {tuple(x.shape)}")
    sp = (2, 3, 4)
    mu = x.data.mean(axis=sp, keepdims=True)
    var = x.data.var(axis=sp, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x.data - mu) * inv

    def make_backward(needs):
        def backward(gy):
            gm = gy.mean(axis=sp, keepdims=True)
            gym = (gy * y).mean(axis=sp, keepdims=True)
            return (inv * (gy - gm - y * gym),)
        return backward

    return _apply("instance_norm", [x], y, make_backward)


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax along the channel axis, max-shifted for overflow safety."""
    if x.data.ndim < 2:
        raise ShapeError(f"softmax_channels expects rank >= 2, got "
                         f"{tuple(x.shape)}")
    m = x.data.max(axis=1, keepdims=True)
    e = np.exp(x.data - m)
    y = e / e.sum(axis=1, keepdims=True)

    def make_backward(needs):
        def backward(gy):
            dot = (gy * y).sum(axis=1, keepdims=True)
            return (y * (gy - dot),)
        return backward

    return _apply("softmax_channels", [x], y, make_backward)


def dropout(x: Tensor, p: float, rng: Rng | None = None,
            training: bool = False) -> Tensor:
    """Zero each element with probability p and rescale survivors by
    1/(1-p); identity in eval mode or at p == 0."""
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs an rng")
    dt = x.data.dtype
    keep = rng.uniform(x.data.shape, dtype=dt) >= p
    mscale = keep.astype(dt) / dt.type(1.0 - p)
    y = x.data * mscale

    def make_backward(needs):
        def backward(gy):
            return (gy * mscale,)
        return backward

    return _apply("dropout", [x], y, make_backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != b.data.ndim or \
            a.data.shape[:1] + a.data.shape[2:] != b.data.shape[:1] + b.data.shape[2:]:
        raise ShapeError(
            f"concat_channels extent mismatch: {tuple(a.shape)} vs "
            f"{tuple(b.shape)}")
    _check_dtypes("concat_channels", a, b)
    y = np.concatenate([a.data, b.data], axis=1)
    ca = a.data.shape[1]

    def make_backward(needs):
        def backward(gy):
            ga = np.ascontiguousarray(gy[:, :ca]) if needs[0] else None
            gb = np.ascontiguousarray(gy[:, ca:]) if needs[1] else None
            return ga, gb
        return backward

    return _apply("concat_channels", [a, b], y, make_backward)


# --------------------------------------------------------------------------
# arithmetic

def _same_shape(op, a, b):
    if a.data.shape != b.data.shape:
        raise ShapeError(
            f"{op} shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    _check_dtypes(op, a, b)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)

    def make_backward(needs):
        def backward(gy):
            return gy, gy
        return backward

    return _apply("add", [a, b], a.data + b.data, make_backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)

    def make_backward(needs):
        def backward(gy):
            return gy, -gy
        return backward

    return _apply("sub", [a, b], a.data - b.data, make_backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data

    def make_backward(needs):
        def backward(gy):
            return (gy * bd if needs[0] else None,
                    gy * ad if needs[1] else None)
        return backward

    return _apply("mul", [a, b], ad * bd, make_backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("div", a, b)
    y = a.data / b.data
    bd, yd = b.data, y

    def make_backward(needs):
        def backward(gy):
            ga = gy / bd if needs[0] else None
            gb = -gy * yd / bd if needs[1] else None
            return ga, gb
        return backward

    return _apply("div", [a, b], y, make_backward)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def make_backward(needs):
        def backward(gy):
            return (gy * c,)
        return backward

    return _apply("scale", [x], x.data * c, make_backward)


def reduce_sum(x: Tensor, axes=None) -> Tensor:
    axes = _norm_axes(axes, x.data.ndim)
    y = x.data.sum(axis=axes)
    shape = x.data.shape
    kshape = _keepdims_shape(shape, axes)

    def make_backward(needs):
        def backward(gy):
            return (np.broadcast_to(gy.reshape(kshape), shape).copy(),)
        return backward

    return _apply("reduce_sum", [x], y, make_backward)


def reduce_mean(x: Tensor, axes=None) -> Tensor:
    axes = _norm_axes(axes, x.data.ndim)
    y = x.data.mean(axis=axes)
    shape = x.data.shape
    kshape = _keepdims_shape(shape, axes)
    count = 1
    for ax in (axes if axes is not None else range(x.data.ndim)):
        count *= shape[ax]

    def make_backward(needs):
        def backward(gy):
            g = gy / count
            return (np.broadcast_to(g.reshape(kshape), shape).copy(),)
        return backward

    return _apply("reduce_mean", [x], y, make_backward)


def _norm_axes(axes, ndim):
    if axes is None:
        return None
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(sorted(ax % ndim for ax in axes))


def _keepdims_shape(shape, axes):
    if axes is None:
        return (1,) * len(shape)
    return tuple(1 if i in axes else s for i, s in enumerate(shape))


def l2_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean of squared differences over all elements."""
    d = sub(pred, target)
    return reduce_mean(mul(d, d))


# --------------------------------------------------------------------------
# label-space linear maps (used by the CRF refinement)

def weighted_sum(tensors, weights: Tensor) -> Tensor:
    """sum_m weights[m] * tensors[m]; gradients reach both sides."""
    tensors = list(tensors)
    if weights.data.shape != (len(tensors),):
        raise ShapeError(
            f"weighted_sum needs {len(tensors)} weights, got shape "
            f"{tuple(weights.shape)}")
    _check_dtypes("weighted_sum", *tensors, weights)
    wd = weights.data
    datas = [t.data for t in tensors]
    y = np.zeros_like(datas[0])
    for wm, d in zip(wd, datas):
        if d.shape != datas[0].shape:
            raise ShapeError("weighted_sum operands must share one shape")
        y += wm * d

    def make_backward(needs):
        def backward(gy):
            grads = [gy * wm if nd else None
                     for wm, nd in zip(wd, needs[:-1])]
            if needs[-1]:
                gw = np.array([(gy * d).sum() for d in datas],
                              dtype=wd.dtype)
            else:
                gw = None
            return (*grads, gw)
        return backward

    return _apply("weighted_sum", [*tensors, weights], y, make_backward)


def mix_channels(x: Tensor, matrix: Tensor) -> Tensor:
    """out[:, k] = sum_l matrix[k, l] * x[:, l] over the channel axis."""
    if matrix.data.ndim != 2 or matrix.data.shape[1] != x.data.shape[1]:
        raise ShapeError(
            f"mix_channels matrix {tuple(matrix.shape)} does not match "
            f"{x.data.shape[1]} channels")
    _check_dtypes("mix_channels", x, matrix)
    n, l = x.data.shape[:2]
    sp = x.data.shape[2:]
    xr = x.data.reshape(n, l, -1)
    md = matrix.data
    y = (md @ xr).reshape(n, md.shape[0], *sp)

    def make_backward(needs):
        def backward(gy):
            gr = gy.reshape(n, md.shape[0], -1)
            gx = (md.T @ gr).reshape(n, l, *sp) if needs[0] else None
            gm = (np.tensordot(gr, xr, axes=([0, 2], [0, 2]))
                  if needs[1] else None)
            return gx, gm
        return backward

    return _apply("mix_channels", [x, matrix], y, make_backward)
