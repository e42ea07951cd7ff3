"""Finite-difference checks for every primitive op, both element types."""

import numpy as np
import pytest

from vgan3d.volgrad import Rng, Tensor, ops

from _gradcheck import TOL, fd_check


def _rngs(seed):
    return Rng(seed), np.random.default_rng(seed)


PRIMS = {}


def prim(name):
    def deco(fn):
        PRIMS[name] = fn
        return fn
    return deco


@prim("conv3d")
def _conv3d(seed, dtype):
    r, pr = _rngs(seed)
    x = r.normal((1, 2, 4, 4, 4), dtype=dtype)
    w = r.normal((3, 2, 3, 3, 3), dtype=dtype)
    b = r.normal((3,), dtype=dtype)
    stride = 2 if seed % 2 else 1
    pad = "same" if seed % 3 else "valid"
    return (lambda ts: ops.reduce_mean(
        ops.mul(ops.conv3d(ts[0], ts[1], ts[2], stride=stride, padding=pad),
                Tensor(_probe_weights((1, 3) + _conv_out((4, 4, 4), stride, pad), dtype, seed))))), [x, w, b]


def _conv_out(sp, stride, pad):
    if pad == "same":
        return tuple(-(-s // stride) for s in sp)
    return tuple((s - 3) // stride + 1 for s in sp)


def _probe_weights(shape, dtype, seed):
    return np.asarray(Rng(seed + 999).normal(shape, dtype=dtype))


@prim("conv_transpose3d")
def _convt(seed, dtype):
    r, _ = _rngs(seed)
    x = r.normal((1, 3, 3, 3, 3), dtype=dtype)
    w = r.normal((3, 2, 3, 3, 3), dtype=dtype)
    b = r.normal((2,), dtype=dtype)
    stride = 2 if seed % 2 else 1
    out_sp = tuple(3 * stride for _ in range(3))
    probe = _probe_weights((1, 2) + out_sp, dtype, seed)
    return (lambda ts: ops.reduce_mean(
        ops.mul(ops.conv_transpose3d(ts[0], ts[1], ts[2], stride=stride),
                Tensor(probe)))), [x, w, b]


@prim("leaky_relu")
def _lrelu(seed, dtype):
    r, _ = _rngs(seed)
    x = r.normal((4, 5), dtype=dtype) + np.asarray(0.05, dtype)  # keep off the kink
    probe = _probe_weights((4, 5), dtype, seed)
    return (lambda ts: ops.reduce_sum(
        ops.mul(ops.leaky_relu(ts[0], 0.2), Tensor(probe)))), [x]


@prim("instance_norm")
def _inorm(seed, dtype):
    r, _ = _rngs(seed)
    x = r.normal((2, 2, 3, 3, 3), dtype=dtype)
    probe = _probe_weights(x.shape, dtype, seed)
    return (lambda ts: ops.reduce_sum(
        ops.mul(ops.instance_norm(ts[0], 1e-5), Tensor(probe)))), [x]


@prim("softmax_channels")
def _softmax(seed, dtype):
    r, _ = _rngs(seed)
    x = r.normal((2, 4, 2, 2, 2), dtype=dtype)
    probe = _probe_weights(x.shape, dtype, seed)
    return (lambda ts: ops.reduce_sum(
        ops.mul(ops.softmax_channels(ts[0]), Tensor(probe)))), [x]


@prim("dropout")
def _dropout(seed, dtype):
    r, _ = _rngs(seed)
    x = r.normal((3, 4, 2, 2, 2), dtype=dtype)
    probe = _probe_weights(x.shape, dtype, seed)
    # fixed seed per evaluation keeps the mask constant across FD probes
    return (lambda ts: ops.reduce_sum(
        ops.mul(ops.dropout(ts[0], 0.3, Rng(seed), training=True),
                Tensor(probe)))), [x]


@prim("concat_channels")
def _concat(seed, dtype):
    r, _ = _rngs(seed)
    a = r.normal((1, 2, 2, 2, 2), dtype=dtype)
    b = r.normal((1, 3, 2, 2, 2), dtype=dtype)
    probe = _probe_weights((1, 5, 2, 2, 2), dtype, seed)
    return (lambda ts: ops.reduce_sum(
        ops.mul(ops.concat_channels(ts[0], ts[1]), Tensor(probe)))), [a, b]


@prim("add_sub_mul_div_scale")
def _arith(seed, dtype):
    r, _ = _rngs(seed)
    a = r.normal((6,), dtype=dtype)
    # divisor well away from 0 so the FD quotient stays conditioned
    b = r.normal((6,), dtype=dtype) * np.asarray(0.3, dtype) + np.asarray(4.0, dtype)
    return (lambda ts: ops.reduce_sum(
        ops.scale(ops.div(ops.mul(ops.add(ts[0], ts[1]),
                                  ops.sub(ts[0], ts[1])), ts[1]), 0.7))), [a, b]


@prim("reduce_mean")
def _rmean(seed, dtype):
    r, _ = _rngs(seed)
    x = r.normal((3, 4, 5), dtype=dtype)
    probe = _probe_weights((3, 5), dtype, seed)
    return (lambda ts: ops.reduce_sum(
        ops.mul(ops.reduce_mean(ts[0], axes=1), Tensor(probe)))), [x]


@prim("l2_loss")
def _l2(seed, dtype):
    r, _ = _rngs(seed)
    a = r.normal((7,), dtype=dtype)
    b = r.normal((7,), dtype=dtype)
    return (lambda ts: ops.l2_loss(ts[0], ts[1])), [a, b]


@prim("weighted_sum")
def _wsum(seed, dtype):
    r, _ = _rngs(seed)
    a = r.normal((2, 3), dtype=dtype)
    b = r.normal((2, 3), dtype=dtype)
    w = r.normal((2,), dtype=dtype)
    probe = _probe_weights((2, 3), dtype, seed)
    return (lambda ts: ops.reduce_sum(
        ops.mul(ops.weighted_sum([ts[0], ts[1]], ts[2]), Tensor(probe)))), [a, b, w]


@prim("mix_channels")
def _mix(seed, dtype):
    r, _ = _rngs(seed)
    x = r.normal((2, 3, 2, 2, 2), dtype=dtype)
    m = r.normal((3, 3), dtype=dtype)
    probe = _probe_weights(x.shape, dtype, seed)
    return (lambda ts: ops.reduce_sum(
        ops.mul(ops.mix_channels(ts[0], ts[1]), Tensor(probe)))), [x, m]


@pytest.mark.parametrize("name", sorted(PRIMS))
@pytest.mark.parametrize("dtype", [np.float64, np.float32])
def test_primitive_gradients(name, dtype):
    tol = TOL[np.dtype(dtype)]
    worst = 0.0
    for seed in range(20):
        func, inputs = PRIMS[name](seed, dtype)
        probe_rng = np.random.default_rng(10_000 + seed)
        worst = max(worst, fd_check(func, inputs, probe_rng, dtype=dtype))
    assert worst <= tol, f"{name}: worst relative error {worst}"
