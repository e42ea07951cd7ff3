"""Differentiable mean-field refinement of per-voxel class scores.

A dense pairwise model with Gaussian kernels is approximated by iterated
mean-field updates, unrolled for a fixed number of steps so the whole
refinement records on the autodiff tape.  One update runs, in order:

1. message passing: per kernel, a truncated-window Gaussian filtering of the
   current beliefs with the self-contribution removed,
2. re-weighting: a learnable per-kernel weighted sum of the filter outputs,
3. compatibility transform: a learnable label-pair mixing matrix,
4. unary addition: the mixed messages are subtracted from the unary scores,
5. normalization: softmax over the label channel.

Filtering is exact windowed filtering (separable passes for the spatial
kernel, cached per-case weight stacks for the bilateral kernel); there is no
lattice approximation.  Gradients reach the unaries, the kernel weights and
the compatibility matrix; the Gaussian filter coefficients are frozen.
"""

from __future__ import annotations

import hashlib
import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .volgrad import ContractError, Rng, ShapeError, Tensor, ops
from .volgrad.ops import _apply


@dataclass(frozen=True)
class KernelSpec:
    """One pairwise Gaussian kernel.

    kind "spatial": weight exp(-|pi - pj|^2 / (2 theta_gamma^2)).
    kind "bilateral": weight exp(-|pi - pj|^2 / (2 theta_alpha^2)
                              - (Ii - Ij)^2 / (2 theta_beta^2))
    where I is a reference intensity channel.  Windows are cubes of the
    given truncation radius (default ceil(3 sigma)); the center voxel is
    always excluded.
    """
    kind: str = "spatial"
    theta_gamma: float = 3.0
    theta_alpha: float = 3.0
    theta_beta: float = 0.1
    radius: int | None = None

    def __post_init__(self):
        if self.kind not in ("spatial", "bilateral"):
            raise ContractError(f"unknown kernel kind {self.kind!r}")
        if self.radius is not None and self.radius < 1:
            raise ContractError("kernel truncation radius must be >= 1")

    @property
    def sigma_spatial(self) -> float:
        return self.theta_gamma if self.kind == "spatial" else self.theta_alpha

    @property
    def radius_voxels(self) -> int:
        if self.radius is not None:
            return self.radius
        return max(1, math.ceil(3.0 * self.sigma_spatial))


def default_kernels():
    return (KernelSpec(kind="spatial"), KernelSpec(kind="bilateral"))


@dataclass
class CrfConfig:
    """Static refinement settings plus the two learnable parameter tensors."""
    iterations: int = 5
    kernels: tuple = field(default_factory=default_kernels)
    num_labels: int = 4
    reference_channel: int = 3  # FLAIR carries the clearest boundary signal
    dtype: type = np.float32
    kernel_weights: Tensor | None = None
    compat: Tensor | None = None

    def __post_init__(self):
        if self.iterations < 1:
            raise ContractError("iterations must be >= 1")
        self.kernels = tuple(self.kernels)
        if len(self.kernels) < 1:
            raise ContractError("need at least one pairwise kernel")
        if self.kernel_weights is None:
            self.kernel_weights = Tensor(
                np.ones(len(self.kernels), dtype=self.dtype),
                requires_grad=True)
        if self.compat is None:
            l = self.num_labels
            potts = np.ones((l, l), dtype=self.dtype) - np.eye(l, dtype=self.dtype)
            self.compat = Tensor(potts, requires_grad=True)

    def parameters(self):
        return [("crf/kernel_weights", self.kernel_weights),
                ("crf/compat", self.compat)]


# --------------------------------------------------------------------------
# filtering internals

def _shift_slices(shape, offset):
    """(dst, src) index tuples so that dst_i pairs with src_i = dst_i + o."""
    dst, src = [], []
    for ext, o in zip(shape, offset):
        lo = max(0, -o)
        hi = ext - max(0, o)
        dst.append(slice(lo, hi))
        src.append(slice(lo + o, hi + o))
    return tuple(dst), tuple(src)


def _cube_offsets(radius):
    r = radius
    return [(a, b, c)
            for a in range(-r, r + 1)
            for b in range(-r, r + 1)
            for c in range(-r, r + 1)
            if (a, b, c) != (0, 0, 0)]


def _gauss_taps(sigma, radius, dtype):
    offs = np.arange(-radius, radius + 1, dtype=np.float64)
    return np.exp(-(offs ** 2) / (2.0 * sigma * sigma)).astype(dtype)


def _separable_filter(arr, taps, radius):
    """Windowed correlation with the outer-product kernel, zero boundary.

    arr has spatial extents on its last three axes.
    """
    out = arr
    for ax_from_end in (3, 2, 1):
        axis = arr.ndim - ax_from_end
        acc = np.zeros_like(out)
        ext = out.shape[axis]
        for t, wt in enumerate(taps):
            o = t - radius
            lo, hi = max(0, -o), ext - max(0, o)
            if hi <= lo:
                continue
            dst = [slice(None)] * out.ndim
            src = [slice(None)] * out.ndim
            dst[axis] = slice(lo, hi)
            src[axis] = slice(lo + o, hi + o)
            acc[tuple(dst)] += wt * out[tuple(src)]
        out = acc
    return out


def _spatial_message(qd, sigma, radius):
    """Truncated separable Gaussian applied per channel, self excluded."""
    taps = _gauss_taps(sigma, radius, qd.dtype)
    return _separable_filter(qd, taps, radius) - qd  # center weight is 1


class _StackCache:
    """Byte-bounded LRU of bilateral weight stacks, keyed by reference data."""

    def __init__(self, budget_bytes=512 * 1024 * 1024):
        self.budget = budget_bytes
        self._items: OrderedDict = OrderedDict()
        self._bytes = 0

    def key(self, ref, spec: KernelSpec):
        digest = hashlib.blake2b(ref.tobytes(), digest_size=16).digest()
        return (digest, ref.shape, str(ref.dtype),
                spec.theta_alpha, spec.theta_beta, spec.radius_voxels)

    def get(self, ref, spec):
        k = self.key(ref, spec)
        stack = self._items.get(k)
        if stack is None:
            stack = _build_bilateral_stack(ref, spec)
            if stack.nbytes <= self.budget:
                self._items[k] = stack
                self._bytes += stack.nbytes
                while self._bytes > self.budget:
                    _, old = self._items.popitem(last=False)
                    self._bytes -= old.nbytes
        else:
            self._items.move_to_end(k)
        return stack

    def clear(self):
        self._items.clear()
        self._bytes = 0


bilateral_cache = _StackCache()


def _build_bilateral_stack(ref, spec: KernelSpec):
    """Per-offset weight planes w[o][i] = k(i, i + o), zero out of bounds."""
    radius = spec.radius_voxels
    offsets = _cube_offsets(radius)
    ta2 = 2.0 * spec.theta_alpha ** 2
    tb2 = 2.0 * spec.theta_beta ** 2
    stack = np.zeros((len(offsets),) + ref.shape, dtype=ref.dtype)
    for i, off in enumerate(offsets):
        sfac = math.exp(-(off[0] ** 2 + off[1] ** 2 + off[2] ** 2) / ta2)
        dst, src = _shift_slices(ref.shape, off)
        diff = ref[dst] - ref[src]
        stack[(i,) + dst] = sfac * np.exp(-(diff * diff) / tb2)
    return stack


def _apply_stack(stack, q, radius):
    """out[l, i] = sum_o stack[o, i] * q[l, i + o] for one volume."""
    offsets = _cube_offsets(radius)
    out = np.zeros_like(q)
    for i, off in enumerate(offsets):
        dst, src = _shift_slices(q.shape[1:], off)
        out[(slice(None),) + dst] += stack[(i,) + dst] * q[(slice(None),) + src]
    return out


# --------------------------------------------------------------------------
# refinement steps

def crf_init(unaries: Tensor) -> Tensor:
    """Initial beliefs: softmax of the unary scores over the label channel."""
    return ops.softmax_channels(unaries)


def _reference_volume(reference, reference_channel):
    rd = reference.data
    if rd.ndim == 5:
        if not 0 <= reference_channel < rd.shape[1]:
            raise ContractError(
                f"reference channel {reference_channel} out of range for "
                f"{rd.shape[1]} channels")
        return rd[:, reference_channel]
    if rd.ndim == 4:
        return rd
    raise ShapeError(
        f"reference image must be (N, C, D, H, W) or (N, D, H, W), got "
        f"{tuple(rd.shape)}")


def message_passing(beliefs: Tensor, kernel: KernelSpec,
                    reference: Tensor | None = None,
                    reference_channel: int = 0) -> Tensor:
    """Filter beliefs with one pairwise kernel (self excluded).

    The filtering matrix is symmetric, so the backward pass applies the
    identical filter to the incoming gradient.
    """
    qd = beliefs.data
    if qd.ndim != 5:
        raise ShapeError(f"beliefs must be (N, L, D, H, W), got "
                         f"{tuple(beliefs.shape)}")
    if kernel.kind == "spatial":
        sigma, radius = kernel.theta_gamma, kernel.radius_voxels

        def fwd(arr):
            return _spatial_message(arr, sigma, radius)
    else:
        if reference is None:
            raise ContractError("bilateral kernel needs a reference image")
        ref = _reference_volume(reference, reference_channel)
        if ref.shape[0] != qd.shape[0] or ref.shape[1:] != qd.shape[2:]:
            raise ShapeError(
                f"reference grid {ref.shape} does not match beliefs grid "
                f"{tuple(qd.shape)}")
        radius = kernel.radius_voxels
        stacks = [bilateral_cache.get(np.ascontiguousarray(ref[n]), kernel)
                  for n in range(ref.shape[0])]

        def fwd(arr):
            return np.stack([_apply_stack(stacks[n], arr[n], radius)
                             for n in range(arr.shape[0])])

    y = fwd(qd)

    def make_backward(needs):
        def backward(gy):
            return (fwd(gy),)
        return backward

    return _apply(f"crf_message_{kernel.kind}", [beliefs], y, make_backward)


def crf_step(beliefs: Tensor, unaries: Tensor, config: CrfConfig,
             reference: Tensor | None = None) -> Tensor:
    """One mean-field update; output rows are renormalized distributions."""
    messages = [message_passing(beliefs, k, reference,
                                config.reference_channel)
                for k in config.kernels]
    mixed = ops.weighted_sum(messages, config.kernel_weights)
    pairwise = ops.mix_channels(mixed, config.compat)
    logits = ops.sub(unaries, pairwise)
    return ops.softmax_channels(logits)


def crf_forward(unaries: Tensor, reference: Tensor | None,
                config: CrfConfig) -> Tensor:
    """softmax init followed by the configured number of updates."""
    if any(k.kind == "bilateral" for k in config.kernels) and reference is None:
        raise ContractError("bilateral kernel needs a reference image")
    if unaries.data.shape[1] != config.num_labels:
        raise ShapeError(
            f"unaries have {unaries.data.shape[1]} labels, config expects "
            f"{config.num_labels}")
    q = crf_init(unaries)
    for _ in range(config.iterations):
        q = crf_step(q, unaries, config, reference)
    return q
