"""Composite layers: pseudo-3D residual blocks and encoder/decoder stages.

A pseudo-3D block factorizes a full k^3 convolution into a 2D in-slice
filter (1, k, k) followed by a 1D through-slice filter (k, 1, 1), composed
residually: out = x + depth1d(spatial2d(x)).  Each sub-filter is followed by
instance norm and leaky ReLU; the residual branch carries no norm or
activation, so zero-initialized filter weights make the block an exact
identity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .volgrad import ContractError, Rng, ShapeError, Tensor, ops

LEAKY_SLOPE = 0.2
NORM_EPS = 1e-5


def he_normal(rng: Rng, shape, fan_in, slope=LEAKY_SLOPE, dtype=np.float32):
    """Fan-in-scaled normal init with the leaky-ReLU gain."""
    gain = np.sqrt(2.0 / (1.0 + slope * slope))
    std = gain / np.sqrt(fan_in)
    return Tensor(rng.normal(shape, std=std, dtype=dtype), requires_grad=True)


def zeros_param(shape, dtype=np.float32):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


@dataclass
class P3dBlockParams:
    """Weights of one pseudo-3D residual block (channel-preserving)."""
    spatial_w: Tensor   # (C, C, 1, 3, 3)
    spatial_b: Tensor
    depth_w: Tensor     # (C, C, 3, 1, 1)
    depth_b: Tensor
    eps: float = NORM_EPS
    slope: float = LEAKY_SLOPE

    @classmethod
    def create(cls, channels: int, rng: Rng, dtype=np.float32):
        c = channels
        return cls(
            spatial_w=he_normal(rng, (c, c, 1, 3, 3), c * 9, dtype=dtype),
            spatial_b=zeros_param((c,), dtype),
            depth_w=he_normal(rng, (c, c, 3, 1, 1), c * 3, dtype=dtype),
            depth_b=zeros_param((c,), dtype),
        )

    @property
    def channels(self) -> int:
        return self.spatial_w.data.shape[0]

    def parameters(self, prefix=""):
        return [(prefix + "spatial_w", self.spatial_w),
                (prefix + "spatial_b", self.spatial_b),
                (prefix + "depth_w", self.depth_w),
                (prefix + "depth_b", self.depth_b)]


def conv_norm_act(x, w, b, stride=1, eps=NORM_EPS, slope=LEAKY_SLOPE):
    h = ops.conv3d(x, w, b, stride=stride, padding="same")
    h = ops.instance_norm(h, eps)
    return ops.leaky_relu(h, slope)


def p3d_block_forward(x: Tensor, params: P3dBlockParams) -> Tensor:
    if x.data.shape[1] != params.channels:
        raise ShapeError(
            f"pseudo-3D block expects {params.channels} channels, input has "
            f"{x.data.shape[1]} (shape {tuple(x.shape)})")
    h = conv_norm_act(x, params.spatial_w, params.spatial_b,
                      eps=params.eps, slope=params.slope)
    h = conv_norm_act(h, params.depth_w, params.depth_b,
                      eps=params.eps, slope=params.slope)
    return ops.add(x, h)


@dataclass
class EncoderStageParams:
    """Stride-2 channel-doubling entry conv plus n_i pseudo-3D blocks."""
    entry_w: Tensor     # (2C, C, 3, 3, 3)
    entry_b: Tensor
    blocks: list[P3dBlockParams] = field(default_factory=list)

    @classmethod
    def create(cls, in_channels: int, n_blocks: int, rng: Rng,
               dtype=np.float32):
        cout = 2 * in_channels
        return cls(
            entry_w=he_normal(rng, (cout, in_channels, 3, 3, 3),
                              in_channels * 27, dtype=dtype),
            entry_b=zeros_param((cout,), dtype),
            blocks=[P3dBlockParams.create(cout, rng, dtype)
                    for _ in range(n_blocks)],
        )

    def parameters(self, prefix=""):
        out = [(prefix + "entry_w", self.entry_w),
               (prefix + "entry_b", self.entry_b)]
        for i, blk in enumerate(self.blocks):
            out += blk.parameters(f"{prefix}block{i}/")
        return out


def encoder_stage_forward(x: Tensor, stage: EncoderStageParams) -> Tensor:
    for ext in x.data.shape[2:]:
        if ext % 2:
            raise ContractError(
                f"encoder stage needs even spatial extents, got "
                f"{tuple(x.data.shape[2:])}; pad the volume upstream")
    h = conv_norm_act(x, stage.entry_w, stage.entry_b, stride=2)
    for blk in stage.blocks:
        h = p3d_block_forward(h, blk)
    return h


@dataclass
class DecoderStageParams:
    """Transposed-conv upsampling, skip concat, pseudo-3D fusing pair."""
    up_w: Tensor        # (2C, C, 3, 3, 3): 2C in, C out under conv_transpose3d
    up_b: Tensor
    fuse_spatial_w: Tensor  # (C, 2C, 1, 3, 3) applied after concat
    fuse_spatial_b: Tensor
    fuse_depth_w: Tensor    # (C, C, 3, 1, 1)
    fuse_depth_b: Tensor

    @classmethod
    def create(cls, in_channels: int, rng: Rng, dtype=np.float32):
        cin, cout = in_channels, in_channels // 2
        return cls(
            up_w=he_normal(rng, (cin, cout, 3, 3, 3), cin * 27, dtype=dtype),
            up_b=zeros_param((cout,), dtype),
            fuse_spatial_w=he_normal(rng, (cout, cin, 1, 3, 3), cin * 9,
                                     dtype=dtype),
            fuse_spatial_b=zeros_param((cout,), dtype),
            fuse_depth_w=he_normal(rng, (cout, cout, 3, 1, 1), cout * 3,
                                   dtype=dtype),
            fuse_depth_b=zeros_param((cout,), dtype),
        )

    def parameters(self, prefix=""):
        return [(prefix + "up_w", self.up_w), (prefix + "up_b", self.up_b),
                (prefix + "fuse_spatial_w", self.fuse_spatial_w),
                (prefix + "fuse_spatial_b", self.fuse_spatial_b),
                (prefix + "fuse_depth_w", self.fuse_depth_w),
                (prefix + "fuse_depth_b", self.fuse_depth_b)]


def decoder_stage_forward(x: Tensor, skip: Tensor,
                          stage: DecoderStageParams) -> Tensor:
    want = tuple(2 * e for e in x.data.shape[2:])
    if tuple(skip.data.shape[2:]) != want:
        raise ShapeError(
            f"decoder skip grid {tuple(skip.shape)} does not match doubled "
            f"input grid {tuple(x.shape)}")
    h = ops.conv_transpose3d(x, stage.up_w, stage.up_b, stride=2,
                             padding="same")
    h = ops.leaky_relu(ops.instance_norm(h, NORM_EPS), LEAKY_SLOPE)
    h = ops.concat_channels(h, skip)
    h = conv_norm_act(h, stage.fuse_spatial_w, stage.fuse_spatial_b)
    h = conv_norm_act(h, stage.fuse_depth_w, stage.fuse_depth_b)
    return h


# --------------------------------------------------------------------------
# parameter counting

def conv_param_count(out_channels: int, in_channels: int, kernel,
                     bias: bool = True) -> int:
    """Learnable scalars of one convolution layer."""
    if isinstance(kernel, int):
        kernel = (kernel,) * 3
    k = 1
    for e in kernel:
        k *= e
    return out_channels * in_channels * k + (out_channels if bias else 0)


def p3d_pair_param_count(out_channels: int, in_channels: int, k: int = 3,
                         bias: bool = True) -> int:
    """Scalars of one spatial (1,k,k) + depth (k,1,1) filter pair."""
    return (conv_param_count(out_channels, in_channels, (1, k, k), bias)
            + conv_param_count(out_channels, out_channels, (k, 1, 1), bias))


def count_parameters(params) -> int:
    """Total scalars in an iterable of tensors or of (name, tensor) pairs."""
    total = 0
    for p in params:
        t = p[1] if isinstance(p, tuple) else p
        total += t.data.size
    return total
