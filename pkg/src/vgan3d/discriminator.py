"""3D convolutional critic over (image, segmentation) pairs.

The original image is concatenated with the candidate segmentation as
guidance, and every layer keeps kernel 4, stride 1, same padding, so the
decision map preserves the spatial grid.  No final sigmoid: outputs are
compared to all-ones / all-zeros targets under L2 (least-squares GAN).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import blocks
from .volgrad import ContractError, Rng, ShapeError, Tensor, ops


@dataclass
class DiscriminatorConfig:
    channels: tuple = (32, 64, 64, 1)
    kernel_size: int = 4
    slope: float = 0.2
    image_channels: int = 4
    seg_channels: int = 4

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.channels) < 1 or self.channels[-1] != 1:
            raise ContractError(
                f"discriminator must end in exactly 1 channel, got "
                f"{self.channels}")

    @property
    def in_channels(self) -> int:
        return self.image_channels + self.seg_channels


class Discriminator:
    def __init__(self, config: DiscriminatorConfig, rng: Rng,
                 dtype=np.float32):
        self.config = config
        self.dtype = dtype
        k = config.kernel_size
        self.weights = []
        self.biases = []
        cin = config.in_channels
        for cout in config.channels:
            self.weights.append(blocks.he_normal(
                rng, (cout, cin, k, k, k), cin * k ** 3,
                slope=config.slope, dtype=dtype))
            self.biases.append(blocks.zeros_param((cout,), dtype))
            cin = cout

    def parameters(self):
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out += [(f"disc/layer{i}/w", w), (f"disc/layer{i}/b", b)]
        return out

    def parameter_count(self) -> int:
        return blocks.count_parameters(self.parameters())


def build_discriminator(config: DiscriminatorConfig, rng: Rng,
                        dtype=np.float32) -> Discriminator:
    return Discriminator(config, rng, dtype)


def discriminator_forward(disc: Discriminator, image: Tensor,
                          seg: Tensor) -> Tensor:
    """Per-voxel real-valued decision map (N, 1, D, H, W)."""
    cfg = disc.config
    if image.data.shape[1] != cfg.image_channels or \
            seg.data.shape[1] != cfg.seg_channels:
        raise ShapeError(
            f"discriminator expects {cfg.image_channels}+{cfg.seg_channels} "
            f"channels, got image {tuple(image.shape)} and seg "
            f"{tuple(seg.shape)}")
    if image.data.shape[2:] != seg.data.shape[2:] or \
            image.data.shape[0] != seg.data.shape[0]:
        raise ShapeError(
            f"image grid {tuple(image.shape)} does not match seg grid "
            f"{tuple(seg.shape)}")
    h = ops.concat_channels(image, seg)
    last = len(disc.weights) - 1
    for i, (w, b) in enumerate(zip(disc.weights, disc.biases)):
        h = ops.conv3d(h, w, b, stride=1, padding="same")
        if i == last:
            break
        if i > 0:  # first layer skips normalization (critic convention)
            h = ops.instance_norm(h, blocks.NORM_EPS)
        h = ops.leaky_relu(h, cfg.slope)
    return h
