"""Segmentation generator: 4-stage pseudo-3D residual encoder, bottleneck
with dropout, 4-stage decoder with skip concatenation, per-class score head.

The per-voxel class scores it produces are the unary potentials consumed by
the CRF refinement; softmax is applied downstream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import blocks
from .volgrad import ContractError, Rng, ShapeError, Tensor, ops

BACKBONE_BLOCKS = {
    "resnet50": (3, 4, 6, 3),
    "resnet101": (3, 4, 23, 3),
    "resnet152": (3, 8, 36, 3),
}


def backbone_blocks(backbone: str) -> tuple[int, int, int, int]:
    """Residual-block counts (n1..n4) for a named backbone."""
    try:
        return BACKBONE_BLOCKS[backbone]
    except KeyError:
        raise ContractError(
            f"unknown backbone {backbone!r}; expected one of "
            f"{sorted(BACKBONE_BLOCKS)}") from None


@dataclass
class GeneratorConfig:
    backbone: str = "resnet50"
    base_channels: int = 8
    in_channels: int = 4    # T1, T1c, T2, FLAIR
    num_classes: int = 4    # labels 0, 1, 2, 4
    dropout_p: float = 0.2

    def __post_init__(self):
        backbone_blocks(self.backbone)
        if self.base_channels < 1:
            raise ContractError("base_channels must be positive")
        if self.in_channels != 4 or self.num_classes != 4:
            raise ContractError(
                "this pipeline is fixed at 4 input modalities and 4 classes")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ContractError("dropout_p must be in [0, 1)")


class Generator:
    """Parameter container; use :func:`generator_forward` to evaluate."""

    def __init__(self, config: GeneratorConfig, rng: Rng, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        b = config.base_channels
        n = backbone_blocks(config.backbone)

        self.stem_w = blocks.he_normal(rng, (b, config.in_channels, 3, 3, 3),
                                       config.in_channels * 27, dtype=dtype)
        self.stem_b = blocks.zeros_param((b,), dtype)
        self.encoders = [
            blocks.EncoderStageParams.create(b * 2 ** i, n[i], rng, dtype)
            for i in range(4)
        ]
        deep = b * 16
        self.bottleneck_w = blocks.he_normal(rng, (deep, deep, 3, 3, 3),
                                             deep * 27, dtype=dtype)
        self.bottleneck_b = blocks.zeros_param((deep,), dtype)
        self.decoders = [
            blocks.DecoderStageParams.create(b * 2 ** i, rng, dtype)
            for i in range(4, 0, -1)
        ]
        self.head_w = blocks.he_normal(rng, (config.num_classes, b, 1, 1, 1),
                                       b, dtype=dtype)
        self.head_b = blocks.zeros_param((config.num_classes,), dtype)

    def parameters(self):
        out = [("gen/stem_w", self.stem_w), ("gen/stem_b", self.stem_b)]
        for i, st in enumerate(self.encoders):
            out += st.parameters(f"gen/enc{i + 1}/")
        out += [("gen/bottleneck_w", self.bottleneck_w),
                ("gen/bottleneck_b", self.bottleneck_b)]
        for i, st in enumerate(self.decoders):
            out += st.parameters(f"gen/dec{4 - i}/")
        out += [("gen/head_w", self.head_w), ("gen/head_b", self.head_b)]
        return out

    def parameter_count(self) -> int:
        return blocks.count_parameters(self.parameters())


def build_generator(config: GeneratorConfig, rng: Rng,
                    dtype=np.float32) -> Generator:
    """Deterministic given the rng seed: same seed, bitwise-same weights."""
    return Generator(config, rng, dtype)


def generator_forward(gen: Generator, x: Tensor, training: bool = False,
                      rng: Rng | None = None) -> Tensor:
    """Class-score volume with the same spatial grid as the input.

    Spatial extents must be divisible by 16 (four halvings).  In training
    mode the bottleneck applies dropout, which needs the rng.
    """
    cfg = gen.config
    if x.data.ndim != 5 or x.data.shape[1] != cfg.in_channels:
        raise ShapeError(
            f"generator expects (N, {cfg.in_channels}, D, H, W), got "
            f"{tuple(x.shape)}")
    for ext in x.data.shape[2:]:
        if ext % 16:
            raise ShapeError(
                f"spatial extents must be divisible by 16, got "
                f"{tuple(x.data.shape[2:])}")
    if training and cfg.dropout_p > 0 and rng is None:
        raise ContractError("training-mode forward needs an rng for dropout")

    h = blocks.conv_norm_act(x, gen.stem_w, gen.stem_b)
    skips = [h]
    for st in gen.encoders:
        h = blocks.encoder_stage_forward(h, st)
        skips.append(h)
    skips.pop()  # deepest output feeds the bottleneck, not a skip

    h = blocks.conv_norm_act(h, gen.bottleneck_w, gen.bottleneck_b)
    h = ops.dropout(h, cfg.dropout_p, rng, training)

    for st, skip in zip(gen.decoders, reversed(skips)):
        h = blocks.decoder_stage_forward(h, skip, st)

    return ops.conv3d(h, gen.head_w, gen.head_b, stride=1, padding="same")
