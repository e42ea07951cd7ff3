"""Generator shape/determinism contracts and backbone table."""

import numpy as np
import pytest

from vgan3d import blocks
from vgan3d.generator import (GeneratorConfig, backbone_blocks,
                              build_generator, generator_forward)
from vgan3d.volgrad import ContractError, Rng, ShapeError, Tensor, ops


@pytest.mark.parametrize("name,want", [
    ("resnet50", (3, 4, 6, 3)),
    ("resnet101", (3, 4, 23, 3)),
    ("resnet152", (3, 8, 36, 3)),
])
def test_backbone_table(name, want):
    assert backbone_blocks(name) == want


def test_unknown_backbone():
    with pytest.raises(ContractError):
        backbone_blocks("resnet18")


def test_resnet152_encoder_block_total():
    gen = build_generator(GeneratorConfig(backbone="resnet152",
                                          base_channels=2), Rng(0))
    assert sum(len(st.blocks) for st in gen.encoders) == 3 + 8 + 36 + 3 == 50


def test_same_seed_bitwise_identical_parameters():
    cfg = GeneratorConfig(base_channels=4)
    a = build_generator(cfg, Rng(123))
    b = build_generator(cfg, Rng(123))
    for (na, ta), (nb, tb) in zip(a.parameters(), b.parameters()):
        assert na == nb
        assert ta.data.tobytes() == tb.data.tobytes()


def test_parameter_count_self_consistency():
    gen = build_generator(GeneratorConfig(base_channels=8), Rng(0))
    assert gen.parameter_count() == sum(
        t.data.size for _, t in gen.parameters())


def test_forward_shape_contract():
    gen = build_generator(GeneratorConfig(base_channels=2), Rng(1))
    x = Tensor(Rng(2).normal((1, 4, 32, 32, 32)))
    y = generator_forward(gen, x)
    assert y.data.shape == (1, 4, 32, 32, 32)


def test_indivisible_extent_rejected():
    gen = build_generator(GeneratorConfig(base_channels=2), Rng(1))
    x = Tensor(np.zeros((1, 4, 24, 32, 32), dtype=np.float32))
    with pytest.raises(ShapeError, match="divisible by 16"):
        generator_forward(gen, x)


def test_eval_mode_deterministic():
    gen = build_generator(GeneratorConfig(base_channels=2), Rng(3))
    x = Tensor(Rng(4).normal((1, 4, 16, 16, 16)))
    a = generator_forward(gen, x, training=False)
    b = generator_forward(gen, x, training=False)
    assert a.data.tobytes() == b.data.tobytes()


def test_training_needs_rng():
    gen = build_generator(GeneratorConfig(base_channels=2), Rng(3))
    x = Tensor(np.zeros((1, 4, 16, 16, 16), dtype=np.float32))
    with pytest.raises(ContractError):
        generator_forward(gen, x, training=True, rng=None)


def test_finite_output_and_softmax_normalizes():
    gen = build_generator(GeneratorConfig(base_channels=2), Rng(5))
    x = Tensor(Rng(6).normal((1, 4, 16, 16, 16)))
    y = generator_forward(gen, x)
    assert np.isfinite(y.data).all()
    q = ops.softmax_channels(y)
    np.testing.assert_allclose(q.data.sum(axis=1), 1.0, atol=1e-6)
