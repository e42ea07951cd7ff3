"""Adversarial and overlap losses for the segmentation GAN.

Least-squares GAN formulation: decision maps are compared under L2 to
all-ones (real) or all-zeros (fake) targets.  The overlap term is a
generalized Dice loss whose class weights are inversely proportional to the
squared class volume, computed from the ground truth only.
"""

from __future__ import annotations

import numpy as np

from .volgrad import ShapeError, Tensor, ops

GDL_EPS = 1e-5


def generalized_dice_loss(truth_onehot: Tensor, prediction: Tensor,
                          eps: float = GDL_EPS) -> Tensor:
    """1 - 2 (sum_l w_l inter_l + eps) / (sum_l w_l denom_l + 2 eps).

    w_l = 1 / (|truth_l| + eps)^2, inter_l = sum_i y ŷ and
    denom_l = sum_i (y + ŷ), summed over batch and voxels.  Pairing eps in
    the numerator with 2 eps in the denominator keeps the value in [0, 1]
    exactly and makes a perfect prediction score exactly 0.
    """
    if truth_onehot.data.shape != prediction.data.shape:
        raise ShapeError(
            f"dice loss shape mismatch: {tuple(truth_onehot.shape)} vs "
            f"{tuple(prediction.shape)}")
    dt = prediction.data.dtype
    reduce_axes = (0, 2, 3, 4) if truth_onehot.data.ndim == 5 else None

    class_volumes = truth_onehot.data.sum(axis=reduce_axes)
    weights = Tensor((1.0 / (class_volumes + eps) ** 2).astype(dt))

    inter = ops.reduce_sum(ops.mul(truth_onehot, prediction),
                           axes=reduce_axes)
    denom = ops.reduce_sum(ops.add(truth_onehot, prediction),
                           axes=reduce_axes)
    num_s = ops.reduce_sum(ops.mul(weights, inter))
    den_s = ops.reduce_sum(ops.mul(weights, denom))
    two_eps = Tensor(np.asarray(2.0 * eps, dtype=dt))
    ratio = ops.div(ops.add(ops.scale(num_s, 2.0), two_eps),
                    ops.add(den_s, two_eps))
    return ops.sub(Tensor(np.asarray(1.0, dtype=dt)), ratio)


def adversarial_target(decision_map: Tensor, real: bool) -> Tensor:
    fill = 1.0 if real else 0.0
    return Tensor(np.full_like(decision_map.data, fill))


def generator_loss(d_fake: Tensor, truth_onehot: Tensor, prediction: Tensor,
                   alpha: float, gdl_eps: float = GDL_EPS) -> Tensor:
    """L2 distance of the fake decision map to ones, plus alpha times the
    generalized Dice loss.  At alpha == 0 the Dice branch is not recorded at
    all, so the gradient is bitwise the pure adversarial gradient."""
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    adv = ops.l2_loss(d_fake, adversarial_target(d_fake, real=True))
    if alpha == 0:
        return adv
    gdl = generalized_dice_loss(truth_onehot, prediction, gdl_eps)
    return ops.add(adv, ops.scale(gdl, alpha))


def discriminator_loss(d_real: Tensor, d_fake: Tensor) -> Tensor:
    """L2 of the real map to ones plus L2 of the fake map to zeros."""
    if d_real.data.shape != d_fake.data.shape:
        raise ShapeError(
            f"decision map mismatch: {tuple(d_real.shape)} vs "
            f"{tuple(d_fake.shape)}")
    return ops.add(ops.l2_loss(d_real, adversarial_target(d_real, True)),
                   ops.l2_loss(d_fake, adversarial_target(d_fake, False)))


def soft_dice_score(truth_onehot: np.ndarray, prediction: np.ndarray,
                    eps: float = GDL_EPS) -> float:
    """Unweighted mean over class channels of the soft Dice overlap.

    Logging/early-stopping metric (numpy, no tape): mean_l of
    (2 sum y ŷ + eps) / (sum y + sum ŷ + eps).
    """
    axes = tuple(i for i in range(truth_onehot.ndim) if i != 1)
    inter = (truth_onehot * prediction).sum(axis=axes)
    sums = truth_onehot.sum(axis=axes) + prediction.sum(axis=axes)
    return float(np.mean((2.0 * inter + eps) / (sums + eps)))
