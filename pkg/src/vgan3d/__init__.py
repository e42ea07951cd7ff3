"""Volumetric adversarial segmentation pipeline, CPU scale.

Subpackages/modules:
  volgrad        tensors, autodiff tape, ops
  blocks         pseudo-3D residual blocks, encoder/decoder stages
  generator      segmentation generator (V-Net style)
  discriminator  3D convolutional critic
  crf            mean-field CRF refinement, unrolled and differentiable
  losses/optim/trainloop/checkpoint   training machinery
  metrics        region segmentation metrics
  data           volume types, phantoms, augmentation, file formats
  cli            command-line interface
"""

__version__ = "0.1.0"
