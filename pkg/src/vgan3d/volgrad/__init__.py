"""Tensor math and reverse-mode autodiff for the volumetric pipeline."""

from . import ops
from .tensor import (ContractError, Graph, Rng, ShapeError, Tensor,
                     active_graph)

__all__ = [
    "ops", "Tensor", "Graph", "Rng", "ShapeError", "ContractError",
    "active_graph",
]
