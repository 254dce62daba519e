"""Def-pooling: deformation-constrained pooling as a differentiable layer.

Submodules: :mod:`defnet.tensor` (dense arithmetic and serialization),
:mod:`defnet.defpool` (the operator and its constructors), :mod:`defnet.dpm`
(quadratic-deformation reference scores), :mod:`defnet.net` (a miniature
trainable network), :mod:`defnet.pipeline` (toy detection pipeline) and
:mod:`defnet.cli`.
"""

from .defpool import (
    DefPoolConfig,
    PenaltyBasis,
    defpool_backward,
    defpool_forward,
    make_directional_basis,
    make_directional_bases,
    make_global_basis,
    make_maxpool_basis,
    make_quadratic_basis,
)
from .tensor import DimensionError, FormatError, ParameterError

__version__ = "0.1.0"

__all__ = [
    "DefPoolConfig",
    "PenaltyBasis",
    "defpool_forward",
    "defpool_backward",
    "make_maxpool_basis",
    "make_global_basis",
    "make_directional_basis",
    "make_directional_bases",
    "make_quadratic_basis",
    "DimensionError",
    "ParameterError",
    "FormatError",
]
