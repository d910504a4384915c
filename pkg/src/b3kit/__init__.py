"""Precision-weighted posterior bridge operators for multi-task dense prediction.

Submodules: :mod:`field` (tensors, RNG, B3F1 I/O), :mod:`pfe` (precision
fields), :mod:`pbo` (bridge fusion), :mod:`cdo` (contractive dispatch),
:mod:`decoder` (multi-stage loop), :mod:`synthbench` (synthetic scenes),
:mod:`metrics` (task metrics and transfer gains), :mod:`cli`.
"""

from .field import FieldTensor, PrecisionField, RngStream, ScalarField, read_field, write_field
from .pbo import PboConfig, posterior_bridge, posterior_correction
from .pfe import PfeParams, precision_field
from .cdo import CdoParams, cdo_update, contraction_ratio

__version__ = "0.1.0"

__all__ = [
    "CdoParams",
    "FieldTensor",
    "PboConfig",
    "PfeParams",
    "PrecisionField",
    "RngStream",
    "ScalarField",
    "cdo_update",
    "contraction_ratio",
    "posterior_bridge",
    "posterior_correction",
    "precision_field",
    "read_field",
    "write_field",
]
