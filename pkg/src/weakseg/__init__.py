"""Weakly supervised lung-texture segmentation from partial slice annotations.

The package bundles a small reverse-mode autodiff engine (:mod:`weakseg.tensor`),
a 3D-in/2D-out U-Net (:mod:`weakseg.unet`), the partial-annotation losses
(:mod:`weakseg.losses`), a synthetic phantom generator (:mod:`weakseg.dataset`),
case-aware fold planning (:mod:`weakseg.folds`), Adam training
(:mod:`weakseg.training`), metrics and reports (:mod:`weakseg.evaluation`) and
the experiment pipeline behind the ``weakseg`` command.
"""

from .errors import ConfigurationError, ContractError, DimensionError, TrainingDiverged
from .losses import ClassId, LossConfig, PixelLabel

__version__ = "0.1.0"

__all__ = [
    "ClassId",
    "ConfigurationError",
    "ContractError",
    "DimensionError",
    "LossConfig",
    "PixelLabel",
    "TrainingDiverged",
    "__version__",
]
