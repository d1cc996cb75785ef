"""Satellite-to-radar vision transformer with Token (Re)Distribution attribution."""

from .errors import ConfigurationError, DataError, FormatError, NumericalError
from .fields import GridField, NormalizationSpec, SyntheticSceneSpec, generate_scene
from .model import SMOKE, TABLE1, ModelConfig, SRViT
from .train import LossConfig, TrainConfig, fit, weighted_loss

__version__ = "0.1.0"
