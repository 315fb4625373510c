"""Multi-ROI slice-fusion classifier for paired NM/QSM volumes."""

from .model import MRN, RES, MRNConfig
from .train import TrainConfig, Trainer

__version__ = "0.1.0"

__all__ = ["MRN", "RES", "MRNConfig", "TrainConfig", "Trainer"]
