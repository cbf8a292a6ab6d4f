"""Cross-modal audio/text retrieval with linear and deep canonical correlation analysis."""

from .cca import CcaModel, cca_fit, cca_transform, total_correlation
from .cca_loss import CcaLoss
from .dataset import PairedDataset
from .synthdata import SynthSpec, generate
from .training import TrainConfig, TrainedModel, train

__version__ = "0.1.0"

__all__ = [
    "CcaModel", "cca_fit", "cca_transform", "total_correlation", "CcaLoss", "PairedDataset",
    "SynthSpec", "generate", "TrainConfig", "TrainedModel", "train",
]
