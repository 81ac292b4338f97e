"""gaitkit: silhouette gait embedding network with global distance
alignment re-ranking and cross-view rank-1 evaluation."""

from .autodiff import Tensor, ShapeError
from .gda import AdjustmentSet, GdaConfig
from .model import SfeConfig, SfeModel, StripEmbedding
from .training import BatchSpec, TrainConfig, TripletLossConfig

__version__ = "0.1.0"

__all__ = [
    "Tensor", "ShapeError",
    "SfeConfig", "SfeModel", "StripEmbedding",
    "BatchSpec", "TrainConfig", "TripletLossConfig",
    "AdjustmentSet", "GdaConfig",
    "__version__",
]
