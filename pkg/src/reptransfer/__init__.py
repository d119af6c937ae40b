"""Annotation-free transfer of a segmentation network to a new image domain.

A frozen teacher trained on labelled source images supervises a student on
aligned target-domain images by regressing the student's intermediate
feature maps onto the teacher's.  No target labels are used.
"""
__version__ = "0.1.0"

from .estimators import FeatureInverter, FeatureRegressionTransfer, SegmentationNet
from .exceptions import DivergenceError, InputError, InvariantError
from .metrics import ConfusionMatrix, SegScores, dataset_distance
from .network import Checkpoint, NetworkConfig, load_checkpoint, save_checkpoint
from .transfer import FeatureSelection

__all__ = [
    "Checkpoint", "ConfusionMatrix", "DivergenceError", "FeatureInverter", "FeatureRegressionTransfer",
    "FeatureSelection", "InputError", "InvariantError", "NetworkConfig", "SegScores", "SegmentationNet",
    "dataset_distance", "load_checkpoint", "save_checkpoint",
]
