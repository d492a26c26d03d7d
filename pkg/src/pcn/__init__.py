"""Prediction calibration for generalized few-shot semantic segmentation.

A frozen base segmenter and a few-shot novel classifier are fused by
normalised score fusion; a small transformer then predicts a per-class
offset from cross-covariance attention between the fused score rows and
the feature channels.  Everything runs on a tape-based numpy autodiff
engine (:mod:`pcn.tensor`).
"""
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    DomainError,
    NumericError,
    PcnError,
)
from .metrics import h_mean, iou, miou_all
from .tensor import Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "DataError",
    "DimensionError",
    "DomainError",
    "NumericError",
    "PcnError",
    "Tensor",
    "backward",
    "h_mean",
    "iou",
    "miou_all",
    "no_grad",
    "__version__",
]
