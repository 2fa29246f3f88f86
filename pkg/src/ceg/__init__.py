"""Marked temporal point processes with a conditional event generator.

Submodules: ``core`` (data), ``autodiff`` (reverse mode), ``nets``
(generator, LSTM, CVAE nets, Adam), ``kde`` (sample-based densities),
``classical`` (ground-truth processes), ``generate`` (inference),
``train``, ``evaluate``, ``estimator`` and ``cli``.
"""
from .classical import Etas, SelfCorrecting, SelfExciting
from .core import Dataset, DataValidationError, Event, EventSequence, load_dataset, save_dataset, split_dataset
from .estimator import CEGEstimator, EtasEstimator
from .nets import CegModel, CvaeNets, load_model, save_model

__all__ = [
    "Dataset", "DataValidationError", "Event", "EventSequence", "load_dataset", "save_dataset", "split_dataset",
    "SelfExciting", "SelfCorrecting", "Etas", "CegModel", "CvaeNets", "load_model", "save_model",
    "CEGEstimator", "EtasEstimator",
]
__version__ = "0.1.0"
