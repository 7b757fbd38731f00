"""Interpretable fuzzy spatiotemporal P300 decoder."""

from .epochs import EpochSet, FilterSpec, SynthSpec, load_epochs, save_epochs, synth_oddball
from .model import ModelDims, ModelState, forward, forward_batch, init_model
from .training import TrainConfig, fit

__all__ = [
    "EpochSet", "FilterSpec", "SynthSpec", "load_epochs", "save_epochs", "synth_oddball",
    "ModelDims", "ModelState", "forward", "forward_batch", "init_model",
    "TrainConfig", "fit",
]
__version__ = "0.1.0"
