"""Federated, compressed and personalized Seq2Point models for energy disaggregation."""

from .data import PowerSeries, SynthSpec, WindowBatch, make_windows, synth_household
from .model import ArchSpec, ModelParams, TrainConfig, build_seq2point, forward, train
from .tensor import DivergenceError

__version__ = "0.1.0"

__all__ = [
    "ArchSpec",
    "DivergenceError",
    "ModelParams",
    "PowerSeries",
    "SynthSpec",
    "TrainConfig",
    "WindowBatch",
    "build_seq2point",
    "forward",
    "make_windows",
    "synth_household",
    "train",
]
