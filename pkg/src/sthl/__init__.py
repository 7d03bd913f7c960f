"""Spatial-temporal hypergraph learning for multichannel time-series windows."""
from .autograd import backward, gradcheck
from .construction import ConstructionParams, HypergraphSnapshot, build_snapshot
from .dataset import SamplePair, SyntheticSpec, WindowedDataset, generate_synthetic, load_dataset
from .model import ModelConfig, SthlModel, forward, init_model, load_checkpoint, save_checkpoint
from .training import MetricsReport, TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "ConstructionParams", "HypergraphSnapshot", "MetricsReport", "ModelConfig", "SamplePair",
    "SthlModel", "SyntheticSpec", "TrainConfig", "WindowedDataset", "backward", "build_snapshot",
    "evaluate", "forward", "gradcheck", "generate_synthetic", "init_model", "load_checkpoint",
    "load_dataset", "save_checkpoint", "train",
]
