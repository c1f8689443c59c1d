"""spikecast: train compact CNN classifiers, convert them to spiking
networks, map them onto a simulated many-core neuromorphic chip, and compare
accuracy/latency/power/energy against edge accelerator profiles."""

__version__ = "0.1.0"

from .imaging import Dataset, ImageSample, ingest, make_synthetic_dataset
from .model import (
    LayerGraph,
    ModelSpec,
    SearchSpace,
    instantiate,
    load_model,
    param_count,
    preset_spec,
    save_model,
    table1_space,
)
from .training import TrainConfig, train

__all__ = [
    "Dataset",
    "ImageSample",
    "LayerGraph",
    "ModelSpec",
    "SearchSpace",
    "TrainConfig",
    "ingest",
    "instantiate",
    "load_model",
    "make_synthetic_dataset",
    "param_count",
    "preset_spec",
    "save_model",
    "table1_space",
    "train",
]
