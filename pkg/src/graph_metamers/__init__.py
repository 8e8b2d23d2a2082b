"""Metamer synthesis and invariance analysis for graph neural networks."""

from .errors import (ConfigError, DegenerateReferenceError, DimensionError, DivergenceError,
                     FormatError, MetamerError, NumericError)
from .graph import Graph, SbmSpec, generate_sbm, load_graph
from .models import ModelConfig, Model, build_model
from .synth import SynthConfig, synthesize
from .training import TrainConfig, train

__all__ = [
    "ConfigError", "DegenerateReferenceError", "DimensionError", "DivergenceError", "FormatError",
    "MetamerError", "NumericError", "Graph", "SbmSpec", "generate_sbm", "load_graph", "ModelConfig",
    "Model", "build_model", "SynthConfig", "synthesize", "TrainConfig", "train",
]
