"""Spatially structured recurrent modules for partially observed bouncing-balls videos.

Typical use::

    from s2rm import SpatialForecaster
    est = SpatialForecaster(epochs=40, lr=3e-3).fit("data/train.bin", validation="data/val.bin")
    est.score("data/test_b3.bin")
"""
from .errors import (ConfigError, DegenerateInputError, DimensionError, FormatError, InputError, NumericError,
                     S2RMError)
from .estimator import SpatialForecaster
from .evalsuite import balanced_accuracy, f1, one_step_eval, robustness_sweep, rollout
from .geometry import KernelConfig, ModuleEmbeddings, embed_position, kernel
from .recurrent import MODEL_KINDS, S2RM, BaselineConfig, QueryBaseline, S2RMConfig, build_model
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train
from .worldsim import DatasetSpec, generate_dataset, load_dataset

__version__ = "0.1.0"

__all__ = [
    "BaselineConfig", "ConfigError", "DatasetSpec", "DegenerateInputError", "DimensionError", "FormatError",
    "InputError", "KernelConfig", "MODEL_KINDS", "ModuleEmbeddings", "NumericError", "QueryBaseline", "S2RM",
    "S2RMConfig", "S2RMError", "SpatialForecaster", "TrainConfig", "balanced_accuracy", "build_model",
    "embed_position", "f1", "generate_dataset", "kernel", "load_checkpoint", "load_dataset", "one_step_eval",
    "robustness_sweep", "rollout", "save_checkpoint", "train",
]
