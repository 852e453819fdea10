"""scikit-learn compatible front end.

:class:`SpatialForecaster` wraps model construction, training and one-step
prediction behind ``fit`` / ``predict_proba`` / ``predict`` / ``score`` so the
models work with ``clone``, ``get_params`` / ``set_params`` and parameter
searches. Inputs are bouncing-balls datasets (objects or file paths).
"""
from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .errors import ConfigError, DimensionError, InputError
from .evalsuite import one_step_eval
from .recurrent import MODEL_KINDS, BaselineConfig, S2RMConfig, build_model
from .trainer import Checkpoint, TrainConfig, load_checkpoint, train
from .worldsim import CENTER_MAX, CENTER_MIN, CROP, BouncingBallsDataset, load_dataset


def check_dataset(X) -> BouncingBallsDataset:
    """Accept a dataset object or a path to a dataset file."""
    if isinstance(X, (str, Path)):
        return load_dataset(X)
    if not (hasattr(X, "__getitem__") and hasattr(X, "__len__")):
        raise TypeError(f"expected a dataset or a dataset path, got {type(X).__name__}")
    if len(X) == 0:
        raise InputError("dataset is empty")
    return X


def check_views(centers, crops):
    """Validate one step of observations: ``centers (..., A, 2)`` integer pixel
    positions inside the crop-able area and matching ``crops (..., A, 11, 11)``."""
    centers = np.asarray(centers)
    crops = np.asarray(crops, dtype=float)
    if centers.shape[-1:] != (2,):
        raise DimensionError(f"centers must end in an axis of size 2, got {centers.shape}")
    if crops.shape[-2:] != (CROP, CROP) or crops.shape[:-2] != centers.shape[:-1]:
        raise DimensionError(f"crops {crops.shape} do not match centers {centers.shape}")
    if centers.size and (centers.min() < CENTER_MIN or centers.max() > CENTER_MAX):
        raise InputError(f"centers must lie in [{CENTER_MIN}, {CENTER_MAX}]")
    if crops.size and (crops.min() < 0 or crops.max() > 1):
        raise InputError("crop values must lie in [0, 1]")
    return centers, crops


_S2RM_FIELDS = {f.name for f in dataclasses.fields(S2RMConfig)}
_BASELINE_FIELDS = {f.name for f in dataclasses.fields(BaselineConfig)} - {"core"}


class SpatialForecaster(BaseEstimator):
    """One-step crop forecaster for partially observed bouncing-balls videos.

    ``kind`` selects the model (``s2gru``, ``baseline-gru``, ``baseline-lstm``
    or ``tto``); model fields that do not apply to the chosen kind are ignored.
    """

    def __init__(self, kind="s2gru", n_modules=4, hidden=32, embed_dim=16, epsilon=1.0, tau=0.6,
                 input_heads=2, input_key=16, input_value=32, ic_heads=2, ic_key=16, ic_value=32,
                 enc_width=64, codec_hidden=256, gate_hidden=32, embed_init="positions", tto_hidden=512,
                 lr=3e-4, batch_size=8, epochs=40, seed=0, dtype="float32"):
        self.kind = kind
        self.n_modules = n_modules
        self.hidden = hidden
        self.embed_dim = embed_dim
        self.epsilon = epsilon
        self.tau = tau
        self.input_heads = input_heads
        self.input_key = input_key
        self.input_value = input_value
        self.ic_heads = ic_heads
        self.ic_key = ic_key
        self.ic_value = ic_value
        self.enc_width = enc_width
        self.codec_hidden = codec_hidden
        self.gate_hidden = gate_hidden
        self.embed_init = embed_init
        self.tto_hidden = tto_hidden
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed
        self.dtype = dtype

    def model_params(self) -> dict:
        fields = _S2RM_FIELDS if self.kind == "s2gru" else _BASELINE_FIELDS
        return {k: v for k, v in self.get_params().items() if k in fields}

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, batch_size=self.batch_size, epochs=self.epochs,
                           seed=self.seed, dtype=self.dtype)

    def _build(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}")
        return build_model(self.kind, **self.model_params())

    def fit(self, X, y=None, validation=None, out_dir=None):
        """Train on dataset ``X``. ``y`` is unused (targets are the future crops).

        Without ``validation`` the last tenth of ``X`` is held out.
        """
        data = check_dataset(X)
        if validation is None:
            n_val = max(1, len(data) // 10)
            if len(data) - n_val < 1:
                raise InputError("need at least two sequences to hold out a validation split")
            train_idx, val_idx = range(len(data) - n_val), range(len(data) - n_val, len(data))
            train_set, val_set = _Subset(data, train_idx), _Subset(data, val_idx)
        else:
            train_set, val_set = data, check_dataset(validation)
        model = self._build()
        result = train(model, train_set, val_set, self.train_config(), out_dir=out_dir)
        self.checkpoint_ = result.checkpoint
        self.history_ = result.history
        self.model_ = result.checkpoint.build(torch.float64 if self.dtype == "float64" else torch.float32)
        self.model_.eval()
        return self

    @classmethod
    def from_checkpoint(cls, ckpt) -> "SpatialForecaster":
        ckpt = ckpt if isinstance(ckpt, Checkpoint) else load_checkpoint(ckpt)
        params = {k: v for k, v in ckpt.config.items() if k in cls._get_param_names()}
        train_cfg = ckpt.extra.get("train", {})
        params.update({k: v for k, v in train_cfg.items() if k in cls._get_param_names()})
        est = cls(kind=ckpt.kind, **{k: v for k, v in params.items() if k != "kind"})
        est.checkpoint_ = ckpt
        est.history_ = []
        est.model_ = ckpt.build()
        est.model_.eval()
        return est

    def predict_proba(self, X) -> np.ndarray:
        """Next-step crop probabilities at every next-step view center.

        Returns ``(N, T - 1, A, 121)``; entry ``[n, t]`` predicts the crops of
        step ``t + 1`` after consuming the views of steps ``0..t``.
        """
        check_is_fitted(self, "model_")
        data = check_dataset(X)
        model = self.model_
        dtype = next(model.parameters()).dtype
        out = []
        with torch.no_grad():
            for lo in range(0, len(data), 16):
                eps = [data[i] for i in range(lo, min(len(data), lo + 16))]
                centers = torch.as_tensor(np.stack([e.centers for e in eps]), dtype=dtype)
                crops = torch.as_tensor(np.stack([e.crops() for e in eps]), dtype=dtype)
                state = model.init_state(len(eps))
                steps = []
                for t in range(centers.shape[1] - 1):
                    src = t + 1 if model.uses_future_observations else t
                    state = model.step(state, centers[:, src], crops[:, src])
                    steps.append(torch.sigmoid(model.query(state, centers[:, t + 1])))
                out.append(torch.stack(steps, dim=1).double().numpy())
        return np.concatenate(out)

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) >= 0.5).astype(np.uint8)

    def score(self, X, y=None, drop_fraction: float = 0.0) -> float:
        """One-step balanced accuracy on ``X``."""
        check_is_fitted(self, "model_")
        return one_step_eval(self.model_, check_dataset(X), drop_fraction, seed=self.seed).balanced_accuracy


class _Subset:
    def __init__(self, data, indices):
        self.data = data
        self.indices = list(indices)
        self.n_balls = getattr(data, "n_balls", 0)

    def __len__(self):
        return len(self.indices)

    def __getitem__(self, i):
        return self.data[self.indices[i]]
