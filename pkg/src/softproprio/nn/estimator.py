"""scikit-learn style wrapper around the encoder/folding-decoder."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ..geometry import chamfer_bidirectional
from .model import ModelConfig, build_model
from .train import TrainConfig, train


def _check_images(X) -> np.ndarray:
    X = np.asarray(getattr(X, "pixels", X))
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3 or X.shape[1] != X.shape[2]:
        raise ValueError(f"expected square images shaped (n, size, size), got {X.shape}")
    if X.size and (X.min() < 0 or X.max() > 1):
        raise ValueError("binary images must hold values in {0, 1}")
    return X.astype(np.uint8)


def _check_clouds(y, n: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 3 or y.shape[2] != 3 or y.shape[0] != n:
        raise ValueError(f"expected {n} clouds shaped (n, points, 3), got {y.shape}")
    if not np.all(np.isfinite(y)):
        raise ValueError("clouds contain non-finite coordinates")
    return y


class ShapeReconstructor(BaseEstimator):
    """Binary camera image -> point cloud of the actuator surface.

    ``fit(images, clouds)`` trains from scratch (or continues when
    ``warm_start``); ``predict(images)`` returns ``(n, points, 3)`` in mm.
    """

    def __init__(self, prototype=None, conv_widths=(16, 32, 64, 128, 256), batch_size=50,
                 learning_rate=1e-4, weight_decay=1e-6, epochs=100, validation=None, seed=0,
                 warm_start=False, verbose=False):
        self.prototype = prototype
        self.conv_widths = conv_widths
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.validation = validation
        self.seed = seed
        self.warm_start = warm_start
        self.verbose = verbose

    def fit(self, X, y):
        X = _check_images(X)
        y = _check_clouds(y, len(X))
        if self.prototype is None:
            raise ValueError("a prototype point cloud is required")
        if not (self.warm_start and hasattr(self, "model_")):
            cfg = ModelConfig(image_size=X.shape[1], conv_widths=tuple(self.conv_widths))
            self.model_ = build_model(cfg, self.prototype, seed=self.seed)
        val = (X, y) if self.validation is None else self.validation
        val = (_check_images(val[0]), _check_clouds(val[1], len(val[0])))
        cfg = TrainConfig(batch_size=min(self.batch_size, len(X)), learning_rate=self.learning_rate,
                          weight_decay=self.weight_decay, epochs=self.epochs, seed=self.seed)
        self.model_, self.history_ = train(self.model_, (X, y), val, cfg, log=print if self.verbose else None)
        self.n_points_ = self.model_.n_points
        return self

    def predict(self, X, batch_size: int = 50) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = _check_images(X)
        return np.concatenate([self.model_.predict(X[i : i + batch_size]) for i in range(0, len(X), batch_size)])

    def transform(self, X):
        """Latent codes ``(n, 512)``."""
        check_is_fitted(self, "model_")
        X = _check_images(X)
        return self.model_.encode(X).data.astype(np.float64)

    def score(self, X, y):
        """Negative mean bidirectional Chamfer distance (mm); higher is better."""
        pred = self.predict(X)
        y = _check_clouds(y, len(pred))
        return -float(np.mean([chamfer_bidirectional(p, t) for p, t in zip(pred, y)]))
