"""scikit-learn compatible wrapper around the functional training API."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, column_or_1d

from graphmamba.errors import DimensionError
from graphmamba.model import ModelConfig
from graphmamba.training import TrainConfig, predict_logits, train


def check_patches(X, patch_size: int | None = None, bands: int | None = None, dtype=np.float64) -> np.ndarray:
    """Validate a batch x S x S x bands patch array and return it as ``dtype``."""
    X = check_array(X, allow_nd=True, dtype=dtype, ensure_all_finite=True)
    if X.ndim != 4 or X.shape[1] != X.shape[2]:
        raise DimensionError(f"expected patches shaped (n, S, S, bands), got {X.shape}")
    if patch_size is not None and X.shape[1] != patch_size:
        raise DimensionError(f"patches are {X.shape[1]}x{X.shape[2]}, estimator expects {patch_size}")
    if bands is not None and X.shape[3] != bands:
        raise DimensionError(f"patches have {X.shape[3]} bands, estimator was fit on {bands}")
    return X


class GraphMambaClassifier(ClassifierMixin, BaseEstimator):
    """Patch classifier: dual tokenization, token graph, cross-attention, GRU head.

    ``X`` is an ``(n_samples, S, S, bands)`` array of patches and ``y`` any
    array of hashable class labels (one per patch, taken at its center).

    Parameters
    ----------
    patch_size : int
        Odd spatial extent S of each patch.
    feature_dim : int
        Token width after the dense projections.
    model_dim : int
        Width of attention keys/queries, fusion and the recurrent state.
    n_spectral_tokens, n_priority : int or None
        Token counts; ``None`` uses S and half the token total respectively.
    l2 : float
        Squared-norm penalty on the classifier weights.
    epochs, batch_size, learning_rate : training schedule for Adam.
    precision : {"float32", "float64"}
    random_state : int
        Seeds both initialization and per-epoch shuffling.
    """

    def __init__(
        self,
        patch_size=7,
        feature_dim=64,
        model_dim=128,
        n_spectral_tokens=None,
        n_priority=None,
        l2=0.01,
        epochs=50,
        batch_size=56,
        learning_rate=0.001,
        precision="float32",
        random_state=0,
    ):
        self.patch_size = patch_size
        self.feature_dim = feature_dim
        self.model_dim = model_dim
        self.n_spectral_tokens = n_spectral_tokens
        self.n_priority = n_priority
        self.l2 = l2
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.precision = precision
        self.random_state = random_state

    def _configs(self, bands: int, n_classes: int) -> tuple[ModelConfig, TrainConfig]:
        model = ModelConfig(
            bands=bands,
            n_classes=n_classes,
            patch_size=self.patch_size,
            feature_dim=self.feature_dim,
            model_dim=self.model_dim,
            n_spectral_tokens=self.n_spectral_tokens,
            n_priority=self.n_priority,
            l2=self.l2,
        )
        schedule = TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            l2=self.l2,
            seed=self.random_state,
            precision=self.precision,
        )
        return model, schedule

    def fit(self, X, y):
        X = check_patches(X, self.patch_size)
        y = column_or_1d(y, warn=True)
        if len(y) != len(X):
            raise DimensionError(f"{len(X)} patches but {len(y)} labels")
        self.classes_, encoded = np.unique(y, return_inverse=True)
        self.config_, self.train_config_ = self._configs(X.shape[3], len(self.classes_))
        self.params_, self.history_ = train(X, encoded, self.config_, self.train_config_)
        self.n_bands_ = X.shape[3]
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        X = check_patches(X, self.patch_size, self.n_bands_)
        return predict_logits(self.params_, X, self.config_)

    def predict_proba(self, X) -> np.ndarray:
        logits = self.decision_function(X).astype(np.float64)
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        logits = self.decision_function(X)
        return self.classes_[logits.argmax(axis=1)]
