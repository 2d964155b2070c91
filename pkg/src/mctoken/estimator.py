"""scikit-learn style wrapper around training and map construction."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_images, check_labels
from .config import ExperimentConfig
from .explain import ConceptLocalizer


class ConceptTokenClassifier(ClassifierMixin, BaseEstimator):
    """Multi-label concept classifier that also explains its predictions.

    ``fit`` trains on (n, H, W, 3) images with (n, C) binary labels,
    ``predict_proba`` returns (n, C) probabilities and ``transform``
    returns normalized (n, H, W, C) localization maps. Less common model
    and training settings go through ``model_params`` / ``train_params``
    (keys of the corresponding config sections).
    """

    def __init__(self, variant="hybrid", pooling="gmp", epochs=30, lr=1e-3, batch_size=16,
                 loss_mode="separate", separation=True, random_state=0, threshold=0.5,
                 model_params=None, train_params=None):
        self.variant = variant
        self.pooling = pooling
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.loss_mode = loss_mode
        self.separation = separation
        self.random_state = random_state
        self.threshold = threshold
        self.model_params = model_params
        self.train_params = train_params

    def _config(self, image_size: int, num_concepts: int) -> ExperimentConfig:
        model = {"variant": self.variant, "pooling": self.pooling, "image_size": image_size,
                 "num_concepts": num_concepts, "seed": self.random_state, **(self.model_params or {})}
        train = {"epochs": self.epochs, "lr": self.lr, "batch_size": self.batch_size,
                 "loss_mode": self.loss_mode, "separation": self.separation,
                 "seed": self.random_state, **(self.train_params or {})}
        return ExperimentConfig.from_dict({"model": model, "train": train})

    def fit(self, X, y, X_val=None, y_val=None):
        from .training import build_model, fit

        X = check_images(X)
        y = check_labels(y, len(X))
        if len(X) == 0:
            raise ValueError("cannot fit on an empty dataset")
        cfg = self._config(X.shape[1], y.shape[1])
        if X_val is not None:
            X_val = check_images(X_val, X.shape[1])
            y_val = check_labels(y_val, len(X_val), y.shape[1])
        self.config_ = cfg
        self.model_ = build_model(cfg)
        self.result_ = fit(self.model_, cfg, X, y, X_val, y_val)
        self.history_ = self.result_.history
        self.n_concepts_ = y.shape[1]
        self.classes_ = np.arange(y.shape[1])
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_images(X, self.config_.model.image_size)
        return self.model_.predict_proba(X)

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) >= self.threshold).astype(np.uint8)

    def transform(self, X) -> np.ndarray:
        """Normalized localization maps, shape (n, H, W, C)."""
        check_is_fitted(self, "model_")
        X = check_images(X, self.config_.model.image_size)
        return ConceptLocalizer(self.model_, self.config_.explain)(X)

    def score(self, X, y, sample_weight=None) -> float:
        """Elementwise accuracy over all (image, concept) entries."""
        pred = self.predict(X)
        y = check_labels(y, len(pred), self.n_concepts_)
        hits = (pred == y).mean(axis=1)
        return float(np.average(hits, weights=sample_weight))
