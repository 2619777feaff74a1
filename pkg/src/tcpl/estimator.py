"""scikit-learn style front end to the prototype classifier.

    >>> clf = TCPLClassifier(epochs=60, epoch_update_proto=40)
    >>> clf.fit(X_source, y_source, X_target=X_target)
    >>> clf.predict(X_target)
    >>> clf.explain(X_target[:1])[0].top_evidence()

``X`` arrays are ``(n, H, W, 3)`` images, float in ``[0, 1]`` or ``uint8``.
"""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_is_fitted

from .config import TrainConfig, apply_overrides, load_config_dict
from .data import SOURCE, TARGET
from .interpret import build_trace
from .trainer import fit as train, load_state
from .validation import check_images, dataset_from_arrays


class TCPLClassifier(ClassifierMixin, BaseEstimator):
    """Interpretable prototype classifier adapted to an unlabeled target domain.

    Parameters left at ``None`` take their value from ``config`` (a mapping,
    a :class:`~tcpl.config.TrainConfig` or a path to a YAML/JSON file), which
    in turn defaults to :class:`~tcpl.config.TrainConfig`.

    Attributes
    ----------
    classes_ : ndarray of shape (n_classes,)
    model_ : PrototypeNetwork
    state_ : TrainState
        Final training state, including the pseudo-labeled set and history.
    config_ : TrainConfig
        The resolved configuration used for fitting.
    image_shape_ : tuple
    """

    def __init__(self, config=None, epochs=None, epoch_update_proto=None, lr0=None, M=None, D=None,
                 pool_sizes=None, pseudo_label=None, batch_size=None, seed=None, out_dir=None):
        self.config = config
        self.epochs = epochs
        self.epoch_update_proto = epoch_update_proto
        self.lr0 = lr0
        self.M = M
        self.D = D
        self.pool_sizes = pool_sizes
        self.pseudo_label = pseudo_label
        self.batch_size = batch_size
        self.seed = seed
        self.out_dir = out_dir

    def _resolve_config(self) -> TrainConfig:
        if isinstance(self.config, TrainConfig):
            raw = self.config.to_dict()
        elif isinstance(self.config, dict):
            raw = dict(self.config)
        elif self.config is None:
            raw = {}
        else:
            raw = load_config_dict(self.config)
        overrides = [(k, getattr(self, k)) for k in
                     ("epochs", "epoch_update_proto", "lr0", "M", "D", "pseudo_label", "seed")
                     if getattr(self, k) is not None]
        if self.pool_sizes is not None:
            overrides.append(("pool_sizes", list(self.pool_sizes)))
        if self.batch_size is not None:
            overrides += [("batch_size.source", self.batch_size), ("batch_size.target_pl", self.batch_size)]
        return TrainConfig.from_dict(apply_overrides(raw, overrides))

    def fit(self, X, y, X_target=None, monitor=None):
        """Train on labeled source images and, optionally, unlabeled target images.

        ``monitor(model, plt) -> dict`` adds metrics to every epoch record.
        """
        X = check_images(X)
        y = np.asarray(y)
        if y.shape != (len(X),):
            raise ValueError(f"y must have shape ({len(X)},), got {y.shape}")
        self.config_ = self._resolve_config()
        encoder = LabelEncoder().fit(y)
        self.classes_ = encoder.classes_
        if len(self.classes_) < 2:
            raise ValueError("need samples of at least two classes")
        names = [str(c) for c in self.classes_]
        source = dataset_from_arrays(X, encoder.transform(y), names, SOURCE)
        target = None
        if X_target is not None:
            Xt = check_images(X_target, "X_target")
            if Xt.shape[1:] != X.shape[1:]:
                raise ValueError(f"target images {Xt.shape[1:]} differ from source images {X.shape[1:]}")
            target = dataset_from_arrays(Xt, None, names, TARGET)
        self.image_shape_ = X.shape[1:]
        self.state_ = train(self.config_, source, target, out_dir=self.out_dir, monitor=monitor)
        self.model_ = self.state_.model.eval()
        return self

    @classmethod
    def from_checkpoint(cls, path):
        """A fitted estimator restored from a training checkpoint."""
        state, payload = load_state(path)
        est = cls(config=payload["config"])
        est.config_ = TrainConfig.from_dict(payload["config"])
        est.state_ = state
        est.model_ = state.model.eval()
        names = payload["class_names"]
        est.classes_ = np.asarray(names)
        size = payload["provenance"][0]["image"].shape if payload["provenance"][0] is not None else None
        est.image_shape_ = size
        return est

    def _check_input(self, X):
        check_is_fitted(self, "model_")
        X = check_images(X)
        if self.image_shape_ is not None and X.shape[1:] != tuple(self.image_shape_):
            raise ValueError(f"expected images of shape {tuple(self.image_shape_)}, got {X.shape[1:]}")
        return X

    def decision_function(self, X):
        """Class logits, shape ``(n, n_classes)``."""
        X = self._check_input(X)
        _, logits = self.model_.predict_batches(X)
        return logits

    def predict_proba(self, X):
        logits = self.decision_function(X).astype(np.float64)
        z = np.exp(logits - logits.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]

    def transform(self, X):
        """Prototype similarities ``f``, shape ``(n, n_prototypes)``."""
        X = self._check_input(X)
        f, _ = self.model_.predict_batches(X)
        return f

    def explain(self, X, ids=None):
        """One :class:`~tcpl.interpret.ExplanationTrace` per image."""
        X = self._check_input(X)
        ids = ids if ids is not None else [f"query-{i:05d}" for i in range(len(X))]
        names = [str(c) for c in self.classes_]
        cfg = self.config_
        with torch.no_grad():
            return [build_trace(img, self.model_, sid, names, cfg.box_percentile, cfg.box_rule)
                    for img, sid in zip(X, ids)]
