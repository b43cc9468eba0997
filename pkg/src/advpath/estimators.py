"""scikit-learn compatible wrappers around the classifier and the attacks.

Images are passed as ``[N, C, H, W]`` arrays on the 0-255 scale; flat
``[N, C*H*W]`` rows are reshaped using ``input_shape`` so the estimators
also work inside sklearn pipelines and model-selection utilities.
"""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import attack as A
from .model import Model, ModelSpec, TrainConfig, build_model, predict_proba, train


def _images(X, input_shape):
    X = check_array(X, allow_nd=True, dtype=np.float32)
    if X.ndim == 2:
        X = X.reshape((X.shape[0],) + tuple(input_shape))
    return np.ascontiguousarray(X)


class PatchClassifier(ClassifierMixin, BaseEstimator):
    """Small CNN trained from scratch on image patches.

    Parameters
    ----------
    layers : list of dict, optional
        Layer list for :class:`~advpath.model.ModelSpec`; the desk-scale
        default when None.
    input_shape : tuple, default=(3, 32, 32)
    optimizer : {"adadelta", "sgd"}, default="adadelta"
    lr : float, default=0.01
    epochs : int, default=25
    batch_size : int, default=16
    snapshot_every : int, default=1
    random_state : int, default=0
        Seeds both initialization and the per-epoch example order.

    Attributes
    ----------
    model_ : Model
    snapshots_ : ndarray of shape (n_snapshots, n_params)
    loss_curve_ : list of float
    classes_ : ndarray of shape (2,)
    """

    def __init__(self, layers=None, input_shape=(3, 32, 32), optimizer="adadelta", lr=0.01, epochs=25,
                 batch_size=16, snapshot_every=1, random_state=0):
        self.layers = layers
        self.input_shape = input_shape
        self.optimizer = optimizer
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.snapshot_every = snapshot_every
        self.random_state = random_state

    def _spec(self):
        if self.layers is None:
            return ModelSpec(input_shape=self.input_shape)
        return ModelSpec(input_shape=self.input_shape, layers=self.layers)

    def fit(self, X, y):
        X = _images(X, self.input_shape)
        y = np.asarray(y)
        cfg = TrainConfig(optimizer=self.optimizer, lr=self.lr, epochs=self.epochs, batch_size=self.batch_size,
                          seed=self.random_state, snapshot_every=self.snapshot_every)
        model = build_model(self._spec(), self.random_state)
        self.model_, self.snapshots_, self.loss_curve_ = train(model, (X, y), cfg)
        self.classes_ = np.array([0, 1])
        return self

    @classmethod
    def from_model(cls, model):
        """Wrap an already trained :class:`Model`."""
        est = cls(layers=model.spec.layers, input_shape=model.spec.input_shape, random_state=model.seed)
        est.model_ = model
        est.classes_ = np.array([0, 1])
        return est

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return predict_proba(self.model_, _images(X, self.model_.spec.input_shape))

    def decision_function(self, X):
        return self.predict_proba(X)[:, 1]

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1)


def _model_of(estimator):
    if isinstance(estimator, Model):
        return estimator
    check_is_fitted(estimator, "model_")
    return estimator.model_


class PGDAttack(TransformerMixin, BaseEstimator):
    """Per-image PGD attack as a transformer.

    ``transform(X, y)`` returns the perturbed images; without ``y`` the
    model's own predictions serve as the labels to move away from.  Details of
    the last call are kept in ``results_``.
    """

    def __init__(self, estimator=None, kind="none", budget=0.0, step_size=1.0, max_steps=500,
                 confidence=0.9, normalize="rms", random_state=0):
        self.estimator = estimator
        self.kind = kind
        self.budget = budget
        self.step_size = step_size
        self.max_steps = max_steps
        self.confidence = confidence
        self.normalize = normalize
        self.random_state = random_state

    def _config(self):
        return A.AttackConfig(step_size=self.step_size, max_steps=self.max_steps, confidence=self.confidence,
                              seed=self.random_state, normalize=self.normalize).validate()

    def fit(self, X=None, y=None):
        self.model_ = _model_of(self.estimator)
        self.constraint_ = A.ConstraintSpec(self.kind, self.budget)
        self._config()
        return self

    def attack(self, X, y=None):
        """Run the attack and return a list of :class:`~advpath.attack.AttackResult`."""
        if not hasattr(self, "model_"):
            self.fit()
        X = _images(X, self.model_.spec.input_shape)
        if y is None:
            y = predict_proba(self.model_, X).argmax(axis=1)
        cfg = self._config()
        self.results_ = [A.single_instance_attack(self.model_, x, int(t), self.constraint_, cfg) for x, t in zip(X, y)]
        return self.results_

    def transform(self, X, y=None):
        X = _images(X, _model_of(self.estimator).spec.input_shape)
        results = self.attack(X, y)
        return np.stack([A.apply(x, r.perturbation.delta) for x, r in zip(X, results)])

    def fit_transform(self, X, y=None, **fit_params):
        return self.fit(X, y).transform(X, y)

    def score(self, X, y=None):
        """Attack success rate."""
        return float(np.mean([r.success for r in self.attack(X, y)]))


class UniversalPerturbation(TransformerMixin, BaseEstimator):
    """One perturbation fitted on a training set and added to any image."""

    def __init__(self, estimator=None, step_size=0.2, epochs=2, kind=None, budget=0.0, confidence=0.9,
                 normalize="rms", random_state=0):
        self.estimator = estimator
        self.step_size = step_size
        self.epochs = epochs
        self.kind = kind
        self.budget = budget
        self.confidence = confidence
        self.normalize = normalize
        self.random_state = random_state

    def fit(self, X, y):
        model = _model_of(self.estimator)
        X = _images(X, model.spec.input_shape)
        cfg = A.AttackConfig(step_size=self.step_size, epochs=self.epochs, confidence=self.confidence,
                             seed=self.random_state, normalize=self.normalize)
        constraint = None if self.kind in (None, "none") else A.ConstraintSpec(self.kind, self.budget)
        self.perturbation_ = A.universal_attack(model, (X, np.asarray(y)), cfg, constraint)
        self.delta_ = self.perturbation_.delta
        return self

    def transform(self, X):
        check_is_fitted(self, "delta_")
        model = _model_of(self.estimator)
        return A.apply(_images(X, model.spec.input_shape), self.delta_)

    def score(self, X, y):
        """Fooling rate over the correctly classified part of ``(X, y)``."""
        check_is_fitted(self, "delta_")
        model = _model_of(self.estimator)
        s, n = A.fooling_counts(model, _images(X, model.spec.input_shape), np.asarray(y), self.delta_, self.confidence)
        return s / n if n else 0.0
