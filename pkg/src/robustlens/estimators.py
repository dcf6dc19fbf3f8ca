"""scikit-learn style wrappers: classifier, explainers and class-conditional MVN.

These compose with ``sklearn.base.clone``, ``get_params`` / ``set_params``
and pipelines. The functional modules underneath remain the source of
truth; the wrappers only validate input and hold fitted state.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import attributions as attr
from .attacks import AttackConfig
from .data import Dataset
from .featureviz import mvn_factor, mvn_fit, mvn_sample
from .models import (NetworkSpec, ParameterStore, build, predict_logits,
                     predict_representation)
from .tensor import softmax_np
from .training import TrainConfig, evaluate, train
from .validation import check_images, check_labels


class ResNetClassifier(ClassifierMixin, BaseEstimator):
    """Residual network trained with plain SGD, optionally on PGD examples.

    Parameters
    ----------
    block, widths, blocks : architecture (see :class:`NetworkSpec`).
    lr, epochs, batch_size : SGD schedule.
    adversarial : train on L2/Linf PGD examples generated per mini-batch.
    clean_epochs, warmup_epochs : adversarial schedule, see :class:`TrainConfig`.
    norm, epsilon, step_size, pgd_iterations : attack used for adversarial
        training and for :meth:`robust_score`.
    random_state : seeds initialisation, shuffling and attack starts.
    """

    def __init__(self, block="basic", widths=(16, 32, 64), blocks=(2, 2, 2), lr=0.05, epochs=30,
                 batch_size=64, adversarial=False, clean_epochs=0.0, warmup_epochs=0.0, norm="l2",
                 epsilon=0.5, step_size=0.1, pgd_iterations=7, dtype="float32", random_state=0):
        self.block = block
        self.widths = widths
        self.blocks = blocks
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.adversarial = adversarial
        self.clean_epochs = clean_epochs
        self.warmup_epochs = warmup_epochs
        self.norm = norm
        self.epsilon = epsilon
        self.step_size = step_size
        self.pgd_iterations = pgd_iterations
        self.dtype = dtype
        self.random_state = random_state

    def attack_config(self) -> AttackConfig:
        return AttackConfig(norm=self.norm, epsilon=self.epsilon, step_size=self.step_size,
                            iterations=self.pgd_iterations, seed=int(self.random_state) + 2)

    def fit(self, X, y, eval_set=None):
        X = check_images(X, dtype=np.dtype(self.dtype))
        self.classes_, y_idx = np.unique(np.asarray(y), return_inverse=True)
        spec = NetworkSpec(input_shape=X.shape[1:], num_classes=len(self.classes_), block=self.block,
                           widths=tuple(self.widths), blocks=tuple(self.blocks))
        seed = int(self.random_state)
        params = build(spec, seed, dtype=np.dtype(self.dtype))
        cfg = TrainConfig(lr=self.lr, epochs=self.epochs, batch_size=self.batch_size, seed=seed + 1,
                          mode="adversarial" if self.adversarial else "standard",
                          attack=self.attack_config(), clean_epochs=self.clean_epochs,
                          warmup_epochs=self.warmup_epochs)
        names = [str(c) for c in self.classes_]
        eval_data = None
        if eval_set is not None:
            Xe = check_images(eval_set[0], shape=X.shape[1:], dtype=X.dtype)
            ye = np.searchsorted(self.classes_, np.asarray(eval_set[1]))
            eval_data = Dataset(Xe, ye, names, "test")
        result = train(params, Dataset(X, y_idx, names), cfg, eval_data=eval_data)
        self.params_ = result.best
        self.final_params_ = result.params
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    @classmethod
    def from_params(cls, params: ParameterStore, classes=None, **kwargs) -> "ResNetClassifier":
        """Wrap an already trained parameter store."""
        spec = params.spec
        est = cls(block=spec.block, widths=spec.widths, blocks=spec.blocks, **kwargs)
        est.params_ = params
        est.classes_ = np.arange(spec.num_classes) if classes is None else np.asarray(classes)
        est.n_features_in_ = int(np.prod(spec.input_shape))
        return est

    def _inputs(self, X):
        check_is_fitted(self, "params_")
        return check_images(X, shape=self.params_.spec.input_shape, dtype=self.params_.dtype)

    def decision_function(self, X):
        X = self._inputs(X)
        return predict_logits(self.params_, X)

    def predict_proba(self, X):
        return softmax_np(self.decision_function(X).astype(np.float64))

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]

    def transform(self, X):
        """Penultimate representation R(x), shape (N, k)."""
        X = self._inputs(X)
        return predict_representation(self.params_, X)

    def robust_score(self, X, y, attack: Optional[AttackConfig] = None) -> float:
        """Accuracy on PGD examples, as a fraction in [0, 1]."""
        X = self._inputs(X)
        y_idx = np.searchsorted(self.classes_, np.asarray(y))
        names = [str(c) for c in self.classes_]
        report = evaluate(self.params_, Dataset(X, y_idx, names), attack or self.attack_config())
        return report.robust_accuracy / 100.0


def _model_of(model):
    if isinstance(model, ResNetClassifier):
        check_is_fitted(model, "params_")
        return model.params_
    return model


class IntegratedGradientsExplainer(TransformerMixin, BaseEstimator):
    """Integrated Gradients as a transformer: images in, attribution maps out.

    ``baseline`` is ``"zeros"``, ``"uniform_noise"`` or an explicit array.
    ``target`` is ``"predicted"``, ``"label"`` (needs ``y`` at transform
    time) or a class index.
    """

    def __init__(self, model=None, steps=50, baseline="zeros", target="predicted", score="softmax",
                 normalization="interval", random_state=0):
        self.model = model
        self.steps = steps
        self.baseline = baseline
        self.target = target
        self.score = score
        self.normalization = normalization
        self.random_state = random_state

    def fit(self, X=None, y=None):
        self.fitted_ = True
        return self

    def _baseline_for(self, x, i):
        if isinstance(self.baseline, np.ndarray):
            return self.baseline.astype(x.dtype)
        if self.baseline == "zeros":
            return np.zeros_like(x)
        if self.baseline == "uniform_noise":
            rng = np.random.default_rng([int(self.random_state), i])
            return rng.uniform(0.0, 1.0, size=x.shape).astype(x.dtype)
        raise ValueError(f"unsupported baseline {self.baseline!r}")

    def explain(self, x, target=None, index: int = 0) -> attr.AttributionMap:
        model = _model_of(self.model)
        x = check_images(x, dtype=None)[0]
        return attr.integrated_gradients(model, x, self._baseline_for(x, index),
                                         target if target is not None else self.target,
                                         self.steps, self.score, self.normalization)

    def transform(self, X, y=None):
        X = check_images(X, dtype=None)
        targets = _targets(self.target, y, len(X))
        return np.stack([self.explain(x, t, i).values for i, (x, t) in enumerate(zip(X, targets))])


class ExpectedGradientsExplainer(TransformerMixin, BaseEstimator):
    """Expected Gradients; :meth:`fit` stores the background reference set."""

    def __init__(self, model=None, samples=200, target="predicted", score="softmax", random_state=0):
        self.model = model
        self.samples = samples
        self.target = target
        self.score = score
        self.random_state = random_state

    def fit(self, X, y=None):
        self.background_ = check_images(X, dtype=None)
        if len(self.background_) == 0:
            raise ValueError("background set is empty")
        return self

    def explain(self, x, target=None, index: int = 0) -> attr.AttributionMap:
        check_is_fitted(self, "background_")
        x = check_images(x, dtype=None)[0]
        return attr.expected_gradients(_model_of(self.model), x, self.background_, self.samples,
                                       target if target is not None else self.target,
                                       seed=int(self.random_state) + index, score=self.score)

    def transform(self, X, y=None):
        X = check_images(X, dtype=None)
        targets = _targets(self.target, y, len(X))
        return np.stack([self.explain(x, t, i).values for i, (x, t) in enumerate(zip(X, targets))])


def _targets(policy, y, n):
    if policy == "label":
        if y is None:
            raise ValueError("target='label' needs y")
        return [int(v) for v in check_labels(y, n)]
    return [policy] * n


class ClassConditionalMVN(BaseEstimator):
    """Per-class Gaussian over flattened pixels, used to draw starting images."""

    def __init__(self, ridge=1e-6, clip=(0.0, 1.0)):
        self.ridge = ridge
        self.clip = clip

    def fit(self, X, y):
        X = check_images(X, dtype=np.float64)
        y = check_labels(y, len(X))
        self.classes_ = np.unique(y)
        self.image_shape_ = X.shape[1:]
        self.stats_ = {int(c): mvn_fit(X[y == c]) for c in self.classes_}
        self.factors_ = {c: mvn_factor(s, self.ridge) for c, s in self.stats_.items()}
        return self

    def sample(self, label: int, n: int = 1, random_state: int = 0) -> np.ndarray:
        check_is_fitted(self, "stats_")
        label = int(label)
        if label not in self.stats_:
            raise ValueError(f"class {label} was not seen during fit")
        return mvn_sample(self.stats_[label], seed=random_state, count=n, shape=self.image_shape_,
                          ridge=self.ridge, clip=self.clip, factor=self.factors_[label]).astype(np.float32)
