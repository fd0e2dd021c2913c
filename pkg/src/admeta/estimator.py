"""Scikit-learn style facade over the meta-learning core.

``fit`` meta-trains an initialization on a base dataset whose labels
define the class pool; ``adapt`` specializes it to one new few-shot task
from a small support set; ``predict``/``score`` then operate on that
task. The estimator follows the usual conventions (``get_params``,
``set_params``, array validation), so it composes with scikit-learn
tooling.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import autodiff as ad
from .adversarial import AttackConfig
from .autodiff import Tensor
from .metalearn import MetaConfig, TrainerKind, inner_adapt, meta_train
from .models import ModelSpec, forward
from .tasks import TaskSource

__all__ = ["FewShotMetaClassifier"]


class FewShotMetaClassifier(BaseEstimator, ClassifierMixin):
    """Few-shot classifier with a meta-trained initialization.

    Parameters mirror the functional core: ``trainer`` picks the
    meta-training algorithm, ``epsilon`` the adversarial budget used by
    the adversarial trainers (ignored by plain MAML), and the rest are
    the usual step sizes and loop lengths.
    """

    def __init__(
        self,
        trainer: str = "adml",
        ways: int = 5,
        shots: int = 1,
        query_per_class: int = 10,
        hidden: tuple = (32,),
        alpha1: float = 0.05,
        alpha2: float = 0.05,
        beta1: float = 0.01,
        beta2: float = 0.01,
        inner_steps_train: int = 5,
        inner_steps_test: int = 10,
        meta_batch: int = 4,
        episodes: int = 500,
        epsilon: float = 0.0,
        clip: bool = True,
        order: str = "full",
        random_state: int = 0,
    ):
        self.trainer = trainer
        self.ways = ways
        self.shots = shots
        self.query_per_class = query_per_class
        self.hidden = hidden
        self.alpha1 = alpha1
        self.alpha2 = alpha2
        self.beta1 = beta1
        self.beta2 = beta2
        self.inner_steps_train = inner_steps_train
        self.inner_steps_test = inner_steps_test
        self.meta_batch = meta_batch
        self.episodes = episodes
        self.epsilon = epsilon
        self.clip = clip
        self.order = order
        self.random_state = random_state

    # -- meta-training ------------------------------------------------------

    def fit(self, X, y) -> "FewShotMetaClassifier":
        """Meta-train the shared initialization on the base classes.

        Every class in ``y`` must provide at least ``shots +
        query_per_class`` rows; episodes sample ``ways`` classes at a
        time, so the pool must contain at least that many.
        """
        X, y = check_X_y(X, y, dtype=np.float64)
        labels = np.unique(y)
        if labels.size < self.ways:
            raise ValueError(
                f"need at least ways={self.ways} base classes, got {labels.size}"
            )
        need = self.shots + self.query_per_class
        groups = []
        for lab in labels:
            rows = X[y == lab]
            if rows.shape[0] < need:
                raise ValueError(
                    f"class {lab!r} has {rows.shape[0]} rows, needs {need}"
                )
            groups.append((str(lab), rows))
        lo = float(X.min())
        hi = float(X.max())
        if not lo < hi:
            lo, hi = lo - 0.5, hi + 0.5
        source = TaskSource(
            classes=tuple(groups), geometry=(X.shape[1],), value_range=(lo, hi)
        )
        spec = ModelSpec.mlp(ways=self.ways, dim=X.shape[1], hidden=tuple(self.hidden))
        cfg = MetaConfig(
            alpha1=self.alpha1,
            alpha2=self.alpha2,
            beta1=self.beta1,
            beta2=self.beta2,
            inner_steps_train=self.inner_steps_train,
            inner_steps_test=self.inner_steps_test,
            meta_batch=self.meta_batch,
            order=self.order,
            attack=AttackConfig(
                epsilon=self.epsilon, value_range=(lo, hi), clip=self.clip
            ),
            episodes=self.episodes,
            shots=self.shots,
            query_per_class=self.query_per_class,
        )
        rng = np.random.Generator(np.random.PCG64(self.random_state))
        kind = TrainerKind.from_name(self.trainer)
        self.theta_ = meta_train(kind, spec, source, cfg, rng)
        self.spec_ = spec
        self.cfg_ = cfg
        self.n_features_in_ = X.shape[1]
        self.classes_ = labels
        return self

    # -- per-task adaptation ------------------------------------------------

    def adapt(self, X, y) -> "FewShotMetaClassifier":
        """Specialize the meta-trained initialization to one new task.

        ``y`` must contain exactly ``ways`` distinct labels; they become
        the prediction label space until the next ``adapt`` call.
        """
        check_is_fitted(self, "theta_")
        X, y = check_X_y(X, y, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"expected {self.n_features_in_} features, got {X.shape[1]}"
            )
        task_labels = np.unique(y)
        if task_labels.size != self.ways:
            raise ValueError(
                f"support set must cover exactly ways={self.ways} labels, "
                f"got {task_labels.size}"
            )
        remap = {lab: i for i, lab in enumerate(task_labels)}
        y_idx = np.array([remap[lab] for lab in y], dtype=np.int64)
        params = inner_adapt(
            self.spec_,
            self.theta_.detached(),
            X,
            y_idx,
            self.cfg_.alpha1,
            self.cfg_.inner_steps_test,
        )
        self.task_params_ = params.detached()
        self.task_classes_ = task_labels
        self.classes_ = task_labels
        return self

    # -- prediction ---------------------------------------------------------

    def _logits(self, X) -> np.ndarray:
        check_is_fitted(self, "task_params_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"expected {self.n_features_in_} features, got {X.shape[1]}"
            )
        with ad.no_record():
            logits = forward(self.spec_, self.task_params_, Tensor(X))
        return logits.data

    def predict(self, X) -> np.ndarray:
        """Labels of the adapted task; requires a prior ``adapt`` call."""
        idx = np.argmax(self._logits(X), axis=1)
        return self.task_classes_[idx]

    def predict_proba(self, X) -> np.ndarray:
        z = self._logits(X)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)
