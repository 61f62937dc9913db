"""scikit-learn style front end for the training algorithms."""
from __future__ import annotations

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .attacks import AttackConfig, eval_attack
from .data import LabeledSet, UnlabeledSet
from .divergence import DivergenceKind
from .harness import evaluate
from .models import MlpSpec, init_params, predict_logits
from .trainers import AlgorithmConfig, DomainData, pretrain_natural, train


class DARTClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Domain-adapted, adversarially trained MLP classifier.

    ``fit`` takes labeled source rows and unlabeled target rows.  A labeled
    target validation set drives checkpoint selection and pseudo-label
    refreshes; without one, a fifth of the source is held out instead.
    ``transform`` returns the learned features g(X).
    """

    def __init__(
        self,
        algorithm="dart",
        source_choice="clean",
        lambda1=1.0,
        lambda2=1.0,
        trades_beta=6.0,
        divergence="dann",
        alpha=0.1,
        attack_steps=5,
        lr=3e-3,
        batch_size=128,
        iterations=2000,
        pretrain_iterations=2000,
        checkpoint_frequency=100,
        hidden=(32, 16),
        random_state=0,
    ):
        self.algorithm = algorithm
        self.source_choice = source_choice
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.trades_beta = trades_beta
        self.divergence = divergence
        self.alpha = alpha
        self.attack_steps = attack_steps
        self.lr = lr
        self.batch_size = batch_size
        self.iterations = iterations
        self.pretrain_iterations = pretrain_iterations
        self.checkpoint_frequency = checkpoint_frequency
        self.hidden = hidden
        self.random_state = random_state

    def _config(self) -> AlgorithmConfig:
        step = self.alpha / 2.0 if self.alpha > 0 else None
        return AlgorithmConfig(
            algorithm=self.algorithm,
            source_choice=self.source_choice,
            lambda1=self.lambda1,
            lambda2=self.lambda2,
            trades_beta=self.trades_beta,
            divergence=DivergenceKind(self.divergence),
            train_attack=AttackConfig(alpha=self.alpha, steps=self.attack_steps, step_size=step),
            lr=self.lr,
            batch_size=self.batch_size,
            iterations=self.iterations,
            checkpoint_frequency=self.checkpoint_frequency,
        )

    def fit(self, X, y, X_target=None, X_val=None, y_val=None):
        X, y = check_X_y(X, y, dtype=np.float64)
        if X_target is None:
            raise ValueError("fit needs unlabeled target rows: pass X_target")
        X_target = check_array(X_target, dtype=np.float64)
        if X_target.shape[1] != X.shape[1]:
            raise ValueError("source and target rows differ in width")
        self._le = LabelEncoder().fit(y)
        self.classes_ = self._le.classes_
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        y_enc = self._le.transform(y)
        n_classes = len(self.classes_)
        rng = np.random.default_rng(self.random_state)
        if X_val is None:
            perm = rng.permutation(len(X))
            n_val = max(1, len(X) // 5)
            val = LabeledSet(X[perm[:n_val]], "source", "val", y_enc[perm[:n_val]], n_classes)
            src = LabeledSet(X[perm[n_val:]], "source", "train", y_enc[perm[n_val:]], n_classes)
        else:
            X_val, y_val = check_X_y(X_val, y_val, dtype=np.float64)
            val = LabeledSet(X_val, "target", "val", self._le.transform(y_val), n_classes)
            src = LabeledSet(X, "source", "train", y_enc, n_classes)
        data = DomainData(src, UnlabeledSet(X_target, "target", "train"), val, val)
        cfg = self._config()
        width = self.hidden[-1]
        specs = (MlpSpec((X.shape[1], *self.hidden)), MlpSpec((width, n_classes)), MlpSpec((width, 16, 1)))
        params = init_params(*specs, seed=self.random_state)
        pre = pretrain_natural(replace(cfg, iterations=self.pretrain_iterations), data, params, self.random_state,
                               self.random_state)
        if self.algorithm == "natural_uda":
            self.params_ = pre.params
        else:
            self.params_ = train(cfg, data, pre.params.copy(), self.random_state, self.random_state).params
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features; the model was fit on {self.n_features_in_}")
        return predict_logits(self.params_, "fg", X)

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X):
        z = self.decision_function(X)
        return self.classes_[np.argmax(z, axis=1)]

    def transform(self, X):
        check_is_fitted(self, "params_")
        return predict_logits(self.params_, "g", check_array(X, dtype=np.float64))

    def robust_score(self, X, y, alpha=None, steps=20):
        """Accuracy under a cross-entropy PGD attack of radius ``alpha``."""
        check_is_fitted(self, "params_")
        X, y = check_X_y(X, y, dtype=np.float64)
        alpha = self.alpha if alpha is None else alpha
        test = LabeledSet(X, "target", "test", self._le.transform(y), len(self.classes_))
        return evaluate(self.params_, test, eval_attack(alpha, steps))["robust_acc"]
