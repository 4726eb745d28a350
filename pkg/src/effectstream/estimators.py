"""Scikit-learn style estimators wrapping the training machinery.

``BaselineEffectEstimator`` fits one observational dataset;
``ContinualEffectLearner`` consumes a sequence of datasets through repeated
``partial_fit`` calls, holding only its model and a bounded representation
memory between stages.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .continual import ContinualHyper, train_continual, update_memory
from .errors import DimensionMismatchError
from .memory import build_memory
from .model import TrainConfig, build_model, train_baseline
from .transport import IPMConfig
from .validation import check_Xty, check_covariates, check_treatment


def _carve_validation(X, t, y, fraction, rng):
    n = X.shape[0]
    n_val = max(1, int(round(fraction * n)))
    perm = rng.permutation(n)
    val, train = perm[:n_val], perm[n_val:]
    return (X[train], t[train], y[train]), (X[val], t[val], y[val])


class _EffectEstimatorMixin:
    """Shared prediction surface over a fitted RepresentationModel."""

    def _check_fitted(self):
        if getattr(self, "model_", None) is None:
            raise RuntimeError("estimator is not fitted")

    def _check_X(self, X):
        X = check_covariates(X)
        if X.shape[1] != self.n_features_in_:
            raise DimensionMismatchError(
                f"X has {X.shape[1]} features, estimator was fitted with "
                f"{self.n_features_in_}"
            )
        return X

    def transform(self, X) -> np.ndarray:
        """Representation vectors of the units."""
        self._check_fitted()
        return self.model_.represent(self._check_X(X))

    def predict(self, X) -> np.ndarray:
        """Estimated unit-level treatment effects."""
        self._check_fitted()
        ite, _ = self.model_.estimate_effects(self._check_X(X))
        return ite

    def estimate_effects(self, X) -> tuple[np.ndarray, float]:
        self._check_fitted()
        return self.model_.estimate_effects(self._check_X(X))

    def predict_ate(self, X) -> float:
        return float(self.predict(X).mean())

    def predict_outcome(self, X, t) -> np.ndarray:
        """Predicted factual outcome under the given assignment."""
        self._check_fitted()
        X = self._check_X(X)
        t = check_treatment(t, X.shape[0])
        return self.model_.predict_outcome(self.model_.represent(X), t)


class BaselineEffectEstimator(_EffectEstimatorMixin, BaseEstimator):
    """Representation-based effect learner for a single dataset.

    fit(X, t, y) learns a balanced representation and two outcome heads;
    predict(X) returns unit-level effect estimates.
    """

    def __init__(
        self,
        rep_hidden=(64, 64),
        rep_dim=32,
        head_hidden=(32, 32),
        activation="elu",
        cosine_output=True,
        alpha=1.0,
        lam=1e-4,
        learning_rate=1e-3,
        epochs=300,
        batch_size=128,
        patience=30,
        ipm_epsilon=0.05,
        ipm_relative=True,
        ipm_iterations=200,
        ipm_tolerance=1e-6,
        validation_fraction=0.2,
        model_selection="best",
        warm_start=False,
        random_state=0,
    ):
        self.rep_hidden = rep_hidden
        self.rep_dim = rep_dim
        self.head_hidden = head_hidden
        self.activation = activation
        self.cosine_output = cosine_output
        self.alpha = alpha
        self.lam = lam
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.patience = patience
        self.ipm_epsilon = ipm_epsilon
        self.ipm_relative = ipm_relative
        self.ipm_iterations = ipm_iterations
        self.ipm_tolerance = ipm_tolerance
        self.validation_fraction = validation_fraction
        self.model_selection = model_selection
        self.warm_start = warm_start
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            patience=self.patience,
            model_selection=self.model_selection,
            ipm=IPMConfig(
                epsilon=self.ipm_epsilon,
                relative_epsilon=self.ipm_relative,
                max_iterations=self.ipm_iterations,
                tolerance=self.ipm_tolerance,
            ),
        )

    def fit(self, X, t, y, validation=None):
        """Train on (X, t, y); ``validation`` is an optional (X, t, y) triple.

        With ``warm_start`` and a previous fit, training continues from the
        current parameters instead of a fresh initialization.
        """
        X, t, y = check_Xty(X, t, y)
        seeds = np.random.SeedSequence(self.random_state).spawn(3)
        if validation is None:
            (X, t, y), validation = _carve_validation(
                X, t, y, self.validation_fraction, np.random.default_rng(seeds[0])
            )
        else:
            validation = check_Xty(*validation)
        if self.warm_start and getattr(self, "model_", None) is not None:
            if X.shape[1] != self.n_features_in_:
                raise DimensionMismatchError(
                    "warm start requires the fitted feature count"
                )
            model = self.model_.copy()
            model.alpha, model.lam = self.alpha, self.lam
        else:
            model = build_model(
                X.shape[1],
                rep_hidden=tuple(self.rep_hidden),
                rep_dim=self.rep_dim,
                head_hidden=tuple(self.head_hidden),
                activation=self.activation,
                cosine_output=self.cosine_output,
                alpha=self.alpha,
                lam=self.lam,
                seed=int(seeds[1].generate_state(1)[0]),
            )
        self.model_, self.history_ = train_baseline(
            X, t, y, validation, self._train_config(), model,
            seed=int(seeds[2].generate_state(1)[0]),
        )
        self.n_features_in_ = X.shape[1]
        return self


class ContinualEffectLearner(_EffectEstimatorMixin, BaseEstimator):
    """Sequential effect learner with a bounded representation memory.

    The first ``partial_fit`` trains the baseline model and fills the
    memory; every later call runs one continual stage (representation
    distillation, transform learning, globally balanced training) and then
    re-selects the memory in the new space. Raw covariates of earlier
    stages are never retained.
    """

    def __init__(
        self,
        rep_hidden=(64, 64),
        rep_dim=32,
        head_hidden=(32, 32),
        activation="elu",
        cosine_output=True,
        alpha=1.0,
        lam=1e-4,
        beta=1.0,
        delta=1.0,
        memory_size=500,
        memory_batch_size=64,
        selection="herding",
        use_transform=True,
        transform_hidden=(64,),
        warm_start_rep=True,
        warm_start_heads=False,
        phi_warmup_epochs=0,
        stop_gradient_transform=False,
        learning_rate=1e-3,
        epochs=300,
        batch_size=128,
        patience=30,
        ipm_epsilon=0.05,
        ipm_relative=True,
        ipm_iterations=200,
        ipm_tolerance=1e-6,
        validation_fraction=0.2,
        model_selection="best",
        random_state=0,
    ):
        self.rep_hidden = rep_hidden
        self.rep_dim = rep_dim
        self.head_hidden = head_hidden
        self.activation = activation
        self.cosine_output = cosine_output
        self.alpha = alpha
        self.lam = lam
        self.beta = beta
        self.delta = delta
        self.memory_size = memory_size
        self.memory_batch_size = memory_batch_size
        self.selection = selection
        self.use_transform = use_transform
        self.transform_hidden = transform_hidden
        self.warm_start_rep = warm_start_rep
        self.warm_start_heads = warm_start_heads
        self.phi_warmup_epochs = phi_warmup_epochs
        self.stop_gradient_transform = stop_gradient_transform
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.patience = patience
        self.ipm_epsilon = ipm_epsilon
        self.ipm_relative = ipm_relative
        self.ipm_iterations = ipm_iterations
        self.ipm_tolerance = ipm_tolerance
        self.validation_fraction = validation_fraction
        self.model_selection = model_selection
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            patience=self.patience,
            model_selection=self.model_selection,
            ipm=IPMConfig(
                epsilon=self.ipm_epsilon,
                relative_epsilon=self.ipm_relative,
                max_iterations=self.ipm_iterations,
                tolerance=self.ipm_tolerance,
            ),
        )

    def _hyper(self) -> ContinualHyper:
        return ContinualHyper(alpha=self.alpha, lam=self.lam,
                              beta=self.beta, delta=self.delta)

    def _stage_seeds(self, stage: int, count: int = 4) -> list[int]:
        root = np.random.SeedSequence([self.random_state, stage])
        return [int(s.generate_state(1)[0]) for s in root.spawn(count)]

    def partial_fit(self, X, t, y, validation=None):
        """Consume the next dataset of the sequence."""
        X, t, y = check_Xty(X, t, y)
        stage = getattr(self, "stage_", 0)
        seeds = self._stage_seeds(stage)
        if validation is None:
            (X, t, y), validation = _carve_validation(
                X, t, y, self.validation_fraction, np.random.default_rng(seeds[0])
            )
        else:
            validation = check_Xty(*validation)
        mem_rng = np.random.default_rng(seeds[3])
        if stage == 0:
            model = build_model(
                X.shape[1],
                rep_hidden=tuple(self.rep_hidden),
                rep_dim=self.rep_dim,
                head_hidden=tuple(self.head_hidden),
                activation=self.activation,
                cosine_output=self.cosine_output,
                alpha=self.alpha,
                lam=self.lam,
                seed=seeds[1],
            )
            self.model_, self.history_ = train_baseline(
                X, t, y, validation, self._train_config(), model, seed=seeds[2]
            )
            self.n_features_in_ = X.shape[1]
            self.transform_net_ = None
            if self.use_transform:
                self.memory_ = build_memory(
                    self.model_, X, y, t, self.memory_size,
                    selection=self.selection, rng=mem_rng, source_tag=0,
                )
            else:
                self.memory_ = None
        else:
            if X.shape[1] != self.n_features_in_:
                raise DimensionMismatchError(
                    "stage data must keep the feature count of stage one"
                )
            model, phi, self.history_ = train_continual(
                self.model_, self.memory_, X, t, y, validation,
                self._train_config(), self._hyper(), seed=seeds[2],
                memory_batch_size=self.memory_batch_size,
                use_transform=self.use_transform,
                warm_start_rep=self.warm_start_rep,
                warm_start_heads=self.warm_start_heads,
                phi_hidden=tuple(self.transform_hidden),
                phi_warmup_epochs=self.phi_warmup_epochs,
                stop_gradient_transform=self.stop_gradient_transform,
            )
            if self.use_transform:
                self.memory_ = update_memory(
                    self.memory_, phi, model, X, y, t, self.memory_size,
                    selection=self.selection, rng=mem_rng, source_tag=stage,
                )
            self.model_ = model
            self.transform_net_ = phi
        self.stage_ = stage + 1
        return self

    def resume(self, model, memory, stage: int = 1):
        """Install a stage artifact (trained model + memory) and continue from there.

        This is how a sequence resumes without any earlier raw data: the
        model and memory saved after stage ``stage`` are all the state the
        next ``partial_fit`` needs.
        """
        self.model_ = model
        self.memory_ = memory
        self.transform_net_ = None
        self.n_features_in_ = model.rep_net.input_dim
        self.stage_ = stage
        return self

    def stored_float_count(self) -> int:
        """Floats retained between stages: memory plus model (and transform)."""
        self._check_fitted()
        count = self.model_.n_params()
        if getattr(self, "memory_", None) is not None:
            count += self.memory_.float_count()
        if getattr(self, "transform_net_", None) is not None:
            count += self.transform_net_.n_params()
        return count

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Every array held between stages (for the data-access firewall checks)."""
        self._check_fitted()
        out = dict(self.model_.state_arrays())
        if getattr(self, "memory_", None) is not None:
            out["memory.representations"] = self.memory_.representations
            out["memory.y"] = self.memory_.y
            out["memory.t"] = self.memory_.t
        if getattr(self, "transform_net_", None) is not None:
            out.update(
                {f"phi.{k}": v for k, v in self.transform_net_.state_arrays().items()}
            )
        return out
