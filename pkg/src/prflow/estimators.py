"""scikit-learn style wrappers around the flow and the ratio discriminator."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, DensityMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import autodiff as ad
from .data import DatasetHandle, make_rng
from .evaluation import default_lambda_grid, pr_curve_estimated
from .models import Discriminator
from .trainer import TrainConfig, train

__all__ = ["FlowDensityEstimator", "RatioEstimator"]


class FlowDensityEstimator(DensityMixin, BaseEstimator):
    """Coupling-flow density estimator.

    Parameters
    ----------
    objective : {"mle", "adversarial", "auc"}
        Training objective.  ``"adversarial"`` minimises the divergence named
        by ``g`` (with ``lam`` for ``g="pr"``) against a discriminator
        trained on ``f``; ``"auc"`` maximises the area under the PR curve.
    f, g : str
        Discriminator and generator divergences.
    lam : float or None
        Trade-off parameter of PR(lam).
    epochs, warm_start : int
        Training epochs, and MLE epochs run before adversarial training
        (ignored for ``"mle"``).
    batch_size : int
    n_layers, width : int
        Coupling layers and conditioner width.
    learning_rate : float
        Adam step for MLE (and the adversarial warm start).
    flow_learning_rate : float
        Initial Adam step of the flow's adversarial updates.
    disc_pretrain : int
        Discriminator steps before the first flow step.
    random_state : int

    Attributes
    ----------
    flow_ : FlowModel
    discriminator_ : Discriminator or None
    report_ : TrainReport
    n_features_in_ : int
    """

    def __init__(
        self,
        objective="mle",
        f="kl",
        g="pr",
        lam=1.0,
        epochs=30,
        warm_start=100,
        batch_size=512,
        n_layers=6,
        width=64,
        learning_rate=1e-3,
        flow_learning_rate=5e-4,
        disc_pretrain=10_000,
        random_state=0,
    ):
        self.objective = objective
        self.f = f
        self.g = g
        self.lam = lam
        self.epochs = epochs
        self.warm_start = warm_start
        self.batch_size = batch_size
        self.n_layers = n_layers
        self.width = width
        self.learning_rate = learning_rate
        self.flow_learning_rate = flow_learning_rate
        self.disc_pretrain = disc_pretrain
        self.random_state = random_state

    def _config(self) -> TrainConfig:
        return TrainConfig(
            objective=self.objective,
            f=self.f,
            g=self.g,
            lam=self.lam,
            epochs=self.epochs,
            warm_start=self.warm_start,
            batch=self.batch_size,
            lr_flow=self.flow_learning_rate,
            lr_mle=self.learning_rate,
            disc_pretrain=self.disc_pretrain,
            flow_layers=self.n_layers,
            flow_width=self.width,
            seed=self.random_state,
        )

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64, ensure_min_samples=2)
        if X.shape[1] < 2:
            raise ValueError("coupling flows need at least 2 features")
        cfg = self._config()
        dataset = DatasetHandle(X, batch_size=cfg.batch, seed=cfg.seed)
        self.flow_, self.discriminator_, self.report_ = train(cfg, dataset)
        self.n_features_in_ = X.shape[1]
        return self

    def _check(self, X):
        check_is_fitted(self, "flow_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def score_samples(self, X):
        """Log-density of each row."""
        X = self._check(X)
        return self.flow_.log_density(X)

    def score(self, X, y=None):
        """Mean log-likelihood."""
        return float(np.mean(self.score_samples(X)))

    def transform(self, X):
        """Map data to the standard-normal latent space."""
        X = self._check(X)
        z, _ = self.flow_.forward(X)
        return z

    def inverse_transform(self, Z):
        check_is_fitted(self, "flow_")
        x, _ = self.flow_.inverse(check_array(Z, dtype=np.float64))
        return x

    def sample(self, n_samples=1, random_state=None):
        check_is_fitted(self, "flow_")
        seed = self.random_state if random_state is None else random_state
        return self.flow_.sample(n_samples, make_rng(seed, 500))


class RatioEstimator(BaseEstimator):
    """Density-ratio ``p/q`` from the dual form of an f-divergence.

    ``fit(X, y)`` takes pooled samples with ``y = 1`` for draws from the
    numerator ``P`` and ``y = 0`` for the denominator ``Q``.

    Parameters
    ----------
    f : {"chi2", "kl", "rkl"}
    hidden : tuple of int
    steps, batch_size : int
    learning_rate : float
    random_state : int
    """

    def __init__(
        self, f="chi2", hidden=(128, 128, 128), steps=2000, batch_size=256, learning_rate=1e-3, random_state=0
    ):
        self.f = f
        self.hidden = hidden
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        labels = np.unique(y)
        if not np.array_equal(labels, [0, 1]):
            raise ValueError("y must contain both classes 0 (denominator) and 1 (numerator)")
        x_p, x_q = X[y == 1], X[y == 0]
        disc = Discriminator(X.shape[1], self.f, tuple(self.hidden), rng=make_rng(self.random_state, 200))
        opt = ad.Adam(disc.parameters(), lr=self.learning_rate)
        rng = make_rng(self.random_state, 3)
        history = []
        for _ in range(self.steps):
            real = x_p[rng.integers(0, len(x_p), self.batch_size)]
            fake = x_q[rng.integers(0, len(x_q), self.batch_size)]
            tape = ad.Tape()
            obj = disc.dual_objective(real, fake, tape)
            tape.backward(-obj)
            opt.step()
            history.append(float(obj.value))
        self.discriminator_ = disc
        self.dual_history_ = np.array(history)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        """Estimated ratio ``p(x)/q(x)``."""
        check_is_fitted(self, "discriminator_")
        X = check_array(X, dtype=np.float64)
        return self.discriminator_.ratio(X)

    def pr_curve(self, X_q, lambdas=None):
        """PR curve estimated from denominator samples ``X_q``."""
        check_is_fitted(self, "discriminator_")
        X_q = check_array(X_q, dtype=np.float64)
        lambdas = default_lambda_grid() if lambdas is None else lambdas
        return pr_curve_estimated(self.discriminator_, self.discriminator_.f, X_q, lambdas)

