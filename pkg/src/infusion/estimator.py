"""scikit-learn compatible front end.

>>> est = InfusionModel(n_steps=10, hidden_sizes=(64, 64), epochs=5, random_state=0)
>>> est.fit(X_train, X_valid=X_valid)            # doctest: +SKIP
>>> est.sample(16)                               # doctest: +SKIP
>>> est.score_samples(X_test)                    # doctest: +SKIP
"""
from __future__ import annotations

import hashlib

import numpy as np
from sklearn.base import BaseEstimator, DensityMixin
from sklearn.utils.validation import check_array, check_is_fitted, validate_data

from infusion.evaluation import elbo_samples, is_estimate, lower_bound_estimate
from infusion.infusion import InfusionSchedule, run_infusion_chain
from infusion.model import OperatorConfig, run_clamped_chain, run_model_chain
from infusion.training import TrainConfig, train


class InfusionModel(DensityMixin, BaseEstimator):
    """Generative Markov chain trained by target infusion.

    Parameters mirror the operator, schedule and training settings.
    After :meth:`fit`, ``operator_`` holds the best-validation transition
    operator, ``prior_`` the factorial Gaussian start distribution and
    ``history_`` one dict per epoch.
    """

    def __init__(
        self,
        n_steps=15,
        hidden_sizes=(1200, 1200),
        alpha0=0.0,
        omega=0.01,
        sigma_delta=0.03,
        beta=0.1,
        eps_var=1e-4,
        batch_norm=False,
        share_params=True,
        objective="denoising",
        optimizer="adam",
        learning_rate=1e-3,
        batch_size=64,
        epochs=100,
        clip_norm=100.0,
        n_eval_samples=20,
        validation_fraction=0.1,
        random_state=None,
    ):
        self.n_steps = n_steps
        self.hidden_sizes = hidden_sizes
        self.alpha0 = alpha0
        self.omega = omega
        self.sigma_delta = sigma_delta
        self.beta = beta
        self.eps_var = eps_var
        self.batch_norm = batch_norm
        self.share_params = share_params
        self.objective = objective
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.clip_norm = clip_norm
        self.n_eval_samples = n_eval_samples
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _seed(self) -> int:
        if self.random_state is None:
            return int(np.random.SeedSequence().generate_state(1)[0])
        return int(self.random_state)

    @property
    def schedule_(self) -> InfusionSchedule:
        return InfusionSchedule(self.alpha0, self.omega, self.sigma_delta)

    def fit(self, X, y=None, X_valid=None):
        X = validate_data(self, X, dtype=np.float64, ensure_min_samples=2)
        seed = self._seed()
        if X_valid is None:
            order = np.random.default_rng(seed).permutation(X.shape[0])
            n_valid = max(1, int(round(self.validation_fraction * X.shape[0])))
            X_valid, X = X[order[:n_valid]], X[order[n_valid:]]
        else:
            X_valid = check_array(X_valid, dtype=np.float64)
        cfg = TrainConfig(
            T=self.n_steps,
            schedule=self.schedule_,
            eta0=self.learning_rate,
            optimizer=self.optimizer,
            batch_size=self.batch_size,
            epochs=self.epochs,
            objective=self.objective,
            seed=seed,
            clip_norm=self.clip_norm,
            n_eval_samples=self.n_eval_samples,
        )
        op_cfg = OperatorConfig(
            d=X.shape[1],
            T=self.n_steps,
            hidden_sizes=tuple(self.hidden_sizes),
            share_params=self.share_params,
            beta=self.beta,
            eps_var=self.eps_var,
            batch_norm=self.batch_norm,
        )
        result = train(X, X_valid, cfg, op_cfg)
        self.operator_ = result.operator
        self.prior_ = result.prior
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.seed_ = seed
        return self

    def _rng(self, random_state):
        return np.random.default_rng(self.seed_ + 1 if random_state is None else random_state)

    def sample(self, n_samples=1, n_steps=None, random_state=None, return_means=False):
        """Final states (or their distribution means) of ``n_samples`` model chains."""
        check_is_fitted(self, "operator_")
        trace = run_model_chain(self._rng(random_state), self.prior_, self.operator_, n_steps, n=n_samples)
        return trace.means[-1] if return_means else trace.final

    def infusion_chain(self, X, random_state=None):
        check_is_fitted(self, "operator_")
        X = validate_data(self, X, dtype=np.float64, reset=False)
        return run_infusion_chain(self._rng(random_state), self.prior_, self.operator_, self.schedule_, X)

    def elbo_samples(self, X, k=None, random_state=None):
        """``[n, k]`` lower-bound terms.

        Each row draws from its own stream keyed by the row's bytes, so a
        row's values do not depend on which other rows are scored with it.
        """
        check_is_fitted(self, "operator_")
        X = validate_data(self, X, dtype=np.float64, reset=False)
        k = self.n_eval_samples if k is None else k
        base = self.seed_ + 1 if random_state is None else random_state
        out = np.empty((X.shape[0], k))
        for i, row in enumerate(X):
            key = int.from_bytes(hashlib.blake2b(row.tobytes(), digest_size=8).digest(), "little")
            rng = np.random.default_rng(np.random.SeedSequence(base, spawn_key=(5, key)))
            out[i] = elbo_samples(self.operator_, self.prior_, self.schedule_, row, k, rng)
        return out

    def score_samples(self, X, k=None, random_state=None):
        """Importance-sampling estimate of ``log p(x)`` per row, in nats."""
        return is_estimate(self.elbo_samples(X, k, random_state))

    def lower_bound(self, X, k=None, random_state=None):
        """Stochastic lower bound of ``log p(x)`` per row, in nats."""
        return lower_bound_estimate(self.elbo_samples(X, k, random_state))

    def score(self, X, y=None):
        return float(np.mean(self.score_samples(X)))

    def inpaint(self, X, mask, n_restarts=1, n_steps=None, random_state=None):
        """Complete unmasked dimensions of each row; returns ``[n, n_restarts, d]``."""
        check_is_fitted(self, "operator_")
        X = validate_data(self, X, dtype=np.float64, reset=False)
        mask = np.asarray(mask, dtype=bool)
        tiled = np.repeat(X, n_restarts, axis=0)
        trace = run_clamped_chain(self._rng(random_state), self.prior_, self.operator_, tiled, mask, n_steps)
        return trace.final.reshape(X.shape[0], n_restarts, X.shape[1])

