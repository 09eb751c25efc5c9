"""High-level generative models with the scikit-learn estimator interface.

``SpectralDiffusionModel`` is the feature-preserving model: ``fit``
estimates class spectral statistics and trains the built-in denoiser under
the variance-weighted spectral loss; ``sample`` runs the backward chain
from the class-statistics stationary law.  ``DdpmBaselineModel`` is the
white-noise pixel-space baseline with the same surface, so the two can be
compared under identical budgets.
"""

from concurrent.futures import ThreadPoolExecutor

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import as_float_field
from .diffusion import ddpm_sample, sample
from .rng import make_rng
from .schedule import cosine_schedule
from .spectral import to_spectral
from .stats import ClassStats
from .training import TrainConfig, train_loop

__all__ = ["SpectralDiffusionModel", "DdpmBaselineModel"]


def _as_batch(X):
    X = as_float_field(X, name="X")
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise ValueError(f"expected (n, C, H, W) or (n, H, W) images, got {X.shape}")
    return X


class _DiffusionModelBase(BaseEstimator):
    """Shared fit/sample plumbing; concrete classes declare parameters."""

    _baseline = "spectral"

    def _train_config(self):
        return TrainConfig(
            iterations=self.iterations,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            variance_floor=self.variance_floor,
            seed=self.seed,
            stats_scope="per-class" if getattr(self, "per_class", False) else "global",
            hidden=self.hidden,
            time_features=self.time_features,
            baseline=self._baseline,
        )

    def fit(self, X, y=None):
        X = _as_batch(X)
        if getattr(self, "per_class", False) and y is None:
            raise ValueError("per_class=True requires labels y")
        self.schedule_ = cosine_schedule(self.n_steps, self.terminal_eps)

        fields = to_spectral(X)
        self.stats_ = ClassStats(
            mu=fields.mean(axis=0), var=fields.var(axis=0), n=len(fields)
        )
        self.class_stats_ = {}
        if y is not None:
            labels = np.asarray(y)
            for label in sorted(set(labels.tolist())):
                members = fields[labels == label]
                self.class_stats_[label] = ClassStats(
                    mu=members.mean(axis=0), var=members.var(axis=0),
                    n=len(members), label=label,
                )

        config = self._train_config()
        stats = (self.class_stats_ if config.stats_scope == "per-class"
                 else self.stats_)
        self.denoiser_, self.history_, _ = train_loop(
            config, X, self.schedule_, labels=y, stats=stats,
        )
        self.image_shape_ = X.shape[1:]
        return self

    def _sampling_schedule(self, n_steps):
        if n_steps is None or n_steps == self.schedule_.n_steps:
            return self.schedule_
        return cosine_schedule(n_steps, self.terminal_eps)

    def _check_fitted(self):
        if not hasattr(self, "denoiser_"):
            raise ValueError("model is not fitted; call fit first")


class SpectralDiffusionModel(_DiffusionModelBase):
    """Feature-preserving diffusion model operating in spectral space.

    Parameters
    ----------
    n_steps : int
        Diffusion chain length T.
    terminal_eps : float
        Upper bound enforced on the terminal cumulative product, so the
        chain ends at the stationary class law.
    iterations, batch_size, learning_rate : training budget (plain SGD).
    variance_floor : float
        Floor inside the weighted loss denominator.
    hidden, time_features : built-in denoiser size.
    per_class : bool
        Train against per-class statistics (requires y in fit).
    seed : int
        Root seed of all named random streams.
    """

    def __init__(self, n_steps=100, terminal_eps=1e-5, iterations=300,
                 batch_size=8, learning_rate=0.05, variance_floor=1e-3,
                 hidden=16, time_features=8, per_class=False, seed=0):
        self.n_steps = n_steps
        self.terminal_eps = terminal_eps
        self.iterations = iterations
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.variance_floor = variance_floor
        self.hidden = hidden
        self.time_features = time_features
        self.per_class = per_class
        self.seed = seed

    def sample(self, n_samples=1, label=None, seed=None, n_steps=None,
               record_trajectory=False, n_threads=1):
        """Generate images; with ``label`` the chain starts from that
        class's statistics (class-conditional generation, no classifier).

        Each trajectory draws from its own named stream, so results are
        deterministic per (seed, trajectory index) regardless of thread
        scheduling.  Returns (images, trajectories) when recording.
        """
        self._check_fitted()
        if label is None:
            stats = self.stats_
        else:
            if label not in self.class_stats_:
                raise KeyError(f"no statistics for label {label!r}")
            stats = self.class_stats_[label]
        sched = self._sampling_schedule(n_steps)
        seed = self.seed if seed is None else seed

        def one(index):
            rng = make_rng(seed, "sample", index)
            return sample(self.denoiser_, stats, sched, rng,
                          record_trajectory=record_trajectory)

        if n_threads > 1:
            with ThreadPoolExecutor(max_workers=n_threads) as pool:
                results = list(pool.map(one, range(n_samples)))
        else:
            results = [one(i) for i in range(n_samples)]
        if record_trajectory:
            images = np.stack([r[0] for r in results])
            return images, [r[1] for r in results]
        return np.stack(results)


class DdpmBaselineModel(_DiffusionModelBase):
    """White-noise pixel-space baseline with the same train/sample surface."""

    _baseline = "ddpm"

    def __init__(self, n_steps=100, terminal_eps=1e-5, iterations=300,
                 batch_size=8, learning_rate=0.05, variance_floor=1e-3,
                 hidden=16, time_features=8, seed=0):
        self.n_steps = n_steps
        self.terminal_eps = terminal_eps
        self.iterations = iterations
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.variance_floor = variance_floor
        self.hidden = hidden
        self.time_features = time_features
        self.seed = seed

    def sample(self, n_samples=1, seed=None, n_steps=None, n_threads=1):
        """Generate images from the white-noise backward chain."""
        self._check_fitted()
        sched = self._sampling_schedule(n_steps)
        seed = self.seed if seed is None else seed
        shape = self.image_shape_

        def one(index):
            rng = make_rng(seed, "sample", index)
            return ddpm_sample(self.denoiser_, shape, sched, rng)

        if n_threads > 1:
            with ThreadPoolExecutor(max_workers=n_threads) as pool:
                results = list(pool.map(one, range(n_samples)))
        else:
            results = [one(i) for i in range(n_samples)]
        return np.stack(results)
