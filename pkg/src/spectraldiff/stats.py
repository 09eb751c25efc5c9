"""Per-component spectral statistics, invariance reporting and power-law fits.

Statistics are accumulated with a vectorized Welford recurrence so a single
pass over the data suffices and shards processed independently can be merged
without changing the result (beyond ~1e-12).  Variances are population
variances (divide by n): they parameterize the stationary noise law of the
diffusion chain, not an unbiased estimator.  No variance floor is applied
here; zero-variance components must stay exactly frozen in the chain, so
floors live only in the training loss and in distance metrics.
"""

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import as_float_field, check_same_shape
from .spectral import to_spectral

__all__ = [
    "ClassStats",
    "RunningMoments",
    "fit_class_stats",
    "InvarianceReport",
    "count_invariant",
    "PowerLawFit",
    "power_law_fit",
    "stats_to_dict",
    "stats_from_dict",
    "save_stats_json",
    "load_stats_json",
    "SpectralStats",
]

DEFAULT_INVARIANCE_THRESHOLD = 1e-3


@dataclass
class ClassStats:
    """Component-wise spectral mean and diagonal variance for one class
    (or for the pooled dataset when ``label`` is None)."""

    mu: np.ndarray
    var: np.ndarray
    n: int
    label: Optional[object] = None

    def __post_init__(self):
        self.mu = as_float_field(self.mu, name="mu")
        self.var = as_float_field(self.var, name="var")
        check_same_shape(self.mu, self.var, "mu", "var")
        if np.any(self.var < 0):
            raise ValueError("variances must be nonnegative")
        if self.n < 1:
            raise ValueError("sample count must be >= 1")

    @property
    def shape(self):
        return self.mu.shape

    @property
    def n_components(self):
        return int(self.mu.size)

    @property
    def std(self):
        return np.sqrt(self.var)


class RunningMoments:
    """Mergeable one-pass mean/variance accumulator over same-shaped arrays."""

    def __init__(self):
        self.count = 0
        self.mean = None
        self._m2 = None

    def update(self, x):
        x = as_float_field(x, name="sample")
        if self.mean is None:
            self.mean = np.zeros_like(x)
            self._m2 = np.zeros_like(x)
        check_same_shape(x, self.mean, "sample", "accumulator")
        self.count += 1
        delta = x - self.mean
        self.mean += delta / self.count
        self._m2 += delta * (x - self.mean)

    def merge(self, other):
        """Fold another accumulator into this one (parallel-variance rule)."""
        if other.count == 0:
            return self
        if self.count == 0:
            self.count = other.count
            self.mean = other.mean.copy()
            self._m2 = other._m2.copy()
            return self
        check_same_shape(self.mean, other.mean, "accumulator", "other")
        total = self.count + other.count
        delta = other.mean - self.mean
        self.mean += delta * (other.count / total)
        self._m2 += other._m2 + delta * delta * (self.count * other.count / total)
        self.count = total
        return self

    def finalize(self, label=None):
        """Population statistics of everything seen so far."""
        if self.count == 0:
            raise ValueError("no samples accumulated")
        var = np.maximum(self._m2 / self.count, 0.0)
        return ClassStats(mu=self.mean.copy(), var=var, n=self.count, label=label)


def fit_class_stats(samples, label=None):
    """Component-wise mean and population variance of a stream of spectral
    fields; all samples must share one shape."""
    acc = RunningMoments()
    for sample in samples:
        acc.update(sample)
    return acc.finalize(label=label)


@dataclass
class InvarianceReport:
    """Counts of invariant and near-invariant components at a threshold."""

    count_exact_zero: int
    count_near_zero: int
    threshold: float
    n_components: int
    label: Optional[object] = None

    def __post_init__(self):
        if not (0 <= self.count_exact_zero <= self.count_near_zero
                <= self.n_components):
            raise ValueError("invariance counts are inconsistent")


def count_invariant(stats, threshold=DEFAULT_INVARIANCE_THRESHOLD):
    """Count components whose standard deviation is exactly zero and those
    at or below ``threshold``."""
    if threshold < 0:
        raise ValueError("threshold must be nonnegative")
    std = stats.std
    return InvarianceReport(
        count_exact_zero=int(np.count_nonzero(stats.var == 0.0)),
        count_near_zero=int(np.count_nonzero(std <= threshold)),
        threshold=float(threshold),
        n_components=stats.n_components,
        label=stats.label,
    )


@dataclass
class PowerLawFit:
    """Least-squares power-law exponent of a radial profile."""

    exponent: float
    k_min: float
    k_max: float
    residual: float


def power_law_fit(profile, k_min, k_max):
    """Fit power ~ ||k||**(-exponent) over [k_min, k_max] in log-log space.

    Only bins with strictly positive energy participate; at least three such
    bins must fall inside the range.
    """
    keep = ((profile.radii >= k_min) & (profile.radii <= k_max)
            & (profile.power > 0) & (profile.radii > 0))
    if np.count_nonzero(keep) < 3:
        raise ValueError(
            f"need >= 3 positive-energy bins in [{k_min}, {k_max}], "
            f"found {int(np.count_nonzero(keep))}"
        )
    log_r = np.log(profile.radii[keep])
    log_p = np.log(profile.power[keep])
    slope, intercept = np.polyfit(log_r, log_p, 1)
    residual = float(np.sqrt(np.mean((log_p - (slope * log_r + intercept)) ** 2)))
    return PowerLawFit(exponent=float(-slope), k_min=float(k_min),
                       k_max=float(k_max), residual=residual)


def stats_to_dict(stats, extra=None):
    """JSON-ready dict: {label, shape, mu, var, n} plus optional metadata."""
    shape = list(stats.shape)
    if len(shape) == 2:
        shape = [1] + shape
    doc = {
        "label": stats.label,
        "shape": shape,
        "mu": stats.mu.ravel().tolist(),
        "var": stats.var.ravel().tolist(),
        "n": stats.n,
    }
    if extra:
        doc.update(extra)
    return doc


def stats_from_dict(doc):
    shape = tuple(doc["shape"])
    mu = np.asarray(doc["mu"], dtype=np.float64).reshape(shape)
    var = np.asarray(doc["var"], dtype=np.float64).reshape(shape)
    return ClassStats(mu=mu, var=var, n=int(doc["n"]), label=doc.get("label"))


def save_stats_json(path, stats_list, extra=None):
    """Write one or many ClassStats to a JSON document."""
    if isinstance(stats_list, ClassStats):
        stats_list = [stats_list]
    doc = {"stats": [stats_to_dict(s) for s in stats_list]}
    if extra:
        doc.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_stats_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    return [stats_from_dict(d) for d in doc["stats"]], doc


class SpectralStats(BaseEstimator):
    """Estimator computing spectral statistics of image batches.

    ``fit``/``partial_fit`` accept pixel-space batches shaped (n, H, W) or
    (n, C, H, W) (set ``input_space="spectral"`` to skip the transform).
    With labels ``y`` statistics are kept per class; attributes after fit:

    - ``stats_``: pooled ClassStats over everything seen;
    - ``class_stats_``: dict label -> ClassStats (only when y was given);
    - ``classes_``: sorted labels.
    """

    def __init__(self, input_space="pixel"):
        self.input_space = input_space

    def fit(self, X, y=None):
        self._reset()
        return self.partial_fit(X, y)

    def partial_fit(self, X, y=None):
        if self.input_space not in ("pixel", "spectral"):
            raise ValueError(f"unknown input_space {self.input_space!r}")
        if not hasattr(self, "_pooled"):
            self._reset()
        X = as_float_field(X, name="X")
        if X.ndim == 2:
            X = X[None]
        if y is not None and len(y) != len(X):
            raise ValueError("y must have one label per sample")
        fields = to_spectral(X) if self.input_space == "pixel" else X
        for i, field in enumerate(fields):
            self._pooled.update(field)
            if y is not None:
                label = y[i]
                acc = self._per_class.setdefault(label, RunningMoments())
                acc.update(field)
        self._refresh()
        return self

    def invariance_reports(self, threshold=DEFAULT_INVARIANCE_THRESHOLD):
        """Invariance counts for the pooled stats and each class."""
        reports = [count_invariant(self.stats_, threshold)]
        for label in self.classes_:
            reports.append(count_invariant(self.class_stats_[label], threshold))
        return reports

    def _reset(self):
        self._pooled = RunningMoments()
        self._per_class = {}

    def _refresh(self):
        self.stats_ = self._pooled.finalize()
        self.class_stats_ = {
            label: acc.finalize(label=label)
            for label, acc in self._per_class.items()
        }
        self.classes_ = sorted(self.class_stats_)
