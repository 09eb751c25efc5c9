"""Noise-schedule construction and the scalar coefficient algebra of the
forward and backward processes.

Timesteps are 1-indexed: ``alpha[t-1]`` is the step-t retention factor and
``alpha_bar[t]`` the cumulative product with ``alpha_bar[0] == 1``.  The
complement ``1 - alpha_bar[t]`` is tracked by its own cancellation-free
recurrence

    (1 - alpha_bar[t]) = (1 - alpha_bar[t-1]) + alpha_bar[t-1] * beta[t]

so posterior coefficients stay accurate even when alpha_bar is close to 1.
"""

import json
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "NoiseSchedule",
    "schedule_from_alphas",
    "cosine_schedule",
    "PosteriorCoeffs",
    "coeffs_from_values",
    "ddpm_coeffs_from_values",
    "posterior_coeffs",
    "ddpm_posterior_coeffs",
    "mean_drift_weights",
    "geometric_drift_weights",
    "drift_multiplier_curve",
    "drift_coefficient_sum",
]

COSINE_OFFSET = 0.008
ALPHA_MIN = 1e-8
ALPHA_MAX = 0.9999
DEFAULT_TERMINAL_EPS = 1e-5


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable noise schedule with precomputed cumulative products."""

    alpha: np.ndarray
    alpha_bar: np.ndarray
    one_minus_alpha_bar: np.ndarray = field(repr=False)

    def __post_init__(self):
        # Snapshot the inputs: the schedule owns immutable copies.
        alpha = np.array(self.alpha, dtype=np.float64)
        alpha_bar = np.array(self.alpha_bar, dtype=np.float64)
        omab = np.array(self.one_minus_alpha_bar, dtype=np.float64)
        if alpha.ndim != 1 or len(alpha) < 1:
            raise ValueError("alpha must be a nonempty 1-D sequence")
        if np.any(alpha <= 0) or np.any(alpha > 1):
            raise ValueError("alpha values must lie in (0, 1]")
        if len(alpha_bar) != len(alpha) + 1 or alpha_bar[0] != 1.0:
            raise ValueError("alpha_bar must have length T+1 with alpha_bar[0] == 1")
        if np.any(np.diff(alpha_bar) > 0):
            raise ValueError("alpha_bar must be nonincreasing")
        if not np.allclose(alpha_bar[1:], np.cumprod(alpha), rtol=1e-12, atol=0):
            raise ValueError("alpha_bar is not the cumulative product of alpha")
        for name, arr in (("alpha", alpha), ("alpha_bar", alpha_bar),
                          ("one_minus_alpha_bar", omab)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "alpha_bar", alpha_bar)
        object.__setattr__(self, "one_minus_alpha_bar", omab)
        alpha.setflags(write=False)
        alpha_bar.setflags(write=False)
        omab.setflags(write=False)

    @property
    def n_steps(self):
        return len(self.alpha)

    @property
    def beta(self):
        return 1.0 - self.alpha

    def check_step(self, t):
        if not 1 <= t <= self.n_steps:
            raise ValueError(f"timestep {t} outside [1, {self.n_steps}]")
        return int(t)

    def to_json(self):
        """Serialize to a JSON document with full double precision."""
        return json.dumps(
            {
                "T": self.n_steps,
                "alpha": self.alpha.tolist(),
                "alpha_bar": self.alpha_bar.tolist(),
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        alpha = np.asarray(doc["alpha"], dtype=np.float64)
        alpha_bar = np.asarray(doc["alpha_bar"], dtype=np.float64)
        if doc["T"] != len(alpha):
            raise ValueError("schedule document T does not match alpha length")
        return cls(alpha=alpha, alpha_bar=alpha_bar,
                   one_minus_alpha_bar=_stable_complement(alpha))


def _stable_complement(alpha):
    """1 - cumprod(alpha) via the additive recurrence (no cancellation)."""
    alpha = np.asarray(alpha, dtype=np.float64)
    omab = np.empty(len(alpha) + 1)
    omab[0] = 0.0
    bar = 1.0
    for t, a in enumerate(alpha, start=1):
        omab[t] = omab[t - 1] + bar * (1.0 - a)
        bar *= a
    return omab


def schedule_from_alphas(alpha):
    """Build a schedule from per-step retention factors."""
    alpha = np.asarray(alpha, dtype=np.float64)
    alpha_bar = np.concatenate([[1.0], np.cumprod(alpha)])
    return NoiseSchedule(alpha=alpha, alpha_bar=alpha_bar,
                         one_minus_alpha_bar=_stable_complement(alpha))


def cosine_schedule(n_steps, terminal_eps=DEFAULT_TERMINAL_EPS):
    """Squared-cosine schedule with a clamped terminal cumulative product.

    The cumulative curve follows cos^2 of the offset-normalized timestep;
    per-step factors are clipped to [1e-8, 0.9999].  If the resulting
    alpha_bar at the final step still exceeds ``terminal_eps``, trailing
    steps are clamped down (never below the alpha floor) until the terminal
    constraint holds, so sampling may start from the stationary law.
    """
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    if not 0.0 < terminal_eps < 1.0:
        raise ValueError(f"terminal_eps must lie in (0, 1), got {terminal_eps}")

    grid = np.arange(n_steps + 1) / n_steps
    curve = np.cos((grid + COSINE_OFFSET) / (1 + COSINE_OFFSET) * np.pi / 2) ** 2
    curve /= curve[0]
    alpha = np.clip(curve[1:] / curve[:-1], ALPHA_MIN, ALPHA_MAX)

    terminal = float(np.prod(alpha))
    t = n_steps - 1
    while terminal > terminal_eps and t >= 0:
        rest = float(np.prod(alpha[:t])) * float(np.prod(alpha[t + 1:]))
        alpha[t] = max(ALPHA_MIN, min(alpha[t], terminal_eps / max(rest, ALPHA_MIN)))
        terminal = float(np.prod(alpha))
        t -= 1
    if terminal > terminal_eps:
        raise ValueError(
            f"cannot satisfy terminal constraint {terminal_eps} with {n_steps} steps"
        )
    return schedule_from_alphas(alpha)


@dataclass(frozen=True)
class PosteriorCoeffs:
    """Affine weights and variance scale of the backward Gaussian.

    The posterior mean is ``x_t_coeff * x_t + x0_coeff * x0 + mean_coeff * mu``
    and the covariance is ``variance_scale * Sigma``.
    """

    x_t_coeff: float
    x0_coeff: float
    mean_coeff: float
    variance_scale: float


def coeffs_from_values(alpha_t, alpha_bar_prev, one_minus_alpha_bar_prev=None,
                       one_minus_alpha_bar=None):
    """Posterior coefficients of the feature-preserving chain from raw
    scalars, independent of any schedule object.

    The mean-anchoring coefficient is the closed form whose three weights
    sum to one, so the posterior mean fixes the stationary mean exactly.
    """
    beta_t = 1.0 - alpha_t
    omab_prev = (1.0 - alpha_bar_prev if one_minus_alpha_bar_prev is None
                 else one_minus_alpha_bar_prev)
    omab = (1.0 - alpha_bar_prev * alpha_t if one_minus_alpha_bar is None
            else one_minus_alpha_bar)
    if omab <= 0:
        raise ValueError("degenerate posterior: no noise accumulated by step t")
    sqrt_alpha_t = np.sqrt(alpha_t)
    sqrt_ab_prev = np.sqrt(alpha_bar_prev)
    x_t_coeff = sqrt_alpha_t * omab_prev / omab
    x0_coeff = sqrt_ab_prev * beta_t / omab
    mean_coeff = ((1.0 - sqrt_ab_prev) * beta_t / omab
                  - omab_prev * (sqrt_alpha_t - alpha_t) / omab)
    variance_scale = beta_t * omab_prev / omab
    return PosteriorCoeffs(float(x_t_coeff), float(x0_coeff),
                           float(mean_coeff), float(variance_scale))


def ddpm_coeffs_from_values(alpha_t, alpha_bar_prev, one_minus_alpha_bar_prev=None,
                            one_minus_alpha_bar=None):
    """Posterior coefficients of the plain DDPM chain (no mean term)."""
    beta_t = 1.0 - alpha_t
    omab_prev = (1.0 - alpha_bar_prev if one_minus_alpha_bar_prev is None
                 else one_minus_alpha_bar_prev)
    omab = (1.0 - alpha_bar_prev * alpha_t if one_minus_alpha_bar is None
            else one_minus_alpha_bar)
    if omab <= 0:
        raise ValueError("degenerate posterior: no noise accumulated by step t")
    x_t_coeff = np.sqrt(alpha_t) * omab_prev / omab
    x0_coeff = np.sqrt(alpha_bar_prev) * beta_t / omab
    variance_scale = beta_t * omab_prev / omab
    return PosteriorCoeffs(float(x_t_coeff), float(x0_coeff), 0.0,
                           float(variance_scale))


def posterior_coeffs(sched, t):
    """Backward-Gaussian coefficients at step t of the feature-preserving chain."""
    t = sched.check_step(t)
    return coeffs_from_values(
        sched.alpha[t - 1],
        sched.alpha_bar[t - 1],
        one_minus_alpha_bar_prev=sched.one_minus_alpha_bar[t - 1],
        one_minus_alpha_bar=sched.one_minus_alpha_bar[t],
    )


def ddpm_posterior_coeffs(sched, t):
    """Backward-Gaussian coefficients at step t of the DDPM baseline."""
    t = sched.check_step(t)
    return ddpm_coeffs_from_values(
        sched.alpha[t - 1],
        sched.alpha_bar[t - 1],
        one_minus_alpha_bar_prev=sched.one_minus_alpha_bar[t - 1],
        one_minus_alpha_bar=sched.one_minus_alpha_bar[t],
    )


def mean_drift_weights(sched):
    """The chain's own per-step mean-pull weights, 1 - sqrt(alpha_t)."""
    return 1.0 - np.sqrt(sched.alpha)


def geometric_drift_weights(ratio, n_steps, scale=1.0):
    """Geometric weight sequence scale * ratio**t for t = 1..n_steps."""
    if not 0 < ratio:
        raise ValueError("ratio must be positive")
    t = np.arange(1, n_steps + 1, dtype=np.float64)
    return scale * np.power(ratio, t)


def drift_multiplier_curve(sched, drift_weights):
    """Mean-drift multiplier sqrt(abar_t) * sum_s weights_s / sqrt(abar_s)
    for every t, as an array of length T."""
    weights = np.asarray(drift_weights, dtype=np.float64)
    if len(weights) != sched.n_steps:
        raise ValueError("drift weights must have one entry per step")
    if not np.all(np.isfinite(weights)) or np.any(weights < 0):
        raise ValueError("drift weights must be finite and nonnegative")
    sqrt_ab = np.sqrt(sched.alpha_bar[1:])
    return sqrt_ab * np.cumsum(weights / sqrt_ab)


def drift_coefficient_sum(sched, drift_weights, t):
    """Multiplier of the stationary mean in the closed-form forward law at t."""
    t = sched.check_step(t)
    return float(drift_multiplier_curve(sched, drift_weights)[t - 1])
