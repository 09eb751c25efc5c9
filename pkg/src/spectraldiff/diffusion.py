"""Feature-preserving diffusion in spectral space plus the DDPM baseline.

The forward chain pulls every spectral component toward its class mean with
per-step noise scaled by the class variance,

    x_t = sqrt(a_t) * x_{t-1} + N((1 - sqrt(a_t)) * mu, (1 - a_t) * Sigma),

which composes to N(mu + sqrt(abar_t) * (x_0 - mu), (1 - abar_t) * Sigma)
and converges to the stationary law N(mu, Sigma).  Means are evaluated in
the anchored form ``mu + c * (x - mu)`` so components with zero variance
that start at their mean stay bitwise equal to it through every forward and
backward step.  The DDPM baseline is the special case mu = 0, Sigma = I run
in pixel space; under a shared noise stream the two chains are
path-identical in that configuration.
"""

from dataclasses import dataclass

import numpy as np

from ._validation import as_float_field, check_same_shape
from .schedule import ddpm_posterior_coeffs, posterior_coeffs
from .spectral import to_pixel, to_spectral

__all__ = [
    "DiffusionState",
    "PosteriorParams",
    "forward_step",
    "forward_closed",
    "terminal_sample",
    "posterior_params",
    "backward_step",
    "sample",
    "ddpm_forward_closed",
    "ddpm_backward_step",
    "ddpm_sample",
    "epsilon_to_x0",
]

MAX_TRAJECTORY_SNAPSHOTS = 32


@dataclass(frozen=True)
class DiffusionState:
    """A spectral field together with its chain position t in [0, T]."""

    field: np.ndarray
    t: int


def _anchored_mean(anchor, coeff, x):
    """anchor + coeff * (x - anchor), exact when x equals the anchor or
    when coeff is exactly one (no-noise step)."""
    if coeff == 1.0:
        return x.copy()
    return anchor + coeff * (x - anchor)


def forward_step(state, stats, sched, rng):
    """Advance the chain one step: state.t -> state.t + 1."""
    if state.t >= sched.n_steps:
        raise ValueError(f"cannot step forward from t={state.t} (T={sched.n_steps})")
    x = as_float_field(state.field, name="state field")
    check_same_shape(x, stats.mu, "state field", "stats mu")
    t_next = state.t + 1
    alpha_t = sched.alpha[t_next - 1]
    mean = _anchored_mean(stats.mu, np.sqrt(alpha_t), x)
    noise = np.sqrt(1.0 - alpha_t) * stats.std * rng.standard_normal(x.shape)
    return DiffusionState(field=mean + noise, t=t_next)


def forward_closed(xhat0, t, stats, sched, rng):
    """Draw from the closed-form forward law at step t given the clean field."""
    if not 0 <= t <= sched.n_steps:
        raise ValueError(f"timestep {t} outside [0, {sched.n_steps}]")
    x0 = as_float_field(xhat0, name="clean field")
    check_same_shape(x0, stats.mu, "clean field", "stats mu")
    if t == 0:
        return DiffusionState(field=x0.copy(), t=0)
    mean = _anchored_mean(stats.mu, np.sqrt(sched.alpha_bar[t]), x0)
    scale = np.sqrt(sched.one_minus_alpha_bar[t]) * stats.std
    return DiffusionState(field=mean + scale * rng.standard_normal(x0.shape), t=t)


def terminal_sample(stats, sched, rng):
    """Draw from the stationary law N(mu, Sigma) at t = T; zero-variance
    components equal their mean exactly."""
    field = stats.mu + stats.std * rng.standard_normal(stats.mu.shape)
    return DiffusionState(field=field, t=sched.n_steps)


@dataclass(frozen=True)
class PosteriorParams:
    """Backward Gaussian at one step: mean field and diagonal covariance
    ``variance_scale * var``."""

    mean: np.ndarray
    variance_scale: float
    var: np.ndarray

    @property
    def std(self):
        return np.sqrt(self.variance_scale * self.var)


def posterior_params(xhat_t, xhat0, t, stats, sched):
    """Parameters of q(x_{t-1} | x_t, x_0) for the feature-preserving chain.

    The three mean weights sum to one, so the mean is computed anchored at
    the class mean: mu + a * (x_t - mu) + b * (x_0 - mu).
    """
    coeffs = posterior_coeffs(sched, t)
    x_t = as_float_field(xhat_t, name="noisy field")
    x0 = as_float_field(xhat0, name="clean field")
    check_same_shape(x_t, x0, "noisy field", "clean field")
    check_same_shape(x_t, stats.mu, "noisy field", "stats mu")
    mean = (stats.mu
            + coeffs.x_t_coeff * (x_t - stats.mu)
            + coeffs.x0_coeff * (x0 - stats.mu))
    return PosteriorParams(mean=mean, variance_scale=coeffs.variance_scale,
                           var=stats.var)


def backward_step(xhat_t, xhat0_pred, t, stats, sched, rng):
    """One backward draw x_{t-1} ~ N(posterior mean, variance_scale * Sigma),
    with the clean-field prediction standing in for x_0."""
    params = posterior_params(xhat_t, xhat0_pred, t, stats, sched)
    return params.mean + params.std * rng.standard_normal(params.mean.shape)


def _check_prediction(pred, reference, t):
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape != reference.shape:
        raise ValueError(
            f"denoiser output shape {pred.shape} does not match state shape "
            f"{reference.shape} at t={t}"
        )
    if not np.all(np.isfinite(pred)):
        raise ValueError(f"denoiser produced non-finite values at t={t}")
    return pred


def sample(denoiser, stats, sched, rng, record_trajectory=False):
    """Run the full backward chain and return the generated image.

    Starting from the stationary draw at t = T, each step predicts the clean
    image in pixel space, maps the prediction to spectral space and draws
    from the posterior.  The returned image is the inverse transform of the
    final clean-field prediction.  With ``record_trajectory`` a list of
    (t, spectral field) snapshots, decimated to at most 32 entries, is
    returned alongside the image.
    """
    n_steps = sched.n_steps
    state = terminal_sample(stats, sched, rng)
    stride = max(1, -(-n_steps // (MAX_TRAJECTORY_SNAPSHOTS - 1)))
    trajectory = []
    if record_trajectory:
        trajectory.append((state.t, state.field.copy()))

    xhat0_pred = None
    field = state.field
    for t in range(n_steps, 0, -1):
        pixel = to_pixel(field)
        pred = _check_prediction(denoiser(pixel, t, n_steps), field, t)
        xhat0_pred = to_spectral(pred)
        field = backward_step(field, xhat0_pred, t, stats, sched, rng)
        if record_trajectory and (t - 1) % stride == 0:
            trajectory.append((t - 1, field.copy()))

    image = to_pixel(xhat0_pred)
    if record_trajectory:
        return image, trajectory
    return image


def ddpm_forward_closed(x0, t, sched, rng):
    """Closed-form DDPM forward draw in pixel space (mu = 0, Sigma = I)."""
    if not 0 <= t <= sched.n_steps:
        raise ValueError(f"timestep {t} outside [0, {sched.n_steps}]")
    x0 = as_float_field(x0, name="clean image")
    if t == 0:
        return x0.copy()
    noise = rng.standard_normal(x0.shape)
    return (np.sqrt(sched.alpha_bar[t]) * x0
            + np.sqrt(sched.one_minus_alpha_bar[t]) * noise)


def ddpm_backward_step(x_t, x0_pred, t, sched, rng):
    """One backward draw of the DDPM baseline, parameterized by the clean
    prediction."""
    coeffs = ddpm_posterior_coeffs(sched, t)
    x_t = as_float_field(x_t, name="noisy image")
    x0_pred = as_float_field(x0_pred, name="prediction")
    check_same_shape(x_t, x0_pred, "noisy image", "prediction")
    mean = coeffs.x_t_coeff * x_t + coeffs.x0_coeff * x0_pred
    scale = np.sqrt(coeffs.variance_scale)
    return mean + scale * rng.standard_normal(x_t.shape)


def epsilon_to_x0(x_t, eps, t, sched):
    """Convert a noise prediction to a clean prediction by inverting the
    closed-form forward equation."""
    t = sched.check_step(t)
    x_t = as_float_field(x_t, name="noisy image")
    eps = as_float_field(eps, name="noise prediction")
    check_same_shape(x_t, eps, "noisy image", "noise prediction")
    sqrt_ab = np.sqrt(sched.alpha_bar[t])
    return (x_t - np.sqrt(sched.one_minus_alpha_bar[t]) * eps) / sqrt_ab


def ddpm_sample(denoiser, shape, sched, rng):
    """Full DDPM backward chain from white noise; returns the final clean
    prediction (mirroring the spectral sampler's return convention)."""
    n_steps = sched.n_steps
    x = rng.standard_normal(shape)
    x0_pred = None
    for t in range(n_steps, 0, -1):
        x0_pred = _check_prediction(denoiser(x, t, n_steps), x, t)
        x = ddpm_backward_step(x, x0_pred, t, sched, rng)
    return x0_pred
