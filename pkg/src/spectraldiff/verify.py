"""Independent oracles certifying the distributional identities of the chain.

Every check here avoids the closed-form code path it certifies: forward
moments come from Monte-Carlo simulation of the single-step recursion,
posterior moments from trapezoidal quadrature over the product of the two
Gaussian factors, and drift bounds from direct summation.  Components are
independent under a diagonal covariance, so scalar (1-D) reductions fully
determine the joint laws and the oracles run at machine precision without a
curse of dimensionality.

Checks return :class:`OracleReport` records; a report passes exactly when
its measured discrepancy is at or below its tolerance.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .diffusion import DiffusionState, forward_closed, forward_step
from .rng import make_rng
from .schedule import (
    coeffs_from_values,
    cosine_schedule,
    ddpm_coeffs_from_values,
    drift_multiplier_curve,
    geometric_drift_weights,
    mean_drift_weights,
    schedule_from_alphas,
)
from .spectral import to_spectral
from .stats import ClassStats

__all__ = [
    "OracleReport",
    "mc_forward_consistency",
    "posterior_bayes_oracle",
    "posterior_oracle_sweep",
    "terminal_law_check",
    "drift_convergence_check",
    "drift_telescoping_check",
    "spectral_moment_distance",
    "run_suite",
    "SUITES",
]


@dataclass
class OracleReport:
    """Outcome of one verification check."""

    name: str
    discrepancy: float
    tolerance: float
    n: int
    params: dict = field(default_factory=dict)
    note: str = ""

    @property
    def passed(self):
        return self.discrepancy <= self.tolerance

    def to_json(self):
        return json.dumps(
            {
                "check": self.name,
                "discrepancy": self.discrepancy,
                "tolerance": self.tolerance,
                "pass": self.passed,
                "n": self.n,
                "params": self.params,
                "note": self.note,
            },
            sort_keys=True,
        )


def mc_forward_consistency(sched, mu, var, xhat0, n_paths=100_000,
                           checkpoints=None, seed=0, tolerance=0.01):
    """Iterate the single-step forward recursion over many scalar chains and
    compare empirical moments at checkpoints with the closed-form law.

    The expected moments are evaluated inline from the schedule arrays; the
    chain itself runs through :func:`forward_step`, so the two code paths
    share nothing but the schedule.
    """
    if n_paths < 10_000:
        raise ValueError("n_paths must be at least 10000")
    n_steps = sched.n_steps
    if checkpoints is None:
        checkpoints = sorted({min(10, n_steps), min(100, n_steps), n_steps})
    rng = make_rng(seed, "mc-forward")
    stats = ClassStats(
        mu=np.full(n_paths, float(mu)),
        var=np.full(n_paths, float(var)),
        n=1,
    )
    state = DiffusionState(field=np.full(n_paths, float(xhat0)), t=0)

    worst = 0.0
    details = {}
    exact = var == 0.0
    for t in range(1, n_steps + 1):
        state = forward_step(state, stats, sched, rng)
        if t in checkpoints:
            expected_mean = mu + math.sqrt(sched.alpha_bar[t]) * (xhat0 - mu)
            expected_var = sched.one_minus_alpha_bar[t] * var
            got_mean = float(state.field.mean())
            got_var = float(state.field.var())
            err_mean = abs(got_mean - expected_mean) / max(abs(expected_mean), 1e-12)
            if exact:
                err_var = abs(got_var)
                err_mean = abs(got_mean - expected_mean)
            else:
                err_var = abs(got_var - expected_var) / expected_var
            details[t] = {"mean_err": err_mean, "var_err": err_var}
            worst = max(worst, err_mean, err_var)
    return OracleReport(
        name="forward-composition",
        discrepancy=worst,
        tolerance=1e-12 if exact else tolerance,
        n=n_paths,
        params={"mu": mu, "var": var, "xhat0": xhat0, "T": n_steps,
                "checkpoints": {str(k): v for k, v in details.items()}},
    )


def _posterior_quadrature(alpha_t, alpha_bar_prev, mu, var, xhat0, xhat_t,
                          grid_n):
    """Mean and variance of the backward posterior by numerical integration
    of the product of the two forward Gaussian factors."""
    sqrt_a = math.sqrt(alpha_t)
    step_var = (1.0 - alpha_t) * var
    prior_mean = mu + math.sqrt(alpha_bar_prev) * (xhat0 - mu)
    prior_var = (1.0 - alpha_bar_prev) * var

    # Bracket the posterior by the precision-weighted overlap of the two
    # factors (grid placement only; the moments come from the quadrature).
    center1 = (xhat_t - (1.0 - sqrt_a) * mu) / sqrt_a
    prec1 = sqrt_a * sqrt_a / step_var
    prec2 = 1.0 / prior_var
    center = (prec1 * center1 + prec2 * prior_mean) / (prec1 + prec2)
    width = 1.0 / math.sqrt(prec1 + prec2)
    lo = center - 12 * width
    hi = center + 12 * width

    for _ in range(16):
        grid = np.linspace(lo, hi, grid_n)
        log_density = (
            -((xhat_t - sqrt_a * grid - (1.0 - sqrt_a) * mu) ** 2) / (2 * step_var)
            - ((grid - prior_mean) ** 2) / (2 * prior_var)
        )
        density = np.exp(log_density - log_density.max())
        weights = np.full(grid_n, 1.0)
        weights[0] = weights[-1] = 0.5
        norm = float(np.sum(weights * density))
        mean = float(np.sum(weights * density * grid) / norm)
        second = float(np.sum(weights * density * (grid - mean) ** 2) / norm)
        spread = 8 * math.sqrt(second)
        if lo <= mean - spread and hi >= mean + spread:
            return mean, second
        lo = min(lo, mean - 1.5 * spread)
        hi = max(hi, mean + 1.5 * spread)
    raise RuntimeError("posterior quadrature failed to achieve grid coverage")


def posterior_bayes_oracle(alpha_t, alpha_bar_prev, mu, var, xhat0, xhat_t,
                           grid_n=10_000, tolerance=1e-6, use_ddpm=False):
    """Compare the closed-form posterior mean/variance against quadrature.

    With ``use_ddpm`` the closed form under test is the baseline (no mean
    term), valid only for mu = 0.
    """
    if grid_n < 10_000:
        raise ValueError("grid_n must be at least 10000")
    if not 0 < alpha_t < 1 or not 0 <= alpha_bar_prev < 1:
        raise ValueError("need 0 < alpha_t < 1 and 0 <= alpha_bar_prev < 1")
    if var <= 0:
        raise ValueError("quadrature requires positive variance")

    q_mean, q_var = _posterior_quadrature(
        alpha_t, alpha_bar_prev, mu, var, xhat0, xhat_t, grid_n
    )
    if use_ddpm:
        coeffs = ddpm_coeffs_from_values(alpha_t, alpha_bar_prev)
        closed_mean = coeffs.x_t_coeff * xhat_t + coeffs.x0_coeff * xhat0
    else:
        coeffs = coeffs_from_values(alpha_t, alpha_bar_prev)
        closed_mean = (coeffs.x_t_coeff * xhat_t + coeffs.x0_coeff * xhat0
                       + coeffs.mean_coeff * mu)
    closed_var = coeffs.variance_scale * var
    discrepancy = max(abs(q_mean - closed_mean), abs(q_var - closed_var))
    return OracleReport(
        name="posterior-bayes" + ("-ddpm" if use_ddpm else ""),
        discrepancy=discrepancy,
        tolerance=tolerance,
        n=grid_n,
        params={
            "alpha_t": alpha_t, "alpha_bar_prev": alpha_bar_prev, "mu": mu,
            "var": var, "xhat0": xhat0, "xhat_t": xhat_t,
            "quadrature": [q_mean, q_var],
            "closed_form": [closed_mean, closed_var],
        },
    )


def posterior_oracle_sweep(sched, n_draws=1000, grid_n=10_000, seed=0,
                           tolerance=1e-6):
    """Randomized sweep of the quadrature oracle across schedule steps and
    parameter draws; reports the worst discrepancy."""
    rng = make_rng(seed, "posterior-sweep")
    worst = 0.0
    worst_params = {}
    for _ in range(n_draws):
        t = int(rng.integers(2, sched.n_steps + 1))
        mu = float(rng.uniform(-2, 2))
        var = float(rng.uniform(0.1, 4.0))
        xhat0 = float(rng.uniform(-2, 2))
        xhat_t = float(rng.uniform(-2, 2))
        report = posterior_bayes_oracle(
            sched.alpha[t - 1], sched.alpha_bar[t - 1], mu, var, xhat0,
            xhat_t, grid_n=grid_n, tolerance=tolerance,
        )
        if report.discrepancy > worst:
            worst = report.discrepancy
            worst_params = report.params
    return OracleReport(
        name="posterior-sweep",
        discrepancy=worst,
        tolerance=tolerance,
        n=n_draws,
        params={"grid_n": grid_n, "worst_case": worst_params},
    )


def terminal_law_check(stats, sched, n_draws=100_000, seed=0,
                       terminal_eps=1e-5, n_probes=3, chunk=2_000):
    """Verify the terminal forward law is the stationary Gaussian.

    Draws the closed-form forward law at t = T from several distinct clean
    fields; per-component means and variances must match (mu, Sigma) within
    three standard errors after allowing the sqrt(abar_T)-scaled dependence
    on the clean field, and zero-variance components must equal their mean
    in every draw.

    With thousands of per-component comparisons a few chance exceedances of
    3 SE are expected; the check therefore requires (a) no comparison beyond
    5 SE and (b) a 3-SE exceedance count consistent with its binomial chance
    level.  Any systematic moment error at these sample sizes produces
    z-scores orders of magnitude past both gates.
    """
    abar_T = float(sched.alpha_bar[-1])
    if abar_T > terminal_eps:
        raise ValueError(
            f"terminal alpha_bar {abar_T} exceeds {terminal_eps}; "
            "tighten the schedule before checking the terminal law"
        )
    rng = make_rng(seed, "terminal-law")
    mu = stats.mu.ravel()
    var = stats.var.ravel()
    k = mu.size
    frozen = var == 0.0

    # Probe 1 is the class mean itself (exercises exact freezing); the
    # others are displaced clean fields.
    probes = [mu + (i - 1.0) * (1.0 + np.sqrt(var)) for i in range(n_probes)]
    means = []
    all_z = []
    for probe in probes:
        total = np.zeros(k)
        total_sq = np.zeros(k)
        frozen_ok = True
        n_chunks = -(-n_draws // chunk)
        drawn = 0
        for _ in range(n_chunks):
            m = min(chunk, n_draws - drawn)
            drawn += m
            tiled = ClassStats(mu=np.tile(mu, (m, 1)), var=np.tile(var, (m, 1)), n=1)
            draws = forward_closed(
                np.tile(probe, (m, 1)), sched.n_steps, tiled, sched, rng
            ).field
            if frozen.any():
                # Zero-variance components are deterministic: exactly the
                # mean when the clean field sits at the mean, and within
                # sqrt(abar_T) of it otherwise.
                got = draws[:, frozen]
                at_mean = probe[frozen] == mu[frozen]
                frozen_ok &= bool(np.all(got[:, at_mean] == mu[frozen][at_mean]))
                bound = math.sqrt(abar_T) * np.abs(probe[frozen] - mu[frozen])
                frozen_ok &= bool(
                    np.all(np.abs(got - mu[frozen]) <= bound + 1e-15)
                )
            total += draws.sum(axis=0)
            total_sq += (draws * draws).sum(axis=0)
        emp_mean = total / n_draws
        emp_var = total_sq / n_draws - emp_mean ** 2
        means.append(emp_mean)
        if frozen.any() and not frozen_ok:
            return OracleReport(
                name="terminal-law", discrepancy=float("inf"), tolerance=1.0,
                n=n_draws, note="zero-variance component left its mean",
            )
        live = ~frozen
        se_mean = np.sqrt(var[live] / n_draws)
        bias_allow = math.sqrt(abar_T) * np.abs(probe[live] - mu[live])
        z_mean = np.maximum(
            np.abs(emp_mean[live] - mu[live]) - bias_allow, 0.0
        ) / se_mean
        se_var = var[live] * math.sqrt(2.0 / n_draws)
        z_var = np.abs(emp_var[live] - var[live]) / se_var
        all_z.append(z_mean)
        all_z.append(z_var)

    # Terminal means may depend on the clean field only through sqrt(abar_T).
    live = ~frozen
    se_pair = np.sqrt(2.0 * var[live] / n_draws)
    for i in range(n_probes):
        for j in range(i + 1, n_probes):
            allow = math.sqrt(abar_T) * np.abs(probes[i] - probes[j])[live]
            gap = np.abs(means[i] - means[j])[live]
            all_z.append(np.maximum(gap - allow, 0.0) / se_pair)

    z = np.concatenate(all_z)
    worst_z = float(z.max())
    exceed = int(np.count_nonzero(z > 3.0))
    p_three = 2.0 * (1.0 - 0.5 * (1.0 + math.erf(3.0 / math.sqrt(2.0))))
    chance = z.size * p_three
    exceed_gate = (exceed - chance) / (3.0 * math.sqrt(
        max(z.size * p_three * (1.0 - p_three), 1e-12)
    ))
    discrepancy = max(worst_z / 5.0, exceed_gate)
    return OracleReport(
        name="terminal-law",
        discrepancy=discrepancy,
        tolerance=1.0,
        n=n_draws,
        params={"n_probes": n_probes, "alpha_bar_T": abar_T,
                "components": k, "worst_z": worst_z,
                "exceedances_3se": exceed, "chance_level": chance},
    )


def drift_telescoping_check(sched, tolerance=1e-12):
    """With per-step weights 1 - sqrt(alpha_t) the drift multiplier must
    telescope to 1 - sqrt(abar_t) at every step."""
    curve = drift_multiplier_curve(sched, mean_drift_weights(sched))
    expected = 1.0 - np.sqrt(sched.alpha_bar[1:])
    discrepancy = float(np.max(np.abs(curve - expected)))
    return OracleReport(
        name="drift-telescoping",
        discrepancy=discrepancy,
        tolerance=tolerance,
        n=sched.n_steps,
        params={"T": sched.n_steps},
    )


def drift_convergence_check(drift_weights, sched, horizon=None):
    """Ratio-test the drift multiplier sequence.

    If the weight sequence satisfies a geometric ratio bound p < 1, the
    multiplier must stay bounded and its increments must shrink by a factor
    below one over the tail.  When the ratio condition does not hold the
    check is vacuous: it reports that fact without asserting divergence.
    """
    if horizon is None:
        horizon = sched.n_steps
    if horizon < 100:
        raise ValueError("horizon must be at least 100 steps")
    if horizon > sched.n_steps:
        raise ValueError("horizon exceeds schedule length")
    weights = np.asarray(drift_weights, dtype=np.float64)[:horizon]
    curve = drift_multiplier_curve(
        sched, np.concatenate([weights, np.zeros(sched.n_steps - horizon)])
    )[:horizon]

    # Subnormal weights have quantized ratios; treat them as vanished.
    positive = weights >= np.finfo(np.float64).tiny
    valid = positive[:-1] & positive[1:]
    if not valid.any():
        ratio_bound = 0.0
    else:
        ratio_bound = float(np.max(weights[1:][valid] / weights[:-1][valid]))
    if ratio_bound >= 1.0:
        return OracleReport(
            name="drift-ratio-test",
            discrepancy=0.0,
            tolerance=1.0,
            n=horizon,
            params={"ratio_bound": ratio_bound},
            note="condition not satisfied: weight ratio not below one; "
                 "no boundedness conclusion drawn",
        )

    sup = float(np.max(np.abs(curve)))
    increments = np.abs(np.diff(curve))
    tail = increments[horizon // 2:]
    nonzero = tail > 0
    if np.count_nonzero(nonzero) >= 2:
        idx = np.flatnonzero(nonzero)
        ratios = tail[idx[1:]] / tail[idx[:-1]]
        fitted_ratio = float(np.max(ratios))
    else:
        fitted_ratio = 0.0  # increments underflowed to zero: fully converged
    discrepancy = max(fitted_ratio, 0.0 if np.isfinite(sup) else float("inf"))
    return OracleReport(
        name="drift-ratio-test",
        discrepancy=discrepancy,
        tolerance=1.0 - 1e-9,
        n=horizon,
        params={"ratio_bound": ratio_bound, "sup": sup,
                "fitted_increment_ratio": fitted_ratio},
    )


def spectral_moment_distance(images, reference, floor=1e-8):
    """Distance between the spectral statistics of generated images and a
    reference: RMS mean gap plus RMS log-ratio of floored variances.

    Symmetric in (generated, reference) statistics and zero exactly when
    both moments agree componentwise (up to the floor).  The floor only
    guards the logarithm; it sits far below the variance scale of real
    image spectra so collapsed or inflated sample variances are penalized.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[:, None]
    if images.shape[0] < 32:
        raise ValueError(f"need at least 32 samples, got {images.shape[0]}")
    fields = to_spectral(images)
    got_mu = fields.mean(axis=0)
    got_var = fields.var(axis=0)
    if got_mu.shape != reference.mu.shape:
        raise ValueError(
            f"sample spectral shape {got_mu.shape} does not match reference "
            f"{reference.mu.shape}"
        )
    mean_gap = float(np.sqrt(np.mean((got_mu - reference.mu) ** 2)))
    log_ratio = np.log(
        np.maximum(got_var, floor) / np.maximum(reference.var, floor)
    )
    var_gap = float(np.sqrt(np.mean(log_ratio ** 2)))
    return mean_gap + var_gap


def _synthetic_stats(shape=(1, 16, 16), seed=0, n_frozen=8):
    """Reference statistics for self-contained checks: smooth power-law-ish
    variances with a few exactly frozen components."""
    rng = make_rng(seed, "synthetic-stats")
    k = int(np.prod(shape))
    mu = rng.uniform(-1.0, 1.0, size=shape)
    var = rng.uniform(0.2, 2.0, size=shape)
    flat = var.reshape(-1)
    frozen = rng.choice(k, size=min(n_frozen, k), replace=False)
    flat[frozen] = 0.0
    return ClassStats(mu=mu, var=var, n=1000)


SUITES = ("forward", "posterior", "terminal", "drift")


def run_suite(which="all", seed=0):
    """Run a named verification suite (or all of them); returns reports."""
    names = SUITES if which == "all" else (which,)
    unknown = set(names) - set(SUITES)
    if unknown:
        raise ValueError(f"unknown suite(s): {sorted(unknown)}")
    reports = []
    sched = cosine_schedule(500)
    if "forward" in names:
        reports.append(mc_forward_consistency(
            sched, mu=0.5, var=2.0, xhat0=1.0, n_paths=100_000, seed=seed,
        ))
        reports.append(mc_forward_consistency(
            schedule_from_alphas(np.full(200, 0.99)), mu=0.5, var=2.0,
            xhat0=1.0, n_paths=100_000, seed=seed,
        ))
        reports.append(mc_forward_consistency(
            schedule_from_alphas(np.full(100, 0.97)), mu=-0.25, var=0.0,
            xhat0=1.5, n_paths=10_000, seed=seed,
        ))
    if "posterior" in names:
        reports.append(posterior_bayes_oracle(
            0.8, 0.9, mu=0.5, var=2.0, xhat0=1.0, xhat_t=0.7,
        ))
        reports.append(posterior_bayes_oracle(
            0.8, 0.9, mu=0.0, var=2.0, xhat0=1.0, xhat_t=0.7, use_ddpm=True,
        ))
        reports.append(posterior_oracle_sweep(sched, n_draws=1000, seed=seed))
    if "terminal" in names:
        reports.append(terminal_law_check(
            _synthetic_stats(seed=seed), sched, n_draws=100_000, seed=seed,
        ))
    if "drift" in names:
        reports.append(drift_telescoping_check(sched))
        long_sched = schedule_from_alphas(np.full(10_000, 0.99))
        reports.append(drift_convergence_check(
            geometric_drift_weights(0.9, 10_000), long_sched, horizon=10_000,
        ))
        reports.append(drift_convergence_check(
            np.full(10_000, 0.3), long_sched, horizon=10_000,
        ))
    return reports
