"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
lines.  Monte-Carlo criteria use fixed named random streams, so every run
evaluates the identical draw.
"""

import csv
import json
import time
from pathlib import Path

import numpy as np
import pytest

from spectraldiff.cli import main as cli_main
from spectraldiff.models import DdpmBaselineModel, SpectralDiffusionModel
from spectraldiff.rng import make_rng
from spectraldiff.schedule import (
    cosine_schedule,
    ddpm_posterior_coeffs,
    geometric_drift_weights,
    mean_drift_weights,
    drift_multiplier_curve,
    posterior_coeffs,
    schedule_from_alphas,
)
from spectraldiff.spectral import (
    packed_energy,
    radial_profile,
    radial_profile_from_magnitude,
    squared_magnitude,
    to_pixel,
    to_spectral,
    wavenumber_radius,
)
from spectraldiff.stats import ClassStats, power_law_fit
from spectraldiff.training import TrainConfig, gradient_check, train_loop
from spectraldiff.verify import (
    mc_forward_consistency,
    posterior_bayes_oracle,
    posterior_oracle_sweep,
    spectral_moment_distance,
    terminal_law_check,
)

from conftest import direct_spectral


def report(number, ok, description):
    print(f"\n[criterion {number:>3}] {'PASS' if ok else 'FAIL'} — {description}")
    assert ok, f"criterion {number}: {description}"


def test_criterion_01_forward_composition():
    sched = cosine_schedule(500)
    start = time.time()
    result = mc_forward_consistency(
        sched, mu=0.5, var=2.0, xhat0=1.0, n_paths=100_000,
        checkpoints=(10, 100, 500), seed=3,
    )
    elapsed = time.time() - start
    report(
        1,
        result.passed and result.discrepancy < 0.01 and elapsed < 30,
        f"iterated single-step chain matches closed-form moments: worst "
        f"relative error {result.discrepancy:.4%} < 1% over 1e5 paths, "
        f"T=500 ({elapsed:.1f}s < 30s)",
    )


def test_criterion_02_posterior_correctness():
    start = time.time()
    sweep = posterior_oracle_sweep(cosine_schedule(500), n_draws=1000,
                                   grid_n=10_000, seed=0, tolerance=1e-6)
    worked = posterior_bayes_oracle(0.8, 0.9, mu=0.5, var=2.0, xhat0=1.0,
                                    xhat_t=0.7)
    elapsed = time.time() - start
    q_mean, q_var = worked.params["quadrature"]
    worked_ok = (abs(q_mean - 0.902704) <= 1e-6
                 and abs(q_var - 0.142857) <= 1e-6)
    report(
        2,
        sweep.passed and worked.passed and worked_ok and elapsed < 60,
        f"posterior closed form vs quadrature oracle: worst |gap| "
        f"{sweep.discrepancy:.2e} <= 1e-6 over 1000 draws; worked case "
        f"mean {q_mean:.6f}, variance {q_var:.6f} ({elapsed:.1f}s < 60s)",
    )


def test_criterion_03_coefficient_identities():
    rng = make_rng(0, "acceptance-coeffs")
    n_pairs = 0
    worst_affine = 0.0
    worst_variance_gap = 0.0
    first_step_exact = True
    while n_pairs < 10_000:
        n_steps = int(rng.integers(2, 64))
        sched = schedule_from_alphas(rng.uniform(0.5, 0.99999, size=n_steps))
        for t in range(1, n_steps + 1):
            ours = posterior_coeffs(sched, t)
            baseline = ddpm_posterior_coeffs(sched, t)
            worst_affine = max(worst_affine, abs(
                ours.x_t_coeff + ours.x0_coeff + ours.mean_coeff - 1.0
            ))
            worst_variance_gap = max(worst_variance_gap, abs(
                ours.variance_scale - baseline.variance_scale
            ))
            if t == 1:
                first_step_exact &= (ours.mean_coeff == 0.0
                                     and ours.variance_scale == 0.0)
            n_pairs += 1
    report(
        3,
        worst_affine < 1e-12 and worst_variance_gap < 1e-12
        and first_step_exact,
        f"over {n_pairs} random (schedule, t) pairs: |a+b+c-1| <= "
        f"{worst_affine:.2e}, variance-scale gap <= {worst_variance_gap:.2e} "
        f"(both < 1e-12); first-step coefficients exactly zero",
    )


def test_criterion_04_terminal_law():
    rng = make_rng(1, "acceptance-terminal")
    shape = (1, 16, 16)
    var = rng.uniform(0.2, 1.5, size=shape)
    var.reshape(-1)[rng.choice(256, size=10, replace=False)] = 0.0
    stats = ClassStats(mu=rng.uniform(-1, 1, size=shape), var=var, n=100)
    sched = cosine_schedule(500)
    result = terminal_law_check(stats, sched, n_draws=100_000, seed=2)
    report(
        4,
        result.passed and result.params["alpha_bar_T"] <= 1e-5,
        f"terminal law matches the stationary Gaussian at abar_T="
        f"{result.params['alpha_bar_T']:.1e}: worst z "
        f"{result.params['worst_z']:.2f} over 1e5 draws, "
        f"{result.params['exceedances_3se']} of the per-component "
        f"comparisons beyond 3 SE (chance level "
        f"{result.params['chance_level']:.1f})",
    )


def test_criterion_05_transform_fidelity():
    rng = make_rng(2, "acceptance-transform")
    x = rng.standard_normal((4, 32, 32))
    round_trip = float(np.max(np.abs(to_pixel(to_spectral(x)) - x)))

    direct_gap = 0.0
    biject_gap = 0.0
    for shape in ((4, 4), (6, 8)):
        for m1 in range(shape[0]):
            for m2 in range(shape[1]):
                basis = np.zeros(shape)
                basis[m1, m2] = 1.0
                direct_gap = max(direct_gap, float(np.max(np.abs(
                    to_spectral(basis) - direct_spectral(basis)
                ))))
        s = rng.standard_normal(shape)
        biject_gap = max(biject_gap, float(np.max(np.abs(
            to_spectral(to_pixel(s)) - s
        ))))

    y = rng.standard_normal((32, 32))
    pixel_energy = float(np.sum(y * y))
    parseval_rel = abs(
        pixel_energy - 32 * 32 * packed_energy(to_spectral(y))
    ) / pixel_energy
    report(
        5,
        round_trip < 1e-9 and direct_gap < 1e-10 and biject_gap < 1e-10
        and parseval_rel < 1e-9,
        f"transform fidelity: round-trip {round_trip:.1e} < 1e-9; direct-DFT "
        f"gap {direct_gap:.1e} and packing bijection gap {biject_gap:.1e} "
        f"< 1e-10 on 4x4 and 6x8; Parseval {parseval_rel:.1e} < 1e-9",
    )


def test_criterion_06_white_noise_reduction():
    from spectraldiff.diffusion import (
        backward_step,
        ddpm_backward_step,
        ddpm_forward_closed,
        forward_closed,
    )

    sched = cosine_schedule(50)
    shape = (1, 8, 8)
    stats = ClassStats(mu=np.zeros(shape), var=np.ones(shape), n=2)
    x0 = make_rng(3, "reduction-x0").standard_normal(shape)

    forward_gap = 0.0
    for t in range(0, 51):
        ours = forward_closed(x0, t, stats, sched,
                              make_rng(4, "reduction-fwd", t)).field
        base = ddpm_forward_closed(x0, t, sched,
                                   make_rng(4, "reduction-fwd", t))
        forward_gap = max(forward_gap, float(np.max(np.abs(ours - base))))

    rng_a = make_rng(5, "reduction-bwd")
    rng_b = make_rng(5, "reduction-bwd")
    state_a = rng_a.standard_normal(shape)
    state_b = rng_b.standard_normal(shape)
    prediction = make_rng(6, "reduction-pred").standard_normal(shape)
    backward_gap = 0.0
    for t in range(50, 0, -1):
        state_a = backward_step(state_a, prediction, t, stats, sched, rng_a)
        state_b = ddpm_backward_step(state_b, prediction, t, sched, rng_b)
        backward_gap = max(backward_gap,
                           float(np.max(np.abs(state_a - state_b))))
    report(
        6,
        forward_gap <= 1e-12 and backward_gap <= 1e-12,
        f"zero-mean unit-variance chain is path-identical to the white-noise "
        f"baseline under a shared noise stream: forward gap {forward_gap:.1e},"
        f" backward gap {backward_gap:.1e} (<= 1e-12)",
    )


def test_criterion_07_per_class_invariance(digits_idx_paths, tmp_path):
    images_path, labels_path = digits_idx_paths
    out = tmp_path / "stats.json"
    code = cli_main([
        "analyze", "--data", str(images_path), "--labels", str(labels_path),
        "--per-class", "--pad-to", "32", "--threshold", "1e-3",
        "--out", str(out), "--quiet",
    ])
    rows = list(csv.DictReader(open(tmp_path / "invariance.csv")))
    per_digit = {row["label"]: int(row["near_zero"])
                 for row in rows if row["label"] != "all"}
    counts = [per_digit.get(str(d), 0) for d in range(10)]
    report(
        7,
        code == 0 and len(per_digit) == 10 and all(c > 0 for c in counts),
        f"per-digit analyze reports near-invariant components (std <= 1e-3) "
        f"for all 10 digits: counts {counts}",
    )


def test_criterion_07_optional_cifar_band():
    cifar_dir = Path(__file__).resolve().parent.parent / "data" / "cifar10"
    if not cifar_dir.is_dir():
        pytest.skip(
            "optional network-dependent check: CIFAR-10 not available; "
            "place per-class PGM/PPM files under data/cifar10/ to enable"
        )
    handle_code = cli_main([
        "analyze", "--data", str(cifar_dir), "--per-class",
        "--threshold", "1e-3", "--out", "cifar_stats.json", "--quiet",
    ])
    rows = list(csv.DictReader(open("invariance.csv")))
    counts = [int(r["near_zero"]) for r in rows if r["label"] != "all"]
    report(
        "7b",
        handle_code == 0 and all(300 <= c <= 600 for c in counts),
        f"CIFAR-10 per-class near-invariant counts within [300, 600]: {counts}",
    )


def test_criterion_08_power_law(digits):
    recovered = {}
    r = wavenumber_radius((32, 32))
    from test_spectral import imaginary_slot_mask

    mask = imaginary_slot_mask((32, 32))
    for gamma in (1.5, 2.0, 3.5):
        with np.errstate(divide="ignore"):
            mag = np.where(r > 0, r ** -gamma, 0.0)
        spec = np.sqrt(mag)
        spec[mask] = 0.0
        profile = radial_profile(spec, n_bins=12)
        fit = power_law_fit(profile, k_min=1.0, k_max=16.0)
        recovered[gamma] = fit.exponent

    synthetic_ok = all(abs(recovered[g] - g) <= 0.1 for g in recovered)

    mean_mag = np.zeros((1, 32, 32))
    for image in digits.iter_images():
        mean_mag += squared_magnitude(to_spectral(image))
    mean_mag /= digits.n_items
    profile = radial_profile_from_magnitude(mean_mag, n_bins=12)
    smoothed = np.convolve(profile.power, np.ones(3) / 3, mode="valid")
    first_half = smoothed[: len(smoothed) // 2 + 1]
    monotone_ok = bool(np.all(np.diff(first_half) <= 0))
    report(
        8,
        synthetic_ok and monotone_ok,
        f"power-law exponents recovered within 0.1: "
        f"{ {g: round(v, 3) for g, v in recovered.items()} }; smoothed "
        f"digit radial profile nonincreasing over the first half of bins",
    )


def test_criterion_09_training_smoke(digit_zero_images):
    start = time.time()
    sched = cosine_schedule(100)
    config = TrainConfig(iterations=2000, batch_size=8, learning_rate=0.05,
                         seed=5, hidden=12)
    denoiser, history, stats = train_loop(config, digit_zero_images, sched)
    elapsed = time.time() - start

    losses = [loss for _, loss in history]
    first = float(np.mean(losses[:100]))
    last = float(np.mean(losses[-100:]))

    probe = digit_zero_images[0]
    grad_err = gradient_check(denoiser, probe, t=40, stats=stats,
                              n_steps=100, n_params=120, seed=9)
    reference = json.load(open(Path(__file__).parent / "data"
                               / "reference_smoke.json"))
    report(
        9,
        last <= 0.5 * first and grad_err < 1e-4 and elapsed < 600,
        f"training smoke on {len(digit_zero_images)} digit-0 images, 2000 "
        f"iterations in {elapsed:.0f}s (< 600s): mean loss "
        f"{first:.5f} -> {last:.5f} (ratio {last / first:.3f} <= 0.5, "
        f"reference run {reference['ratio']:.3f}); gradient check "
        f"{grad_err:.1e} < 1e-4",
    )


def test_criterion_10_comparative_sampling(digits, digit_zero_images):
    budget = dict(n_steps=100, iterations=300, batch_size=8,
                  learning_rate=0.05, hidden=12, seed=5)
    ours = SpectralDiffusionModel(**budget).fit(digit_zero_images)
    baseline = DdpmBaselineModel(**budget).fit(digit_zero_images)

    n_samples = 32
    sample_steps = 40
    ours_images = ours.sample(n_samples, seed=21, n_steps=sample_steps)
    base_images = baseline.sample(n_samples, seed=21, n_steps=sample_steps)
    d_ours = spectral_moment_distance(ours_images, ours.stats_)
    d_base = spectral_moment_distance(base_images, ours.stats_)
    unconditional_ok = d_ours < d_base

    # Class-conditional generation with one globally trained model: samples
    # drawn from class statistics must be closest to their own class for at
    # least 8 of the 10 digits.  Short chains keep the samples near the
    # stationary class law, which is the conditioning mechanism under test.
    X = digits.images.astype(np.float64)
    y = digits.labels
    conditional = SpectralDiffusionModel(
        n_steps=100, iterations=800, batch_size=8, learning_rate=0.05,
        hidden=12, seed=5,
    ).fit(X, y)
    class_stats = conditional.class_stats_
    wins = 0
    for label in range(10):
        generated = conditional.sample(64, label=label, seed=31, n_steps=5)
        distances = {
            other: spectral_moment_distance(generated, class_stats[other])
            for other in range(10)
        }
        if min(distances, key=distances.get) == label:
            wins += 1
    report(
        10,
        unconditional_ok and wins >= 8,
        f"equal-budget sampling: feature-preserving distance {d_ours:.3f} < "
        f"baseline {d_base:.3f}; conditional samples closest to their own "
        f"class for {wins}/10 digits (>= 8)",
    )


def test_criterion_11_drift_analysis():
    sched = cosine_schedule(500)
    curve = drift_multiplier_curve(sched, mean_drift_weights(sched))
    telescoping_gap = float(np.max(np.abs(
        curve - (1.0 - np.sqrt(sched.alpha_bar[1:]))
    )))

    long_sched = schedule_from_alphas(np.full(10_000, 0.99))
    long_curve = drift_multiplier_curve(
        long_sched, geometric_drift_weights(0.9, 10_000)
    )
    bounded = bool(np.all(np.isfinite(long_curve)))
    sup = float(np.max(np.abs(long_curve)))
    increments = np.abs(np.diff(long_curve))
    tail = increments[5000:]
    nonzero = tail[tail > 0]
    shrinking = bool(len(nonzero) < 2
                     or np.max(nonzero[1:] / nonzero[:-1]) < 1.0)
    report(
        11,
        telescoping_gap <= 1e-12 and bounded and shrinking,
        f"native weights telescope to 1-sqrt(abar): gap "
        f"{telescoping_gap:.1e} <= 1e-12; geometric weights (ratio 0.9) stay "
        f"bounded over 1e4 steps (sup {sup:.2f}) with geometrically "
        f"shrinking increments",
    )
