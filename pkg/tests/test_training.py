"""Weighted loss, gradient correctness, determinism, checkpointing and the
training loop."""

import numpy as np
import pytest

from spectraldiff.rng import make_rng
from spectraldiff.schedule import cosine_schedule
from spectraldiff.spectral import to_pixel, to_spectral
from spectraldiff.stats import ClassStats
from spectraldiff.training import (
    TinyDenoiser,
    TrainConfig,
    gradient_check,
    load_checkpoint,
    load_loss_csv,
    save_checkpoint,
    save_loss_csv,
    spectral_adjoint,
    train_loop,
    train_step,
    weighted_loss,
    weighted_loss_and_grad,
)


def flat_stats(shape, var=0.5):
    return ClassStats(mu=np.zeros(shape), var=np.full(shape, var), n=4)


class TestWeightedLoss:
    def test_perfect_prediction_is_zero(self):
        stats = flat_stats((1, 4, 4))
        x = make_rng(0, "x").normal(size=(1, 4, 4))
        assert weighted_loss(x, x, stats) == 0.0

    def test_worked_two_component_example(self):
        stats = ClassStats(mu=np.zeros(2), var=np.array([1.0, 1e-6]), n=3)
        loss = weighted_loss(np.array([0.1, 0.2]), np.zeros(2), stats,
                             floor=1e-3)
        assert loss == pytest.approx(20.005, abs=1e-12)

    def test_homogeneity_in_variance_scale(self):
        rng = make_rng(1, "x")
        pred = rng.normal(size=(8,))
        target = rng.normal(size=(8,))
        var = rng.uniform(0.01, 2.0, size=8)
        base = weighted_loss(pred, target,
                             ClassStats(mu=np.zeros(8), var=var, n=2),
                             floor=1e-3)
        c = 7.0
        scaled = weighted_loss(pred, target,
                               ClassStats(mu=np.zeros(8), var=c * var, n=2),
                               floor=c * 1e-3)
        assert scaled == pytest.approx(base / c, rel=1e-12)

    def test_floor_monotonicity(self):
        rng = make_rng(2, "x")
        pred = rng.normal(size=(8,))
        target = rng.normal(size=(8,))
        stats = ClassStats(mu=np.zeros(8),
                           var=rng.uniform(0.0, 0.01, size=8), n=2)
        losses = [weighted_loss(pred, target, stats, floor=f)
                  for f in (1e-1, 1e-2, 1e-3, 1e-4)]
        assert all(a <= b for a, b in zip(losses, losses[1:]))

    def test_zero_only_for_exact_match(self):
        stats = flat_stats((4,), var=0.0)
        pred = np.array([0.0, 0.0, 1e-9, 0.0])
        assert weighted_loss(pred, np.zeros(4), stats) > 0.0

    def test_gradient_matches_finite_difference(self):
        rng = make_rng(3, "x")
        pred = rng.normal(size=(1, 4, 4))
        target = rng.normal(size=(1, 4, 4))
        stats = ClassStats(mu=np.zeros((1, 4, 4)),
                           var=rng.uniform(0, 1, size=(1, 4, 4)), n=2)
        loss, grad = weighted_loss_and_grad(pred, target, stats)
        h = 1e-6
        for idx in [(0, 0, 0), (0, 2, 3), (0, 3, 1)]:
            bumped = pred.copy()
            bumped[idx] += h
            numeric = (weighted_loss(bumped, target, stats) - loss) / h
            assert numeric == pytest.approx(grad[idx], rel=1e-4)

    def test_invalid_floor_rejected(self):
        stats = flat_stats((2,))
        with pytest.raises(ValueError):
            weighted_loss(np.zeros(2), np.zeros(2), stats, floor=0.0)


class TestSpectralAdjoint:
    def test_adjoint_identity(self):
        # <A x, y> == <x, A^T y> for the packed transform.
        rng = make_rng(4, "x")
        for shape in [(1, 4, 4), (3, 8, 8), (1, 6, 8)]:
            x = rng.normal(size=shape)
            y = rng.normal(size=shape)
            lhs = float(np.sum(to_spectral(x) * y))
            rhs = float(np.sum(x * spectral_adjoint(y)))
            assert lhs == pytest.approx(rhs, abs=1e-12)


class TestGradientCheck:
    def test_linear_network_gradients_exact(self):
        denoiser = TinyDenoiser(channels=1, hidden=6, activation="linear",
                                seed=5)
        probe = make_rng(6, "p").uniform(size=(1, 8, 8))
        err = gradient_check(denoiser, probe, 4, flat_stats((1, 8, 8)), 8,
                             n_params=120, seed=7)
        assert err < 1e-7

    def test_full_network_gradients(self):
        denoiser = TinyDenoiser(channels=1, hidden=8, seed=8)
        probe = make_rng(9, "p").uniform(size=(1, 8, 8))
        err = gradient_check(denoiser, probe, 3, flat_stats((1, 8, 8)), 8,
                             n_params=150, seed=10)
        assert err < 1e-4

    def test_zero_learning_rate_leaves_parameters(self):
        denoiser = TinyDenoiser(channels=1, hidden=4, seed=11)
        before = denoiser.parameter_vector()
        stats = flat_stats((1, 4, 4))
        sched = cosine_schedule(6)
        batch = to_spectral(make_rng(12, "b").uniform(size=(2, 1, 4, 4)))
        train_step(denoiser, batch, stats, sched, make_rng(13, "t"),
                   learning_rate=0.0)
        assert np.array_equal(denoiser.parameter_vector(), before)


class _MeanPredictor:
    """Contract-only denoiser: always answers one fixed image."""

    def __init__(self, image):
        self.image = image
        self.n_parameters = 0

    def forward(self, x, t, n_steps):
        return self.image, None

    def __call__(self, x, t, n_steps):
        return self.image

    def backward(self, cache, grad_out):
        return {}

    def gradient_vector(self, grads):
        return np.zeros(0)

    def apply_gradient(self, grad, learning_rate):
        pass


class TestTrainStep:
    def test_mean_predictor_on_mean_dataset_gives_zero_loss(self):
        shape = (1, 8, 8)
        mu_spec = make_rng(14, "m").uniform(size=shape)
        var = np.zeros(shape)
        stats = ClassStats(mu=mu_spec, var=var, n=4)
        sched = cosine_schedule(5)
        denoiser = _MeanPredictor(to_pixel(mu_spec))
        loss = train_step(denoiser, mu_spec[None], stats, sched,
                          make_rng(15, "t"), learning_rate=0.1)
        assert loss == pytest.approx(0.0, abs=1e-20)

    def test_fixed_seed_reproduces_loss_sequence(self):
        rng = make_rng(16, "d")
        images = rng.uniform(size=(4, 1, 8, 8))
        sched = cosine_schedule(8)
        config = TrainConfig(iterations=6, batch_size=2, learning_rate=0.05,
                             seed=99)
        _, first, _ = train_loop(config, images, sched)
        _, second, _ = train_loop(config, images, sched)
        assert first == second  # bit-identical losses

    def test_toy_set_loss_halves(self):
        # Two structurally distinct images, 200 steps: loss drops below
        # half of the initial 10-step average (threshold calibrated on the
        # recorded reference run: ratio ~0.32 at this configuration).
        a = np.zeros((1, 8, 8))
        a[0, 2:4, 2:4] = 0.9
        b = np.zeros((1, 8, 8))
        b[0, 4:6, 4:6] = 0.7
        images = np.stack([a, b])
        sched = cosine_schedule(10)
        config = TrainConfig(iterations=200, batch_size=2,
                             learning_rate=0.001, seed=5, hidden=8)
        _, history, _ = train_loop(config, images, sched)
        losses = [loss for _, loss in history]
        early = np.mean(losses[:10])
        late = np.mean(losses[-10:])
        assert late < 0.5 * early

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_loss_aborts(self):
        # An output-layer weight near the float ceiling keeps the prediction
        # finite but overflows the squared error, so the loss itself goes
        # non-finite.
        denoiser = TinyDenoiser(channels=1, hidden=4, seed=18)
        bad = denoiser.parameter_vector()
        out_weights = 1 * 4 * 9 + 1  # w3 block plus b3 at the tail
        bad[-out_weights:-1] = 1e160
        denoiser.load_parameter_vector(bad)
        stats = flat_stats((1, 4, 4))
        sched = cosine_schedule(4)
        batch = to_spectral(make_rng(19, "b").uniform(size=(1, 1, 4, 4)))
        with pytest.raises(FloatingPointError):
            train_step(denoiser, batch, stats, sched, make_rng(20, "t"),
                       learning_rate=0.1)


class TestTrainLoop:
    def test_zero_iterations_returns_initial_denoiser(self):
        images = make_rng(21, "d").uniform(size=(3, 1, 4, 4))
        sched = cosine_schedule(4)
        config = TrainConfig(iterations=0, seed=7)
        denoiser, history, stats = train_loop(config, images, sched)
        assert history == []
        fresh = TinyDenoiser(channels=1, hidden=config.hidden,
                             time_features=config.time_features, seed=7)
        assert np.array_equal(denoiser.parameter_vector(),
                              fresh.parameter_vector())
        assert stats.n == 3

    def test_empty_dataset_rejected(self):
        sched = cosine_schedule(4)
        with pytest.raises(ValueError, match="empty"):
            train_loop(TrainConfig(iterations=1), np.zeros((0, 1, 4, 4)), sched)

    def test_per_class_requires_labels(self):
        sched = cosine_schedule(4)
        images = np.zeros((2, 1, 4, 4))
        config = TrainConfig(iterations=1, stats_scope="per-class")
        with pytest.raises(ValueError, match="labels"):
            train_loop(config, images, sched)

    def test_per_class_training_runs(self):
        rng = make_rng(22, "d")
        images = rng.uniform(size=(6, 1, 4, 4))
        labels = np.array([0, 0, 0, 1, 1, 1])
        sched = cosine_schedule(4)
        config = TrainConfig(iterations=3, batch_size=4,
                             stats_scope="per-class", seed=3, hidden=4)
        denoiser, history, stats = train_loop(config, images, sched,
                                              labels=labels)
        assert set(stats) == {0, 1}
        assert len(history) == 3

    def test_resume_reproduces_full_run(self, tmp_path):
        rng = make_rng(23, "d")
        images = rng.uniform(size=(4, 1, 4, 4))
        sched = cosine_schedule(6)
        full_cfg = TrainConfig(iterations=10, batch_size=2, seed=31, hidden=4)
        full, full_hist, _ = train_loop(full_cfg, images, sched)

        ckpt = tmp_path / "mid.ckpt"
        half_cfg = TrainConfig(iterations=5, batch_size=2, seed=31, hidden=4)
        half, half_hist, _ = train_loop(half_cfg, images, sched)
        save_checkpoint(ckpt, half, iteration=5, seed=31)

        resumed, header = load_checkpoint(ckpt)
        resume_cfg = TrainConfig(iterations=10, batch_size=2, seed=31, hidden=4)
        resumed, tail_hist, _ = train_loop(
            resume_cfg, images, sched, denoiser=resumed,
            start_iteration=header["iteration"],
        )
        assert half_hist + tail_hist == full_hist
        assert np.array_equal(resumed.parameter_vector(),
                              full.parameter_vector())


class TestCheckpointAndHistory:
    def test_checkpoint_round_trip_bitwise(self, tmp_path):
        denoiser = TinyDenoiser(channels=1, hidden=5, seed=41)
        path = tmp_path / "d.ckpt"
        save_checkpoint(path, denoiser, iteration=17, seed=41)
        loaded, header = load_checkpoint(path)
        assert header["iteration"] == 17
        assert header["architecture"]["hidden"] == 5
        assert np.array_equal(loaded.parameter_vector(),
                              denoiser.parameter_vector())

    def test_truncated_checkpoint_detected(self, tmp_path):
        denoiser = TinyDenoiser(channels=1, hidden=4, seed=1)
        path = tmp_path / "d.ckpt"
        save_checkpoint(path, denoiser, iteration=1, seed=1)
        data = path.read_bytes()
        path.write_bytes(data[:-16])
        with pytest.raises(ValueError, match="truncated"):
            load_checkpoint(path)

    def test_loss_csv_round_trip(self, tmp_path):
        history = [(0, 1.5), (1, 0.25), (2, 0.125)]
        path = tmp_path / "loss.csv"
        save_loss_csv(path, history)
        assert load_loss_csv(path) == history

    def test_parameter_count_within_budget(self):
        denoiser = TinyDenoiser(channels=3, hidden=16)
        assert denoiser.n_parameters <= 100_000
