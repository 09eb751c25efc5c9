"""Frequency-weighted training loss, a small trainable denoiser with manual
backpropagation, and the deterministic training loop.

The loss lives in spectral space: squared component errors are divided by
the floored class variance, so low-variance (mostly high-frequency)
components are not drowned out by the energetic low frequencies,

    L = mean_k (pred_k - target_k)^2 / max(var_k, floor).

Gradients flow back to pixel space through the exact adjoint of the packed
spectral transform.  The optimizer is plain SGD with a fixed learning rate;
every stochastic choice in the loop is drawn from a per-iteration named
stream, so runs are bit-reproducible and resumable.
"""

import json
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ._validation import as_float_field, check_same_shape
from .diffusion import ddpm_forward_closed, forward_closed
from .rng import make_rng
from .spectral import energy_weights, to_pixel, to_spectral
from .stats import ClassStats

__all__ = [
    "VARIANCE_FLOOR",
    "weighted_loss",
    "weighted_loss_and_grad",
    "spectral_adjoint",
    "TinyDenoiser",
    "TrainConfig",
    "train_step",
    "ddpm_train_step",
    "train_loop",
    "gradient_check",
    "save_checkpoint",
    "load_checkpoint",
    "save_loss_csv",
    "load_loss_csv",
]

VARIANCE_FLOOR = 1e-3
CHECKPOINT_MAGIC = "spectraldiff-checkpoint-v1"


def weighted_loss(pred_spec, target_spec, stats, floor=VARIANCE_FLOOR):
    """Variance-weighted mean squared error between spectral fields."""
    if floor <= 0:
        raise ValueError("floor must be positive")
    pred = as_float_field(pred_spec, name="prediction")
    target = as_float_field(target_spec, name="target")
    check_same_shape(pred, target, "prediction", "target")
    check_same_shape(pred, stats.var, "prediction", "stats var")
    weights = np.maximum(stats.var, floor)
    diff = pred - target
    return float(np.mean(diff * diff / weights))


def weighted_loss_and_grad(pred_spec, target_spec, stats, floor=VARIANCE_FLOOR):
    """Loss plus its gradient with respect to the spectral prediction."""
    if floor <= 0:
        raise ValueError("floor must be positive")
    pred = as_float_field(pred_spec, name="prediction")
    target = as_float_field(target_spec, name="target")
    check_same_shape(pred, target, "prediction", "target")
    check_same_shape(pred, stats.var, "prediction", "stats var")
    weights = np.maximum(stats.var, floor)
    diff = pred - target
    loss = float(np.mean(diff * diff / weights))
    grad = 2.0 * diff / (weights * diff.size)
    return loss, grad


def spectral_adjoint(grad_spec):
    """Adjoint (transpose) of :func:`to_spectral` applied to a gradient.

    The transform rows are orthogonal with squared norms 1/(2*N1*N2) on
    paired slots and 1/(N1*N2) on the four self-conjugate slots, so the
    adjoint is the inverse transform applied to the per-slot-rescaled
    gradient.
    """
    grad_spec = np.asarray(grad_spec, dtype=np.float64)
    n1, n2 = grad_spec.shape[-2], grad_spec.shape[-1]
    scale = 1.0 / (n1 * n2 * energy_weights(grad_spec.shape))
    return to_pixel(grad_spec * scale)


def _conv_cols(x, pad=1):
    """im2col for a 3x3 kernel with zero padding: (C, H, W) -> (C*9, H*W)."""
    c, h, w = x.shape
    padded = np.zeros((c, h + 2 * pad, w + 2 * pad))
    padded[:, pad:pad + h, pad:pad + w] = x
    cols = np.empty((c, 9, h * w))
    for idx, (dy, dx) in enumerate((dy, dx) for dy in range(3) for dx in range(3)):
        cols[:, idx, :] = padded[:, dy:dy + h, dx:dx + w].reshape(c, -1)
    return cols.reshape(c * 9, h * w)


def _conv_cols_backward(dcols, shape, pad=1):
    """Scatter column gradients back to the (C, H, W) input."""
    c, h, w = shape
    dpadded = np.zeros((c, h + 2 * pad, w + 2 * pad))
    dcols = dcols.reshape(c, 9, h, w)
    for idx, (dy, dx) in enumerate((dy, dx) for dy in range(3) for dx in range(3)):
        dpadded[:, dy:dy + h, dx:dx + w] += dcols[:, idx]
    return dpadded[:, pad:-pad, pad:-pad]


class TinyDenoiser:
    """Three-stage residual convolutional denoiser with manual backprop.

    Layout: 3x3 conv (C -> F) + time shift + tanh, 3x3 conv (F -> F) +
    time shift + tanh, 3x3 conv (F -> C), residual added to the input.  The
    time shift projects sinusoidal features of t/T (``time_features``
    frequencies, sin and cos) to a per-channel bias.  Called as
    ``denoiser(image, t, n_steps)`` it predicts the clean image.

    ``activation="linear"`` disables the nonlinearities (used to validate
    gradients, which are then exact).
    """

    def __init__(self, channels=1, hidden=16, time_features=8,
                 activation="tanh", seed=0, init_scale=0.5):
        if activation not in ("tanh", "linear"):
            raise ValueError(f"unknown activation {activation!r}")
        self.channels = channels
        self.hidden = hidden
        self.time_features = time_features
        self.activation = activation
        self.init_scale = init_scale
        self.seed = seed
        rng = make_rng(seed, "denoiser-init")
        f, c, tf2 = hidden, channels, 2 * time_features
        self._params = {
            "w1": rng.standard_normal((f, c * 9)) * (init_scale / np.sqrt(c * 9)),
            "b1": np.zeros(f),
            "p1": rng.standard_normal((f, tf2)) * init_scale,
            "w2": rng.standard_normal((f, f * 9)) * (init_scale / np.sqrt(f * 9)),
            "b2": np.zeros(f),
            "p2": rng.standard_normal((f, tf2)) * init_scale,
            "w3": rng.standard_normal((c, f * 9)) * (init_scale / np.sqrt(f * 9)),
            "b3": np.zeros(c),
        }
        self._order = ["w1", "b1", "p1", "w2", "b2", "p2", "w3", "b3"]

    # -- parameter-vector interface -------------------------------------
    @property
    def n_parameters(self):
        return sum(self._params[k].size for k in self._order)

    def parameter_vector(self):
        return np.concatenate([self._params[k].ravel() for k in self._order])

    def load_parameter_vector(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.n_parameters:
            raise ValueError(
                f"expected {self.n_parameters} parameters, got {vec.size}"
            )
        offset = 0
        for key in self._order:
            size = self._params[key].size
            self._params[key] = vec[offset:offset + size].reshape(
                self._params[key].shape
            ).copy()
            offset += size

    def architecture(self):
        return {
            "channels": self.channels,
            "hidden": self.hidden,
            "time_features": self.time_features,
            "activation": self.activation,
        }

    # -- forward / backward ----------------------------------------------
    def _time_vec(self, t, n_steps):
        tau = t / max(n_steps, 1)
        freqs = np.pi * (2.0 ** np.arange(self.time_features))
        return np.concatenate([np.sin(freqs * tau), np.cos(freqs * tau)])

    def _nonlin(self, z):
        return np.tanh(z) if self.activation == "tanh" else z

    def _nonlin_grad(self, activated):
        if self.activation == "tanh":
            return 1.0 - activated * activated
        return np.ones_like(activated)

    def forward(self, x, t, n_steps):
        """Predict the clean image; returns (prediction, cache)."""
        x = as_float_field(x, name="denoiser input")
        if x.ndim == 2:
            raise ValueError("denoiser input must be (C, H, W)")
        if x.shape[0] != self.channels:
            raise ValueError(
                f"denoiser built for {self.channels} channels, got {x.shape[0]}"
            )
        p = self._params
        c, h, w = x.shape
        tvec = self._time_vec(t, n_steps)

        cols1 = _conv_cols(x)
        z1 = (p["w1"] @ cols1 + p["b1"][:, None]
              + (p["p1"] @ tvec)[:, None]).reshape(self.hidden, h, w)
        a1 = self._nonlin(z1)

        cols2 = _conv_cols(a1)
        z2 = (p["w2"] @ cols2 + p["b2"][:, None]
              + (p["p2"] @ tvec)[:, None]).reshape(self.hidden, h, w)
        a2 = self._nonlin(z2)

        cols3 = _conv_cols(a2)
        z3 = (p["w3"] @ cols3 + p["b3"][:, None]).reshape(c, h, w)
        out = x + z3
        cache = (x.shape, tvec, cols1, a1, cols2, a2, cols3)
        return out, cache

    def __call__(self, x, t, n_steps):
        out, _ = self.forward(x, t, n_steps)
        return out

    def backward(self, cache, grad_out):
        """Parameter gradients given d(loss)/d(prediction); returns a dict
        keyed like the parameters."""
        shape, tvec, cols1, a1, cols2, a2, cols3 = cache
        p = self._params
        c, h, w = shape
        g3 = np.asarray(grad_out, dtype=np.float64).reshape(c, h * w)

        grads = {}
        grads["w3"] = g3 @ cols3.T
        grads["b3"] = g3.sum(axis=1)
        da2 = (p["w3"].T @ g3)
        dz2 = (_conv_cols_backward(da2, a2.shape).reshape(self.hidden, h * w)
               * self._nonlin_grad(a2).reshape(self.hidden, h * w))

        grads["w2"] = dz2 @ cols2.T
        grads["b2"] = dz2.sum(axis=1)
        grads["p2"] = np.outer(dz2.sum(axis=1), tvec)
        da1 = p["w2"].T @ dz2
        dz1 = (_conv_cols_backward(da1, a1.shape).reshape(self.hidden, h * w)
               * self._nonlin_grad(a1).reshape(self.hidden, h * w))

        grads["w1"] = dz1 @ cols1.T
        grads["b1"] = dz1.sum(axis=1)
        grads["p1"] = np.outer(dz1.sum(axis=1), tvec)
        return grads

    def gradient_vector(self, grads):
        return np.concatenate([grads[k].ravel() for k in self._order])

    def apply_gradient(self, grad_vec, learning_rate):
        if learning_rate == 0.0:
            return
        self.load_parameter_vector(
            self.parameter_vector() - learning_rate * grad_vec
        )


def _prediction_gradients(denoiser, image, t, n_steps, target_spec, stats, floor):
    """Loss and parameter-gradient vector for one example."""
    pred, cache = denoiser.forward(image, t, n_steps)
    if not np.all(np.isfinite(pred)):
        raise FloatingPointError(
            f"denoiser produced a non-finite prediction at t={t}; aborting"
        )
    loss, grad_spec = weighted_loss_and_grad(
        to_spectral(pred), target_spec, stats, floor=floor
    )
    grad_pixel = spectral_adjoint(grad_spec)
    return loss, denoiser.gradient_vector(denoiser.backward(cache, grad_pixel))


def _accumulate_spectral_batch(denoiser, batch_spec, stats_for, sched, rng,
                               floor):
    """Mean loss and mean parameter gradient over a batch of clean spectral
    fields; ``stats_for(i)`` supplies the statistics for element i."""
    n_steps = sched.n_steps
    total_loss = 0.0
    total_grad = np.zeros(denoiser.n_parameters)
    for i, xhat0 in enumerate(batch_spec):
        stats = stats_for(i)
        t = int(rng.integers(1, n_steps + 1))
        noisy = forward_closed(xhat0, t, stats, sched, rng).field
        loss, grad = _prediction_gradients(
            denoiser, to_pixel(noisy), t, n_steps, xhat0, stats, floor
        )
        total_loss += loss
        total_grad += grad
    n = len(batch_spec)
    return total_loss / n, total_grad / n


def train_step(denoiser, batch_spec, stats, sched, rng, learning_rate,
               floor=VARIANCE_FLOOR):
    """One training iteration on a batch of clean spectral fields.

    Per element: draw t uniformly from {1..T}, noise with the closed-form
    forward law, predict the clean image in pixel space, evaluate the
    weighted spectral loss and take one SGD step on the mean gradient.
    Returns the pre-update mean loss.
    """
    batch_spec = np.asarray(batch_spec, dtype=np.float64)
    if batch_spec.ndim == 3:
        batch_spec = batch_spec[None]
    loss, grad = _accumulate_spectral_batch(
        denoiser, batch_spec, lambda i: stats, sched, rng, floor
    )
    if not np.isfinite(loss):
        raise FloatingPointError("training loss is non-finite; aborting")
    denoiser.apply_gradient(grad, learning_rate)
    return loss


def ddpm_train_step(denoiser, batch_pixel, sched, rng, learning_rate):
    """Baseline training iteration: pixel-space MSE against the clean image
    under the plain white-noise forward process."""
    batch_pixel = np.asarray(batch_pixel, dtype=np.float64)
    if batch_pixel.ndim == 3:
        batch_pixel = batch_pixel[None]
    n_steps = sched.n_steps
    total_loss = 0.0
    total_grad = np.zeros(denoiser.n_parameters)
    for x0 in batch_pixel:
        t = int(rng.integers(1, n_steps + 1))
        noisy = ddpm_forward_closed(x0, t, sched, rng)
        pred, cache = denoiser.forward(noisy, t, n_steps)
        diff = pred - x0
        total_loss += float(np.mean(diff * diff))
        grad_pixel = 2.0 * diff / diff.size
        total_grad += denoiser.gradient_vector(denoiser.backward(cache, grad_pixel))
    n = len(batch_pixel)
    if not np.isfinite(total_loss):
        raise FloatingPointError("training loss is non-finite; aborting")
    denoiser.apply_gradient(total_grad / n, learning_rate)
    return total_loss / n


@dataclass
class TrainConfig:
    """Configuration of one training run."""

    iterations: int
    batch_size: int = 8
    learning_rate: float = 0.05
    variance_floor: float = VARIANCE_FLOOR
    seed: int = 0
    stats_scope: str = "global"
    hidden: int = 16
    time_features: int = 8
    checkpoint_path: Optional[str] = None
    checkpoint_every: int = 500
    baseline: str = "spectral"

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be nonnegative")
        if self.batch_size < 1 or self.learning_rate < 0:
            raise ValueError("batch_size must be >= 1 and learning_rate >= 0")
        if self.variance_floor <= 0:
            raise ValueError("variance_floor must be positive")
        if self.stats_scope not in ("global", "per-class"):
            raise ValueError(f"unknown stats scope {self.stats_scope!r}")
        if self.baseline not in ("spectral", "ddpm"):
            raise ValueError(f"unknown baseline {self.baseline!r}")


def train_loop(config, images, sched, labels=None, denoiser=None,
               stats=None, start_iteration=0, log=None):
    """Run the training algorithm for ``config.iterations`` steps.

    ``images`` are clean pixel fields (n, C, H, W).  Batch membership,
    timesteps and noise for iteration i are drawn from the named stream
    (seed, "train", i), which makes runs deterministic and resume exactly
    reproducible.  Returns (denoiser, history, stats) where history is a
    list of (iteration, loss) pairs.
    """
    images = as_float_field(images, name="training images")
    if images.ndim == 3:
        images = images[:, None]
    n_images, channels = images.shape[0], images.shape[1]
    if n_images == 0:
        raise ValueError("training dataset is empty")
    if config.stats_scope == "per-class" and labels is None:
        raise ValueError("per-class training requires labels")

    fields = to_spectral(images)
    if stats is None:
        if config.stats_scope == "per-class":
            stats = {}
            for label in sorted(set(np.asarray(labels).tolist())):
                members = fields[np.asarray(labels) == label]
                stats[label] = ClassStats(
                    mu=members.mean(axis=0),
                    var=members.var(axis=0),
                    n=len(members),
                    label=label,
                )
        else:
            stats = ClassStats(
                mu=fields.mean(axis=0), var=fields.var(axis=0), n=n_images
            )

    if denoiser is None:
        denoiser = TinyDenoiser(
            channels=channels, hidden=config.hidden,
            time_features=config.time_features, seed=config.seed,
        )

    history = []
    for iteration in range(start_iteration, config.iterations):
        rng = make_rng(config.seed, "train", iteration)
        picks = rng.integers(0, n_images, size=config.batch_size)
        if config.baseline == "ddpm":
            loss = ddpm_train_step(
                denoiser, images[picks], sched, rng, config.learning_rate
            )
        else:
            if config.stats_scope == "per-class":
                batch_labels = np.asarray(labels)[picks]
                stats_for = lambda i: stats[batch_labels[i]]  # noqa: E731
            else:
                stats_for = lambda i: stats  # noqa: E731
            loss, grad = _accumulate_spectral_batch(
                denoiser, fields[picks], stats_for, sched, rng,
                config.variance_floor,
            )
            if not np.isfinite(loss):
                raise FloatingPointError("training loss is non-finite; aborting")
            denoiser.apply_gradient(grad, config.learning_rate)
        history.append((iteration, loss))
        if log is not None and (iteration + 1) % 100 == 0:
            log(f"iteration {iteration + 1}/{config.iterations} loss {loss:.6f}")
        if (config.checkpoint_path
                and (iteration + 1) % config.checkpoint_every == 0):
            save_checkpoint(config.checkpoint_path, denoiser,
                            iteration=iteration + 1, seed=config.seed)
    if config.checkpoint_path:
        save_checkpoint(config.checkpoint_path, denoiser,
                        iteration=config.iterations, seed=config.seed)
    return denoiser, history, stats


def gradient_check(denoiser, probe, t, stats, n_steps, floor=VARIANCE_FLOOR,
                   n_params=100, step=1e-5, seed=0):
    """Max relative error between analytic and central finite-difference
    gradients of the weighted loss, over randomly selected parameters.

    The probe target is a fixed pseeded draw, so the check is deterministic.
    """
    probe = as_float_field(probe, name="probe")
    rng = make_rng(seed, "gradient-check")
    target = to_spectral(probe) + 0.1 * rng.standard_normal(probe.shape)

    _, analytic = _prediction_gradients(
        denoiser, probe, t, n_steps, target, stats, floor
    )
    theta = denoiser.parameter_vector()
    picks = rng.choice(theta.size, size=min(n_params, theta.size), replace=False)

    def loss_at(vec):
        denoiser.load_parameter_vector(vec)
        pred = denoiser(probe, t, n_steps)
        return weighted_loss(to_spectral(pred), target, stats, floor=floor)

    # Entries much smaller than the gradient's overall scale are compared
    # against that scale, not against themselves, so round-off on a tiny
    # component does not mask an otherwise exact gradient.
    scale = max(float(np.max(np.abs(analytic))), 1e-12)
    worst = 0.0
    for idx in picks:
        plus = theta.copy()
        plus[idx] += step
        minus = theta.copy()
        minus[idx] -= step
        numeric = (loss_at(plus) - loss_at(minus)) / (2 * step)
        denom = max(abs(numeric) + abs(analytic[idx]), scale)
        worst = max(worst, abs(numeric - analytic[idx]) / denom)
    denoiser.load_parameter_vector(theta)
    return worst


def save_checkpoint(path, denoiser, iteration, seed):
    """Write a checkpoint: one JSON header line followed by the parameter
    vector as little-endian float64."""
    header = {
        "format": CHECKPOINT_MAGIC,
        "architecture": denoiser.architecture(),
        "n_parameters": denoiser.n_parameters,
        "iteration": int(iteration),
        "seed": int(seed),
    }
    params = denoiser.parameter_vector()
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(struct.pack(f"<{params.size}d", *params))


def load_checkpoint(path):
    """Read a checkpoint; returns (denoiser, header dict)."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        blob = fh.read()
    header = json.loads(header_line.decode("utf-8"))
    if header.get("format") != CHECKPOINT_MAGIC:
        raise ValueError(f"not a recognized checkpoint: {path}")
    n = header["n_parameters"]
    expected = n * 8
    if len(blob) != expected:
        raise ValueError(
            f"checkpoint parameter block truncated: expected {expected} bytes, "
            f"got {len(blob)}"
        )
    params = np.asarray(struct.unpack(f"<{n}d", blob))
    arch = header["architecture"]
    denoiser = TinyDenoiser(
        channels=arch["channels"], hidden=arch["hidden"],
        time_features=arch["time_features"], activation=arch["activation"],
        seed=header["seed"],
    )
    denoiser.load_parameter_vector(params)
    return denoiser, header


def save_loss_csv(path, history):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("iteration,loss\n")
        for iteration, loss in history:
            fh.write(f"{iteration},{loss!r}\n")


def load_loss_csv(path):
    history = []
    with open(path, "r", encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            iteration, loss = line.strip().split(",")
            history.append((int(iteration), float(loss)))
    return history
