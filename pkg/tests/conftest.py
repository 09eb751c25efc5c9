"""Shared fixtures: direct-summation transform oracles and a handwritten
digits dataset rendered at MNIST geometry (28x28 strokes on a 32x32
canvas).

Real MNIST IDX files are preferred when present (data/mnist next to the
repo root or $SPECTRALDIFF_MNIST_DIR); otherwise the scikit-learn bundled
handwritten digits are bilinearly upsampled onto the same geometry and
written through the package's own IDX codec, so the whole pipeline under
test is identical either way.
"""

import os
from pathlib import Path

import numpy as np
import pytest

from spectraldiff.dataio import load_idx, write_idx_images, write_idx_labels


def direct_spectral(x):
    """O(N^4) direct-summation packed transform: the independent oracle.

    Literal cosine/sine sums with 1/(N1*N2) normalization, packed by the
    documented index table with explicit loops.  Deliberately shares no
    code with the FFT implementation.
    """
    n1, n2 = x.shape
    cos_part = np.zeros((n1, n2))
    sin_part = np.zeros((n1, n2))
    for i1 in range(n1):
        k1 = i1 if i1 <= n1 // 2 else i1 - n1
        for i2 in range(n2):
            k2 = i2 if i2 <= n2 // 2 else i2 - n2
            acc_cos = 0.0
            acc_sin = 0.0
            for m1 in range(n1):
                for m2 in range(n2):
                    angle = 2 * np.pi * (m1 * k1 / n1 + m2 * k2 / n2)
                    acc_cos += x[m1, m2] * np.cos(angle)
                    acc_sin += x[m1, m2] * np.sin(angle)
            cos_part[i1, i2] = acc_cos / (n1 * n2)
            sin_part[i1, i2] = acc_sin / (n1 * n2)

    packed = np.zeros((n1, n2))
    for i1 in range(n1):
        for i2 in range(n2):
            if i2 in (0, n2 // 2):
                if i1 <= n1 // 2:
                    packed[i1, i2] = cos_part[i1, i2]
                else:
                    packed[i1, i2] = sin_part[n1 - i1, i2]
            elif i2 < n2 // 2:
                packed[i1, i2] = cos_part[i1, i2]
            else:
                packed[i1, i2] = sin_part[i1, n2 - i2]
    return packed


def direct_inverse(packed):
    """O(N^4) inverse of the packed transform via the full synthesis sum."""
    n1, n2 = packed.shape
    # Unpack to full complex spectrum first (explicit, loop-based).
    full = np.zeros((n1, n2), dtype=complex)
    for i1 in range(n1):
        for i2 in range(n2):
            if i2 in (0, n2 // 2):
                if i1 in (0, n1 // 2):
                    full[i1, i2] = packed[i1, i2]
                elif i1 < n1 // 2:
                    full[i1, i2] = packed[i1, i2] - 1j * packed[n1 - i1, i2]
                else:
                    full[i1, i2] = packed[n1 - i1, i2] + 1j * packed[i1, i2]
            elif i2 < n2 // 2:
                re = packed[i1, i2]
                im = packed[i1, n2 - i2]
                full[i1, i2] = re - 1j * im
            else:
                re = packed[(n1 - i1) % n1, n2 - i2]
                im = packed[(n1 - i1) % n1, i2]
                full[i1, i2] = re + 1j * im
    x = np.zeros((n1, n2))
    for m1 in range(n1):
        for m2 in range(n2):
            acc = 0.0 + 0.0j
            for i1 in range(n1):
                k1 = i1 if i1 <= n1 // 2 else i1 - n1
                for i2 in range(n2):
                    k2 = i2 if i2 <= n2 // 2 else i2 - n2
                    angle = 2 * np.pi * (m1 * k1 / n1 + m2 * k2 / n2)
                    acc += full[i1, i2] * np.exp(1j * angle)
            x[m1, m2] = acc.real
    return x


@pytest.fixture(scope="session")
def dft_oracle():
    return direct_spectral


@pytest.fixture(scope="session")
def dft_inverse_oracle():
    return direct_inverse


def random_alphas(rng, n_steps, low=0.5, high=0.99999):
    return rng.uniform(low, high, size=n_steps)


@pytest.fixture
def make_alphas():
    return random_alphas


# ------------------------------------------------------------ digits data

CANVAS = 32
STROKE = 28


def _bilinear_resize(img, out_h, out_w):
    h, w = img.shape
    y = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    x = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    y0 = np.clip(np.floor(y).astype(int), 0, h - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x0 = np.clip(np.floor(x).astype(int), 0, w - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(y - y0, 0, 1)[:, None]
    wx = np.clip(x - x0, 0, 1)[None, :]
    return (img[np.ix_(y0, x0)] * (1 - wy) * (1 - wx)
            + img[np.ix_(y0, x1)] * (1 - wy) * wx
            + img[np.ix_(y1, x0)] * wy * (1 - wx)
            + img[np.ix_(y1, x1)] * wy * wx)


def _find_real_mnist():
    candidates = []
    env = os.environ.get("SPECTRALDIFF_MNIST_DIR")
    if env:
        candidates.append(Path(env))
    candidates.append(Path(__file__).resolve().parent.parent / "data" / "mnist")
    for root in candidates:
        images = root / "train-images-idx3-ubyte"
        labels = root / "train-labels-idx1-ubyte"
        if images.exists() and labels.exists():
            return images, labels
    return None


@pytest.fixture(scope="session")
def digits_idx_paths(tmp_path_factory):
    """(images_path, labels_path) of the handwritten-digits IDX archives."""
    real = _find_real_mnist()
    if real is not None:
        return real

    from sklearn.datasets import load_digits

    raw = load_digits()
    rendered = np.zeros((len(raw.images), CANVAS, CANVAS))
    offset = (CANVAS - STROKE) // 2
    for i, img in enumerate(raw.images):
        rendered[i, offset:offset + STROKE, offset:offset + STROKE] = \
            _bilinear_resize(img / 16.0, STROKE, STROKE)
    quantized = np.clip(np.rint(rendered * 255.0), 0, 255).astype(np.uint8)

    root = tmp_path_factory.mktemp("digits-idx")
    images_path = root / "train-images-idx3-ubyte"
    labels_path = root / "train-labels-idx1-ubyte"
    write_idx_images(images_path, quantized)
    write_idx_labels(labels_path, raw.target.astype(np.uint8))
    return images_path, labels_path


@pytest.fixture(scope="session")
def digits(digits_idx_paths):
    """Digits dataset handle, padded to a 32x32 even canvas."""
    images_path, labels_path = digits_idx_paths
    return load_idx(images_path, labels_path=labels_path, pad_to=CANVAS)


@pytest.fixture(scope="session")
def digit_zero_images(digits):
    """512 digit-0 images (resampled with replacement when the class is
    smaller), as float64 (n, 1, 32, 32)."""
    mask = digits.labels == 0
    pool = digits.images[mask].astype(np.float64)
    rng = np.random.default_rng(2024)
    picks = rng.integers(0, len(pool), size=512)
    return pool[picks]
