"""Bidirectional mapping between pixel space and a real-packed Fourier space.

The forward transform applies the 2-D DFT with 1/(N1*N2) normalization and
stores the result as a real array of the same shape as the input, exploiting
the conjugate symmetry of real signals.  Writing the transform of a real
grid as

    X(k1, k2) = R(k1, k2) - i * I(k1, k2)

where R is the cosine sum and I the sine sum, the packed layout on the
standard DFT index grid (index i maps to frequency k = i for i <= N/2,
k = i - N otherwise) is:

==============================  =======================================
slot (k1, k2)                   stored value
==============================  =======================================
0 < k2 < N2/2, any k1           R(k1, k2)
k2 < 0, any k1                  I(k1, -k2)
k2 in {0, N2/2}, k1 >= 0        R(k1, k2)
k2 in {0, N2/2}, k1 < 0         I(-k1, k2)
==============================  =======================================

The four points (0,0), (N1/2,0), (0,N2/2), (N1/2,N2/2) are their own
conjugates and purely real; they fall under the "k1 >= 0" rule and store
their real value directly.  The layout is a count-exact bijection between
real N1 x N2 grids and real N1 x N2 coefficient arrays; both grid sides
must be even.
"""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_grid

__all__ = [
    "to_spectral",
    "to_pixel",
    "energy_weights",
    "packed_energy",
    "squared_magnitude",
    "wavenumber_radius",
    "RadialProfile",
    "radial_profile",
    "radial_profile_from_magnitude",
    "SpectralTransform",
]


def to_spectral(img):
    """Transform pixel fields to packed real spectral coefficients.

    Accepts any (..., H, W) stack of real fields with even H and W;
    channels and batch entries are transformed independently.
    """
    img = check_grid(img, name="image")
    n1, n2 = img.shape[-2], img.shape[-1]
    half = n2 // 2
    spec = np.fft.rfft2(img, axes=(-2, -1)) / (n1 * n2)
    cos_part = spec.real
    sin_part = -spec.imag

    out = np.empty(img.shape, dtype=np.float64)
    out[..., :, 1:half] = cos_part[..., :, 1:half]
    out[..., :, half + 1:] = sin_part[..., :, 1:half][..., ::-1]
    for j in (0, half):
        out[..., : n1 // 2 + 1, j] = cos_part[..., : n1 // 2 + 1, j]
        out[..., n1 // 2 + 1:, j] = sin_part[..., 1: n1 // 2, j][..., ::-1]
    return out


def to_pixel(spec):
    """Invert :func:`to_spectral` exactly up to floating-point error."""
    spec = check_grid(spec, name="spectral field")
    n1, n2 = spec.shape[-2], spec.shape[-1]
    half = n2 // 2

    full = np.empty(spec.shape, dtype=np.complex128)
    cos_part = spec[..., :, 1:half]
    sin_part = spec[..., :, half + 1:][..., ::-1]
    full[..., :, 1:half] = cos_part - 1j * sin_part
    # Columns with k2 < 0 are conjugates of the row-mirrored positive half.
    row_mirror = (n1 - np.arange(n1)) % n1
    full[..., :, half + 1:] = np.conj(
        full[..., row_mirror, 1:half][..., ::-1]
    )
    for j in (0, half):
        col = np.zeros(spec.shape[:-2] + (n1,), dtype=np.complex128)
        col[..., 0] = spec[..., 0, j]
        col[..., n1 // 2] = spec[..., n1 // 2, j]
        upper = spec[..., 1: n1 // 2, j]
        lower = spec[..., n1 // 2 + 1:, j][..., ::-1]
        col[..., 1: n1 // 2] = upper - 1j * lower
        col[..., n1 // 2 + 1:] = np.conj(col[..., 1: n1 // 2][..., ::-1])
        full[..., :, j] = col

    img = np.fft.ifft2(full, axes=(-2, -1)) * (n1 * n2)
    return np.ascontiguousarray(img.real)


def energy_weights(shape):
    """Multiplicity of each packed slot in the full spectrum.

    Paired slots represent a conjugate frequency pair (weight 2); the four
    self-conjugate points appear once (weight 1).  With these weights
    Parseval's identity reads  sum(x**2) == N1*N2 * sum(w * s**2).
    """
    n1, n2 = shape[-2], shape[-1]
    w = np.full((n1, n2), 2.0)
    for i1 in (0, n1 // 2):
        for i2 in (0, n2 // 2):
            w[i1, i2] = 1.0
    return w


def packed_energy(spec):
    """Total spectral energy of a packed field (per Parseval weighting)."""
    spec = np.asarray(spec, dtype=np.float64)
    w = energy_weights(spec.shape)
    return float(np.sum(w * spec * spec))


def squared_magnitude(spec):
    """Per-slot squared magnitude |X(k)|^2 of the underlying frequency.

    Paired slots combine the stored real part with the imaginary part held
    by the mirrored slot, so both members of a pair report the same value;
    self-conjugate slots report their squared real value.
    """
    spec = np.asarray(spec, dtype=np.float64)
    n1, n2 = spec.shape[-2], spec.shape[-1]
    half = n2 // 2
    mag = np.empty(spec.shape, dtype=np.float64)

    pair = spec[..., :, 1:half] ** 2 + spec[..., :, half + 1:][..., ::-1] ** 2
    mag[..., :, 1:half] = pair
    mag[..., :, half + 1:] = pair[..., ::-1]
    for j in (0, half):
        col = np.empty(spec.shape[:-2] + (n1,), dtype=np.float64)
        col[..., 0] = spec[..., 0, j] ** 2
        col[..., n1 // 2] = spec[..., n1 // 2, j] ** 2
        pair = spec[..., 1: n1 // 2, j] ** 2 + spec[..., n1 // 2 + 1:, j][..., ::-1] ** 2
        col[..., 1: n1 // 2] = pair
        col[..., n1 // 2 + 1:] = pair[..., ::-1]
        mag[..., :, j] = col
    return mag


def wavenumber_radius(shape):
    """Euclidean wavenumber ||k|| for every slot of an (H, W) grid."""
    n1, n2 = shape[-2], shape[-1]
    k1 = np.where(np.arange(n1) <= n1 // 2, np.arange(n1), np.arange(n1) - n1)
    k2 = np.where(np.arange(n2) <= n2 // 2, np.arange(n2), np.arange(n2) - n2)
    return np.hypot(k1[:, None], k2[None, :])


class RadialProfile:
    """Mean squared coefficient magnitude grouped by wavenumber radius.

    Attributes
    ----------
    radii : ndarray
        Mean ||k|| of the components in each nonempty bin, strictly
        increasing.
    power : ndarray
        Mean squared magnitude per bin.
    counts : ndarray
        Number of packed components per bin; sums to the total component
        count of the profiled field.
    """

    def __init__(self, radii, power, counts):
        self.radii = np.asarray(radii, dtype=np.float64)
        self.power = np.asarray(power, dtype=np.float64)
        self.counts = np.asarray(counts, dtype=np.int64)
        if not (len(self.radii) == len(self.power) == len(self.counts)):
            raise ValueError("profile arrays must have equal length")
        if np.any(np.diff(self.radii) <= 0):
            raise ValueError("profile radii must be strictly increasing")

    def __len__(self):
        return len(self.radii)

    def rows(self):
        """Iterate (radius, power, count) tuples."""
        return zip(self.radii.tolist(), self.power.tolist(), self.counts.tolist())


def radial_profile(spec, n_bins):
    """Group packed components by wavenumber radius and average |X(k)|^2.

    ``spec`` may be a single field or a stack (..., C, H, W); batch axes
    beyond the channel axis are averaged so the profile describes the mean
    spectrum, while counts refer to the components of one field (times
    channels).
    """
    spec = check_grid(spec, name="spectral field")
    mag = squared_magnitude(spec)
    if mag.ndim > 3:
        mag = mag.reshape((-1,) + mag.shape[-3:]).mean(axis=0)
    return radial_profile_from_magnitude(mag, n_bins)


def radial_profile_from_magnitude(mag, n_bins):
    """Radial profile of a precomputed (mean) squared-magnitude array.

    Useful when streaming: accumulate the mean of
    :func:`squared_magnitude` over samples, then bin once.
    """
    if n_bins < 2:
        raise ValueError(f"n_bins must be >= 2, got {n_bins}")
    mag = np.asarray(mag, dtype=np.float64)
    if mag.ndim == 2:
        mag = mag[None]
    if mag.ndim != 3:
        raise ValueError(f"expected (C, H, W) magnitudes, got shape {mag.shape}")
    n_channels = mag.shape[0]
    r = wavenumber_radius(mag.shape)

    r_flat = np.tile(r.ravel(), n_channels)
    m_flat = mag.reshape(n_channels, -1).ravel()
    edges = np.linspace(0.0, r.max() * (1 + 1e-12), n_bins + 1)
    which = np.clip(np.digitize(r_flat, edges) - 1, 0, n_bins - 1)

    counts = np.bincount(which, minlength=n_bins)
    keep = counts > 0
    sums = np.bincount(which, weights=m_flat, minlength=n_bins)
    rsums = np.bincount(which, weights=r_flat, minlength=n_bins)
    return RadialProfile(
        radii=rsums[keep] / counts[keep],
        power=sums[keep] / counts[keep],
        counts=counts[keep],
    )


class SpectralTransform(TransformerMixin, BaseEstimator):
    """Scikit-learn style wrapper around the pixel/spectral mapping.

    ``fit`` records the grid shape; ``transform`` maps batches of images to
    packed coefficients and ``inverse_transform`` maps them back.  The
    mapping is stateless, linear and exactly invertible.
    """

    def fit(self, X, y=None):
        X = check_grid(X, name="X")
        self.grid_shape_ = (X.shape[-2], X.shape[-1])
        return self

    def transform(self, X):
        self._check_shape(X)
        return to_spectral(X)

    def inverse_transform(self, X):
        self._check_shape(X)
        return to_pixel(X)

    def _check_shape(self, X):
        if hasattr(self, "grid_shape_"):
            X = np.asarray(X)
            if X.shape[-2:] != self.grid_shape_:
                raise ValueError(
                    f"grid shape {X.shape[-2:]} does not match fitted "
                    f"shape {self.grid_shape_}"
                )
