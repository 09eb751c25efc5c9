"""Feature-preserving diffusion models in the Fourier domain.

Images are mapped to a real-packed spectral representation; the forward
noising chain converges to a Gaussian with the per-class spectral mean and
variance instead of white noise, so components that are invariant within a
class survive the entire process.  The package ships the spectral
transform, schedule and posterior algebra, streaming statistics,
forward/backward kernels, a DDPM baseline, a small trainable denoiser, a
verification harness of independent oracles, and a CLI tying it together.
"""

from .dataio import (
    BadMagicError,
    DatasetHandle,
    FormatError,
    LabelCountMismatchError,
    TruncatedFileError,
    load_idx,
    load_image_dir,
    read_image,
    write_image,
    write_pgm,
    write_ppm,
)
from .diffusion import (
    DiffusionState,
    PosteriorParams,
    backward_step,
    ddpm_backward_step,
    ddpm_forward_closed,
    ddpm_sample,
    epsilon_to_x0,
    forward_closed,
    forward_step,
    posterior_params,
    sample,
    terminal_sample,
)
from .models import DdpmBaselineModel, SpectralDiffusionModel
from .rng import make_rng
from .schedule import (
    NoiseSchedule,
    PosteriorCoeffs,
    cosine_schedule,
    ddpm_posterior_coeffs,
    drift_coefficient_sum,
    drift_multiplier_curve,
    geometric_drift_weights,
    mean_drift_weights,
    posterior_coeffs,
    schedule_from_alphas,
)
from .spectral import (
    RadialProfile,
    SpectralTransform,
    packed_energy,
    radial_profile,
    radial_profile_from_magnitude,
    squared_magnitude,
    to_pixel,
    to_spectral,
    wavenumber_radius,
)
from .stats import (
    ClassStats,
    InvarianceReport,
    PowerLawFit,
    RunningMoments,
    SpectralStats,
    count_invariant,
    fit_class_stats,
    power_law_fit,
)
from .training import (
    TinyDenoiser,
    TrainConfig,
    gradient_check,
    load_checkpoint,
    save_checkpoint,
    train_loop,
    train_step,
    weighted_loss,
)
from .verify import (
    OracleReport,
    drift_convergence_check,
    mc_forward_consistency,
    posterior_bayes_oracle,
    run_suite,
    spectral_moment_distance,
    terminal_law_check,
)

__version__ = "0.1.0"
