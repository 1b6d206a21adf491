"""Training-free mask-guided image restoration on flow-matching priors.

The package couples an exactly tractable Gaussian-mixture prior (closed-form
marginal velocities, densities, and samples) with a small trainable velocity
net, a mask-guided ODE sampler with trajectory correction, mask-based
degradation operators, and full-reference quality metrics, all behind a
deterministic seeded CLI.
"""

from .degradation import (
    BoxInpaint,
    Denoise,
    DegradationTask,
    Observation,
    RandomInpaint,
    SuperResolution,
    degrade,
    make_box_mask,
    make_random_mask,
    make_sr_mask,
)
from .flow import (
    TimeGrid,
    VelocityField,
    conditional_path,
    euler_step,
    extrapolate_to_one,
    renoise,
    sample_unconditional,
    sample_unconditional_batch,
)
from .gmm import (
    GmmPrior,
    GmmVelocityField,
    gmm_log_density,
    gmm_marginal,
    gmm_sample,
    gmm_sample_batch,
    gmm_velocity,
    load_gmm_spec,
    save_gmm_spec,
)
from .metrics import MetricsRecord, consistency_rmse, psnr, ssim, timed
from .mlp import (
    MlpVelocityField,
    MlpVelocityNet,
    TrainConfig,
    TrainingDiverged,
    cfm_loss_batch,
    checkpoint_load,
    checkpoint_save,
    mlp_forward,
    train,
)
from .restoration import (
    RestorationConfig,
    RestorationReport,
    expected_field_evals,
    fuse,
    restore,
    restore_denoise,
    restore_masked,
)
from .tensors import (
    BinaryMask,
    FormatError,
    ImageTensor,
    SeededRng,
    clamp,
    load_pnm,
    load_raw,
    randn,
    save_pnm,
    save_raw,
)

__version__ = "0.1.0"
