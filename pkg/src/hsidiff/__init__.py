"""Language-conditioned latent diffusion for hyperspectral patch synthesis.

Pipeline: a spatially-preserving VAE compresses the spectral axis into a
4-channel latent; a caption-conditioned transformer denoiser is trained
semi-supervised with consistency against an EMA teacher; guided DDIM
sampling plus a sampling-balance-rate plan expands imbalanced small
training sets, scored by a small reference classifier.
"""

from .cube import (
    CaptionCorpus,
    HsiCube,
    Patch,
    SplitSpec,
    extract_patch,
    generate_toy_cube,
    load_cube,
    normalize,
    sample_issd_split,
    save_cube,
    sbr_expansion_plan,
)
from .errors import (
    ArgumentError,
    FormatError,
    HsidiffError,
    NumericDomainError,
    StateError,
    TrainingDivergedError,
    ValidationError,
)
from .schedule import (
    GuidanceConfig,
    NoiseSchedule,
    cfg_combine,
    ddim_step,
    ddim_timesteps,
    ddpm_posterior_step,
    make_linear_schedule,
    q_sample,
)

__all__ = [
    "ArgumentError",
    "CaptionCorpus",
    "FormatError",
    "GuidanceConfig",
    "HsiCube",
    "HsidiffError",
    "NoiseSchedule",
    "NumericDomainError",
    "Patch",
    "SplitSpec",
    "StateError",
    "TrainingDivergedError",
    "ValidationError",
    "cfg_combine",
    "ddim_step",
    "ddim_timesteps",
    "ddpm_posterior_step",
    "extract_patch",
    "generate_toy_cube",
    "load_cube",
    "make_linear_schedule",
    "normalize",
    "q_sample",
    "sample_issd_split",
    "save_cube",
    "sbr_expansion_plan",
]

__version__ = "0.1.0"
