"""Latent-diffusion progression prediction on synthetic volumetric phantoms.

Pipeline: a 3D autoencoder compresses volumes to latents; a
covariate-conditioned denoiser learns the latent distribution; a control
branch anchors generation on a subject's earlier scan; an auxiliary
volumetric model supplies target-age region volumes as conditioning; and
latent averaging stabilizes repeated inferences.
"""

__version__ = "0.1.0"

from .autoencoder import (
    AEConfig,
    AutoencoderParams,
    decode_scaled,
    encode_scaled,
    load_autoencoder,
    save_autoencoder,
    train_autoencoder,
)
from .auxiliary import (
    AuxiliaryError,
    DcmModel,
    LinearAuxModel,
    SubjectWarp,
    VisitRecord,
    fit_dcm,
    fit_linear,
    predict_dcm,
    predict_linear,
)
from .controlnet import (
    ControlNetConfig,
    ControlNetParams,
    controlled_denoise,
    train_controlnet,
)
from .covariates import (
    CONDITIONED_REGIONS,
    Covariates,
    NormalizationSpec,
    encode_covariates,
)
from .denoiser import DenoiserParams, LDMConfig, denoise, train_ldm
from .diffusion import (
    NoiseSchedule,
    ddpm_step,
    forward_diffuse,
    make_schedule,
    sample,
)
from .evaluate import (
    EvalConfig,
    EvalReport,
    compare_reports,
    run_ablation,
    run_protocol,
)
from .grids import LatentGrid, VolumeGrid, load_volume, save_volume
from .inference import (
    InferenceRequest,
    Models,
    TargetMetadata,
    infer_las,
    infer_trajectory,
)
from .metrics import mse, region_fractions, ssim3d
from .phantom import DatasetManifest, PhantomSpec, generate_subject, make_dataset
