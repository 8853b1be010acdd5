"""Few-step diffusion distillation with latent reward fine-tuning, desk scale.

The pieces, bottom to top: a numpy autodiff engine (`engine`, `nn`, `optim`),
noise schedules and the diffusion teacher (`schedule`, `diffusion`), toy data
and pixel<->latent codecs (`data`, `codec`), the distillation losses
(`distill`), reward models and fine-tuning (`reward`), evaluation metrics
(`metrics`), and the manifest-driven experiment pipelines behind the CLI
(`manifest`, `pipelines`, `cli`).
"""

__version__ = "0.1.0"

from .codec import LatentCodec, identity_codec, pretrain_codec
from .data import ToyDataset, gen_gauss2d, gen_sprites8, make_dataset
from .diffusion import DenoiserModel, ddim_sample, fit_denoiser
from .distill import ConsistencyHead, DistillState, distill_loop, student_sample
from .manifest import RunManifest, config_hash, load_manifest, resolve_manifest
from .metrics import diversity, mmd2, timing_report, vendi_score, wasserstein2
from .reward import LatentRewardModel, PixelReward, RewardHooks, make_reward
from .schedule import ddim_grid, make_schedule, vp_cosine_schedule

__all__ = [
    "ConsistencyHead", "DenoiserModel", "DistillState", "LatentCodec",
    "LatentRewardModel", "PixelReward", "RewardHooks", "RunManifest",
    "ToyDataset", "config_hash", "ddim_grid", "ddim_sample", "distill_loop",
    "diversity", "fit_denoiser", "gen_gauss2d", "gen_sprites8",
    "identity_codec", "load_manifest", "make_dataset", "make_reward",
    "make_schedule", "mmd2", "pretrain_codec", "resolve_manifest",
    "student_sample", "timing_report", "vendi_score", "vp_cosine_schedule",
    "wasserstein2",
]
