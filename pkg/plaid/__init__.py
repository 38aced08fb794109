"""Continuous-diffusion language modelling over learned token embeddings.

Tokens are embedded, noised under a learned variance-exploding schedule and
denoised by a bidirectional transformer that predicts per-position token
distributions. Training minimises a variational bound on the log-likelihood;
the same bound evaluates held-out data, and ancestral sampling (optionally
steered by token guidance) generates text. `scaling` fits compute-optimal
power laws to IsoFLOP sweeps.
"""

from .diffusion_core import (
    Latent,
    NoiseSchedule,
    gaussian_posterior,
    posterior_params,
    prior_kl,
    sample_latent,
    sigma2,
    snr_prime,
)
from .embedding import EmbeddingTable, embed, nearest_token
from .denoiser import Denoiser, DenoiserConfig, DenoiserOutput, self_cond_forward
from .objective import (
    EvalReport,
    MomentTracker,
    VlbEstimate,
    allocate_split,
    discrete_vlb,
    eval_nll,
    vlb_estimate,
    vlb_samples,
)
from .trainer import TrainConfig, TrainState, build_train_state, fit, lr_wd_schedule, train_step
from .sampler import GuidanceSpec, GuidanceTerm, SamplerConfig, guided_xhat, sample
from .scaling import (
    IsoFlopPoint,
    PowerLawFit,
    compute_offset,
    count_flops,
    fit_isoflop,
    fit_power_law,
    scaling_report,
)
from .corpus import (
    BatchLoader,
    PackedDataset,
    Vocabulary,
    build_vocab,
    decode,
    encode,
    prepare_corpus,
)
from .errors import PlaidError

__all__ = [
    "Latent",
    "NoiseSchedule",
    "gaussian_posterior",
    "posterior_params",
    "prior_kl",
    "sample_latent",
    "sigma2",
    "snr_prime",
    "EmbeddingTable",
    "embed",
    "nearest_token",
    "Denoiser",
    "DenoiserConfig",
    "DenoiserOutput",
    "self_cond_forward",
    "EvalReport",
    "MomentTracker",
    "VlbEstimate",
    "allocate_split",
    "discrete_vlb",
    "eval_nll",
    "vlb_estimate",
    "vlb_samples",
    "TrainConfig",
    "TrainState",
    "build_train_state",
    "fit",
    "lr_wd_schedule",
    "train_step",
    "GuidanceSpec",
    "GuidanceTerm",
    "SamplerConfig",
    "guided_xhat",
    "sample",
    "IsoFlopPoint",
    "PowerLawFit",
    "compute_offset",
    "count_flops",
    "fit_isoflop",
    "fit_power_law",
    "scaling_report",
    "BatchLoader",
    "PackedDataset",
    "Vocabulary",
    "build_vocab",
    "decode",
    "encode",
    "prepare_corpus",
    "PlaidError",
]
