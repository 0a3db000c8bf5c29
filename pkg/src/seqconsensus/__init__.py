"""Sequential consensus fitting of latent Gaussian models over data partitions."""

from .alpha import AlphaError, AlphaEstimate, pool_alpha, ratio_gaussian_approx, rescale_effect
from .consensus import (ConsensusError, ExpertWeights, combine_marginals, combine_multivariate,
                        marginals_from_multivariate)
from .gmrf import (EffectSpec, FactorizationError, GaussianDensity, build_effect_precision, factorize,
                   marginal_variances, sample_gmrf)
from .hyper import HyperGridPosterior
from .infer import (BlockFitResult, GaussianMarginal, GridOptions, InferenceError, explore_hyper_grid,
                    fit_block, gaussian_approx_latent, log_marginal_likelihood)
from .model import ConfigError, ModelSpec, PartitionPlan, parse_model_config, partition_dataset
from .sequential import (ConsensusReport, SequentialError, SequentialOptions, run_sc, run_scp,
                         second_pass_prior, update_fixed_prior)

__all__ = [
    "AlphaError", "AlphaEstimate", "BlockFitResult", "ConfigError", "ConsensusError", "ConsensusReport",
    "EffectSpec", "ExpertWeights", "FactorizationError", "GaussianDensity", "GaussianMarginal",
    "GridOptions", "HyperGridPosterior", "InferenceError", "ModelSpec", "PartitionPlan", "SequentialError",
    "SequentialOptions", "build_effect_precision", "combine_marginals", "combine_multivariate",
    "explore_hyper_grid", "factorize", "fit_block", "gaussian_approx_latent", "log_marginal_likelihood",
    "marginal_variances", "marginals_from_multivariate", "parse_model_config", "partition_dataset",
    "pool_alpha", "ratio_gaussian_approx", "rescale_effect", "run_sc", "run_scp", "sample_gmrf",
    "second_pass_prior", "update_fixed_prior",
]
