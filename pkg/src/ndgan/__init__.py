"""Desk-scale GAN compression by pruning plus dual distillation.

The pieces compose in this order: prune a teacher generator down to a FLOP
budget (`nets`), warm-start the student from sliced teacher weights, then
train it against frozen teacher signals -- embedding-kernel distribution
matching with precomputed teacher mean features (`kernels`, `losses`) and a
student discriminator that learns to reconstruct teacher generator features
on Haar detail bands (`wavelet`, `losses`) -- under a dual-discriminator
adversarial objective (`train`).  `metrics` scores the result in a held-out
embedding space and `cli` wires everything into subcommands.
"""

from .errors import ConfigurationError, InfeasibleError, InputError, NdganError, NumericError
from .nets import (
    NetworkSpec,
    build_network,
    compression_rate,
    count_cost,
    discriminator_spec,
    generator_spec,
    inherit_parameters,
    load_checkpoint,
    prune_spec,
    save_checkpoint,
    scale_spec,
)
from .wavelet import WaveletBands, haar_decompose, haar_reconstruct
from .kernels import (
    EmbeddingKernel,
    GlobalFeatureCache,
    compute_global_features,
    default_kernels,
    estimate_sampling_error,
    make_kernel,
    metrics_kernel,
)
from .losses import (
    FeatureProjection,
    LossBreakdown,
    LossWeights,
    adversarial_losses,
    dime_loss,
    nickel_loss,
    total_loss,
)
from .metrics import (
    FeatureStats,
    MetricReport,
    compute_stats,
    density_coverage,
    evaluate_pair,
    fid,
    frechet_distance,
    precision_recall,
    score_features,
)
from .data import MixtureDataset, ingest_folder, open_dataset, sample_latents, synthetic_mixture
from .train import RunResult, TrainConfig, distill, equilibrium_drift, train_teacher

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "EmbeddingKernel",
    "FeatureProjection",
    "FeatureStats",
    "GlobalFeatureCache",
    "InfeasibleError",
    "InputError",
    "LossBreakdown",
    "LossWeights",
    "MetricReport",
    "MixtureDataset",
    "NdganError",
    "NetworkSpec",
    "NumericError",
    "RunResult",
    "TrainConfig",
    "WaveletBands",
    "adversarial_losses",
    "build_network",
    "compression_rate",
    "compute_global_features",
    "compute_stats",
    "count_cost",
    "default_kernels",
    "density_coverage",
    "dime_loss",
    "discriminator_spec",
    "distill",
    "equilibrium_drift",
    "estimate_sampling_error",
    "evaluate_pair",
    "fid",
    "frechet_distance",
    "generator_spec",
    "haar_decompose",
    "haar_reconstruct",
    "ingest_folder",
    "inherit_parameters",
    "load_checkpoint",
    "make_kernel",
    "metrics_kernel",
    "nickel_loss",
    "open_dataset",
    "precision_recall",
    "prune_spec",
    "sample_latents",
    "save_checkpoint",
    "scale_spec",
    "score_features",
    "synthetic_mixture",
    "total_loss",
    "train_teacher",
]
