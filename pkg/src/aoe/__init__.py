"""Model selection through automated online experiments.

Selects the best model from a large candidate pool by sequentially deploying
candidates in simulated online experiments, fitting a sparse Gaussian-process
surrogate to the logged immediate feedback, and scoring every candidate via
the induced distribution of its accumulative metric.
"""

from aoe.kernels import EmbeddingTable, FeatureMap, KernelParams, kernel_matrix
from aoe.gp_exact import ExactGp, fit_exact
from aoe.svgp import SvgpPosterior, TrainConfig, elbo, init_svgp, train_svgp
from aoe.metric import (
    EvalGrid,
    MetricGaussian,
    MetricSamples,
    PolicyMatrix,
    metric_gaussian,
    metric_samples_binary,
    policy_matrix,
)
from aoe.acquisition import AcquisitionConfig, score, select_next
from aoe.loop import LoopHistory, SurrogateConfig, run_aoe
from aoe.baselines import OpeEstimate, dr_estimate, is_estimate, run_baseline

__all__ = [
    "AcquisitionConfig",
    "EmbeddingTable",
    "EvalGrid",
    "ExactGp",
    "FeatureMap",
    "KernelParams",
    "LoopHistory",
    "MetricGaussian",
    "MetricSamples",
    "OpeEstimate",
    "PolicyMatrix",
    "SurrogateConfig",
    "SvgpPosterior",
    "TrainConfig",
    "dr_estimate",
    "elbo",
    "fit_exact",
    "init_svgp",
    "is_estimate",
    "kernel_matrix",
    "metric_gaussian",
    "metric_samples_binary",
    "policy_matrix",
    "run_aoe",
    "run_baseline",
    "score",
    "select_next",
    "train_svgp",
]

__version__ = "0.1.0"
