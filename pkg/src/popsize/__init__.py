"""Bayesian hierarchical estimation of hard-to-reach population sizes from
multiplier-method and network scale-up estimates across cities and years."""

from .model import (
    DataError,
    MultiplierRecord,
    NsumRecord,
    ObservedDataset,
    ParameterState,
    PriorConfig,
    inv_logit,
    log_joint_density,
    logit,
)
from .sampler import PosteriorSamples, PosteriorSummary, SamplerConfig, run_chain, summarize
from .simulate import SimulationConfig, run_bias_study, simulate_dataset

__version__ = "0.1.0"

__all__ = [
    "DataError",
    "MultiplierRecord",
    "NsumRecord",
    "ObservedDataset",
    "ParameterState",
    "PosteriorSamples",
    "PosteriorSummary",
    "PriorConfig",
    "SamplerConfig",
    "SimulationConfig",
    "inv_logit",
    "log_joint_density",
    "logit",
    "run_bias_study",
    "run_chain",
    "simulate_dataset",
    "summarize",
]
