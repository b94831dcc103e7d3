"""Normalizing flows with structured layers compiled from probabilistic
programs, plus the synthetic experiment suites that exercise them."""

from .autodiff import Param, Tape, Tensor, compute_gradients, \
    finite_difference_check
from .bijectors import Chain, ElementwiseAffine, Invert, Layer, \
    MadeConditioner, MaskedAutoregressive, MixtureCdf, Permutation, \
    TriangularAffine
from .datasets import Dataset, gen_brownian, gen_checkerboard, \
    gen_eight_gaussians, gen_emissions, gen_lorenz, gen_ou, gen_vdp
from .flows import ArchitectureSpec, FlowModel, assemble, load_checkpoint, \
    save_checkpoint
from .programs import InferenceProblem, NodeSpec, ProgramGraph, \
    ancestral_sample, joint_log_prob, topological_order, validate
from .roots import Bracket, bisection, chandrupatla, secant
from .special import std_normal_cdf, std_normal_quantile
from .structured import StructuredLayer, build_continuity_structure, \
    build_hierarchical_structure, build_mixture_structure, \
    build_smoothness_structure, exactness_log_prob
from .training import Adam, RunResult, TrainConfig, cosine_schedule, \
    elbo_estimate, forward_kl_surrogate, mle_train, vi_fit

__version__ = "0.1.0"

__all__ = [
    "Adam", "ArchitectureSpec", "Bracket", "Chain", "Dataset",
    "ElementwiseAffine", "FlowModel", "InferenceProblem", "Invert", "Layer",
    "MadeConditioner", "MaskedAutoregressive", "MixtureCdf", "NodeSpec",
    "Param", "Permutation", "ProgramGraph", "RunResult", "StructuredLayer",
    "Tape", "Tensor", "TrainConfig", "TriangularAffine", "ancestral_sample",
    "assemble", "bisection", "build_continuity_structure",
    "build_hierarchical_structure", "build_mixture_structure",
    "build_smoothness_structure", "chandrupatla", "compute_gradients",
    "cosine_schedule", "elbo_estimate", "exactness_log_prob",
    "finite_difference_check", "forward_kl_surrogate", "gen_brownian",
    "gen_checkerboard", "gen_eight_gaussians", "gen_emissions", "gen_lorenz",
    "gen_ou", "gen_vdp", "joint_log_prob", "load_checkpoint", "mle_train",
    "save_checkpoint", "secant", "std_normal_cdf", "std_normal_quantile",
    "topological_order", "validate", "vi_fit",
]
