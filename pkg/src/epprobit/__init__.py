"""Probit estimation by EM with an expectation propagation E-step."""

from .constraints import (
    ConstraintSystem,
    axis_align,
    build_constraints,
    marginalize_model,
    reduce_covariance,
    reduce_reference,
    untransform_moments,
)
from .em import EmConfig, EmTrace, fit, initialize, lower_bound
from .ep import EpConfig, ep_log_mass, ep_moments
from .errors import *  # noqa: F401,F403
from .model import ChoiceObservation, ModelKind, ProbitModel, TmvnMoments
from .mstep import assemble_shat, solve_trace_constrained, update_beta
from .predict import ChoiceProbabilities, choice_probabilities, counterfactual_swap_to_top, outcome_probability
from .simulate import SimSpec, generate, gibbs_tmvn, rejection_tmvn
from .truncnorm import truncated_moments

__version__ = "0.1.0"

__all__ = [
    "ConstraintSystem",
    "axis_align",
    "build_constraints",
    "marginalize_model",
    "reduce_covariance",
    "reduce_reference",
    "untransform_moments",
    "EmConfig",
    "EmTrace",
    "fit",
    "initialize",
    "lower_bound",
    "EpConfig",
    "ep_log_mass",
    "ep_moments",
    "ChoiceObservation",
    "ModelKind",
    "ProbitModel",
    "TmvnMoments",
    "assemble_shat",
    "solve_trace_constrained",
    "update_beta",
    "ChoiceProbabilities",
    "choice_probabilities",
    "counterfactual_swap_to_top",
    "outcome_probability",
    "SimSpec",
    "generate",
    "gibbs_tmvn",
    "rejection_tmvn",
    "truncated_moments",
]
