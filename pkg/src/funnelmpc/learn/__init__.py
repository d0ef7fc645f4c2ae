"""Surrogate models, certification and learning schemes."""

from .certify import (ClassBounds, KReport, Certificate, check_K_membership, m_ubar_certificate,
                      verify_internal_bound, rho_bar, admissible_d1_bound)
from .checkpoint import read_model, write_model
from .graybox import GrayboxParams, MassOnCarModel, BoxError, learn_graybox, graybox_objective
from .linear import LearnScheme, LearnResult, learn_linear, objective_value
from .surrogate import (CallableSurrogate, LinearSurrogate, PredictionModel, SurrogateModel,
                        surrogate_rhs)

__all__ = [
    "ClassBounds", "KReport", "Certificate", "check_K_membership", "m_ubar_certificate",
    "verify_internal_bound", "rho_bar", "admissible_d1_bound", "read_model", "write_model",
    "GrayboxParams", "MassOnCarModel", "BoxError", "learn_graybox", "graybox_objective",
    "LearnScheme", "LearnResult", "learn_linear", "objective_value", "CallableSurrogate",
    "LinearSurrogate", "PredictionModel", "SurrogateModel", "surrogate_rhs",
]
