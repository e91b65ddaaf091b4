"""Frailty illness-death model fitting."""

from .cox import CoxDivergenceError, CoxResult, CoxRows, breslow, cox_newton, partial_loglik
from .em import (
    ArmData,
    ArmFit,
    CoxComponent,
    EMConvergenceError,
    FrailtyIllnessDeathFit,
    StructuralError,
    compute_k,
    em_fit,
    fit_frailty_illness_death,
    marginal_loglik,
)
from .frailty import gamma_laplace_deriv, posterior_frailty_moments, update_theta

__all__ = [
    "ArmData",
    "ArmFit",
    "CoxComponent",
    "CoxDivergenceError",
    "CoxResult",
    "CoxRows",
    "EMConvergenceError",
    "FrailtyIllnessDeathFit",
    "StructuralError",
    "breslow",
    "compute_k",
    "cox_newton",
    "em_fit",
    "fit_frailty_illness_death",
    "gamma_laplace_deriv",
    "marginal_loglik",
    "partial_loglik",
    "posterior_frailty_moments",
    "update_theta",
]
