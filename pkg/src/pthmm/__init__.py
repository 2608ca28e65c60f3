"""Lasso-penalized threshold hidden Markov models."""
__version__ = "0.1.0"

from .distributions import GammaParams, VonMisesParams, gamma_logpdf, gamma_sample, vonmises_logpdf, vonmises_sample
from .estimation import FitOptions, FitResult, fit, fit_null, fit_penalized, progressive_sharpness_fit, qreml_loop
from .exceptions import ConvergenceError, DegenerateCovariateError, DomainError, InputError, THMMError
from .likelihood import Track, TrackData, forward_loglik, penalized_loglik, viterbi
from .model import Beta0, ModelSpec, RegimeCoefficients, StandardizedCovariate, ThetaParams, standardize

__all__ = [
    "Beta0", "ConvergenceError", "DegenerateCovariateError", "DomainError", "FitOptions", "FitResult",
    "GammaParams", "InputError", "ModelSpec", "RegimeCoefficients", "StandardizedCovariate", "THMMError",
    "ThetaParams", "Track", "TrackData", "VonMisesParams", "fit", "fit_null", "fit_penalized", "forward_loglik",
    "gamma_logpdf", "gamma_sample", "penalized_loglik", "progressive_sharpness_fit", "qreml_loop", "standardize",
    "viterbi", "vonmises_logpdf", "vonmises_sample",
]
