from .fits import fit_s2_profile, fit_student_nu, residual_diagnostics
from .gmm import GMMProblem, GMMResult, gmm_calibrate, gmm_diagonal, gmm_offdiagonal
from .harness import HarnessReport, is_oos_harness, make_estimator
from .ml import (
    EstimationResult,
    MLState,
    loglik_grad_hessian,
    one_step_ml,
    restricted_ml,
    student_loglik,
)

__all__ = [
    "EstimationResult",
    "GMMProblem",
    "GMMResult",
    "HarnessReport",
    "MLState",
    "fit_s2_profile",
    "fit_student_nu",
    "gmm_calibrate",
    "gmm_diagonal",
    "gmm_offdiagonal",
    "is_oos_harness",
    "loglik_grad_hessian",
    "make_estimator",
    "one_step_ml",
    "residual_diagnostics",
    "restricted_ml",
    "student_loglik",
]
