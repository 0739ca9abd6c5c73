"""
Method-of-moments calibration: linear systems matching the model-implied
correlation functions to their empirical counterparts.
"""

from enum import Enum
from typing import Optional

import numpy as np
from ape.logging import logger
from pydantic import BaseModel, ConfigDict, Field, model_validator

from ape_qarch.correlators import AmplitudeFit, CorrelationSet, LeverageFit
from ape_qarch.exceptions import EstimationError
from ape_qarch.kernel import FeedbackKernel

MAX_CONDITION = 1e12


class AmplitudeMode(str, Enum):
    ABSOLUTE = "absolute"
    """Three-point amplitude equation on ``|r|``, robust to large events."""

    SQUARED = "squared"
    """Four-point amplitude equation on ``r^2``, exact on theoretical correlations."""

    def __str__(self) -> str:
        return self.value


class GMMProblem(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    correlations: CorrelationSet
    truncated: Optional[CorrelationSet] = None
    """Correlations of tanh-truncated returns, used by the off-diagonal system."""

    q_diag: int = Field(gt=0)
    q_off: int = Field(ge=0)
    amplitude: AmplitudeMode = AmplitudeMode.ABSOLUTE

    @model_validator(mode="after")
    def validate_horizons(self):
        if self.q_off > self.q_diag:
            raise EstimationError(f"q_off={self.q_off} exceeds q_diag={self.q_diag}.")

        elif self.correlations.max_lag < self.q_diag:
            raise EstimationError(
                f"Correlations up to lag {self.correlations.max_lag} cannot support "
                f"q_diag={self.q_diag}."
            )

        off = self.off_diagonal_correlations
        if self.q_off > 1 and (off.max_lag_d < self.q_off or off.max_lag < self.q_off):
            raise EstimationError(
                f"D grid up to lag {off.max_lag_d} cannot support q_off={self.q_off}."
            )

        return self

    @property
    def off_diagonal_correlations(self) -> CorrelationSet:
        return self.truncated if self.truncated is not None else self.correlations


class GMMResult(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    s2: float
    L: np.ndarray
    k: np.ndarray
    off_diagonal: Optional[np.ndarray] = None
    """Upper off-diagonal block of ``K`` over the first ``q_off`` lags (zeros elsewhere)."""

    condition: float
    unstable: bool

    @property
    def q(self) -> int:
        return self.k.shape[0]

    def kernel(self) -> FeedbackKernel:
        K = np.diag(self.k)
        if self.off_diagonal is not None:
            K = K + self.off_diagonal + self.off_diagonal.T

        return FeedbackKernel(q=self.q, s2=self.s2, L=self.L, K=K)


def _tilde(correlations: CorrelationSet, name: str, fallback: str, tau: np.ndarray) -> np.ndarray:
    """
    Tilde function at ``tau > 0``, or its untilded twin when no volatility
    proxy was measured (they coincide at positive lags).
    """
    if getattr(correlations, name) is not None:
        return correlations.at(name, tau)

    return correlations.at(fallback, tau)


def _solve(matrix: np.ndarray, rhs: np.ndarray, label: str) -> tuple[np.ndarray, float]:
    condition = float(np.linalg.cond(matrix))
    logger.debug(f"GMM {label} system: size={rhs.shape[0]}, condition={condition:.3g}.")
    if not np.isfinite(condition) or condition > MAX_CONDITION:
        raise EstimationError(f"Singular GMM {label} system (condition {condition:.3g}).")

    try:
        return np.linalg.solve(matrix, rhs), condition
    except np.linalg.LinAlgError as err:
        raise EstimationError(f"Singular GMM {label} system: {err}") from err


def gmm_diagonal(problem: GMMProblem) -> GMMResult:
    """
    Solve the normalization, leverage and amplitude equations for ``(s2, L, k)``.

    Args:
        problem (:class:`GMMProblem`): Correlations and horizons.

    Returns:
        :class:`GMMResult`: With ``off_diagonal`` unset.
    """
    cs = problem.correlations
    q = problem.q_diag
    taus = np.arange(1, q + 1)
    # (row tau, column tau') lag differences
    diff = taus[:, None] - taus[None, :]

    matrix = np.empty((2 * q, 2 * q))
    rhs = np.empty(2 * q)

    matrix[:q, :q] = cs.at("c1", diff)
    matrix[:q, q:] = cs.at("lev", diff)
    rhs[:q] = _tilde(cs, "lev_tilde", "lev", taus)

    if problem.amplitude == AmplitudeMode.SQUARED:
        matrix[q:, :q] = cs.at("lev", -diff)
        matrix[q:, q:] = cs.at("c2", diff)
        rhs[q:] = _tilde(cs, "c2_tilde", "c2", taus)
    else:
        matrix[q:, :q] = cs.at("lev_a", -diff)
        matrix[q:, q:] = cs.at("ca", diff)
        rhs[q:] = _tilde(cs, "ca_tilde", "ca", taus)

    solution, condition = _solve(matrix, rhs, "diagonal")
    L, k = solution[:q], solution[q:]
    c1_zero = float(cs.at("c1", 0))
    s2 = cs.mean_r2 - c1_zero * float(k.sum())
    unstable = bool(k.sum() >= 1)
    if unstable:
        logger.warning(f"GMM diagonal solution is non-stationary (sum k = {k.sum():.4f}).")

    logger.info(f"GMM diagonal: q={q}, s2={s2:.4f}, sum k={k.sum():.4f}.")
    return GMMResult(s2=s2, L=L, k=k, condition=condition, unstable=unstable)


def gmm_offdiagonal(problem: GMMProblem, k: np.ndarray, L: np.ndarray) -> np.ndarray:
    """
    Solve the four-point equations for ``K(tau1, tau2)``, ``tau1 > tau2``, over
    the first ``q_off`` lags, one block of fixed ``tau2`` at a time.

    Returns:
        ``np.ndarray``: ``q_diag x q_diag`` strictly upper-triangular matrix.
    """
    cs = problem.off_diagonal_correlations
    q = problem.q_diag
    q_off = problem.q_off
    k = np.asarray(k, dtype=float)
    L = np.asarray(L, dtype=float)
    if k.shape[0] < q_off or L.shape[0] < q_off:
        raise EstimationError(f"Diagonal inputs shorter than q_off={q_off}.")

    d_tilde = "d_tilde" if cs.d_tilde is not None else "d"
    upper = np.zeros((q, q))
    for tau2 in range(1, q_off):
        tau1 = np.arange(tau2 + 1, q_off + 1)
        # columns: tau' = tau2 + 1 .. q_off
        prime = tau1
        c1_shift = cs.at("c1", tau1 - tau2)
        matrix = 2 * (
            cs.grid("d", (tau1 - tau2)[:, None], (prime - tau2)[None, :])
            + cs.at("c1", tau1[:, None] - prime[None, :])
            - cs.at("c1", prime - tau2)[None, :] * c1_shift[:, None]
        )
        rhs = (
            cs.grid(d_tilde, tau1, np.full_like(tau1, tau2))
            - L[tau2 - 1] * cs.at("lev", tau1 - tau2)
            - L[tau1 - 1] * cs.at("lev", tau2 - tau1)
        )
        for lag in range(1, tau2 + 1):
            rhs -= k[lag - 1] * cs.grid("d", tau1 - lag, np.full_like(tau1, tau2 - lag))

        solution, _ = _solve(matrix, rhs, f"off-diagonal (tau2={tau2})")
        upper[tau2 - 1, tau1 - 1] = solution

    logger.info(f"GMM off-diagonal: q_off={q_off}, max |K| = {np.max(np.abs(upper)):.3g}.")
    return upper


def gmm_calibrate(problem: GMMProblem) -> GMMResult:
    """
    Diagonal system, then the off-diagonal block when ``q_off > 1``.
    """
    diagonal = gmm_diagonal(problem)
    if problem.q_off <= 1:
        return diagonal

    upper = gmm_offdiagonal(problem, diagonal.k, diagonal.L)
    return diagonal.model_copy(update={"off_diagonal": upper})


def smooth_correlations(
    correlations: CorrelationSet,
    leverage: Optional[LeverageFit] = None,
    amplitude: Optional[AmplitudeFit] = None,
) -> CorrelationSet:
    """
    Replace the noisy positive-lag leverage and amplitude correlations by
    their fitted forms.
    """
    updates = {}
    positive = np.arange(1, correlations.max_lag + 1)
    index = positive + correlations.max_lag
    if leverage is not None:
        for name in ("lev", "lev_tilde"):
            if (values := getattr(correlations, name)) is not None:
                values = values.copy()
                values[index] = leverage.evaluate(positive)
                updates[name] = values

    if amplitude is not None:
        name = "ca_tilde" if correlations.ca_tilde is not None else "ca"
        if (values := getattr(correlations, name)) is not None:
            values = values.copy()
            values[index] = amplitude.evaluate(positive)
            updates[name] = values

    return correlations.model_copy(update=updates)
