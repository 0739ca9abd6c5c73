"""
Student-t likelihood of QARCH kernels and its one-step (optionally iterated)
Newton maximization over the off-diagonal entries of ``K`` or over the
parameters of a structured family.
"""

from collections.abc import Callable, Sequence
from enum import Enum
from typing import Optional, Union

import numpy as np
from ape.logging import logger
from pydantic import BaseModel, ConfigDict

from ape_qarch._utils import DEFAULT_NU, as_float_array, lag_matrix
from ape_qarch.exceptions import EstimationError, IndefiniteHessianError
from ape_qarch.kernel import (
    DesignMatrix,
    FamilySpec,
    FeedbackKernel,
    family_design_matrix,
    sigma2_path,
    symmetrize_upper,
)

GRADIENT_STEP = 1e-4
HESSIAN_STEP = 1e-3
STEP_FLOOR = 0.01
GRADIENT_TOLERANCE = 1e-6
MAX_NEWTON_ITERATIONS = 5
MAX_HALVINGS = 10
NEGATIVE_FLOOR = 1e-12

Pool = Sequence[Sequence[float]]


class DerivativeMethod(str, Enum):
    FINITE_DIFFERENCE = "finite-difference"
    ANALYTIC = "analytic"

    def __str__(self) -> str:
        return self.value


class StartPoint(str, Enum):
    ZERO = "zero"
    GMM = "gmm"

    def __str__(self) -> str:
        return self.value


class MLState(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    params: np.ndarray
    gradient: np.ndarray
    hessian: np.ndarray
    loglik: float
    """Per-point log-likelihood."""

    nu: float
    n_points: int
    labels: tuple[str, ...] = ()

    @property
    def gradient_norm(self) -> float:
        return float(np.linalg.norm(self.gradient)) if self.gradient.size else 0.0

    @property
    def hessian_eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.hessian) if self.hessian.size else np.zeros(0)

    @property
    def is_negative_definite(self) -> bool:
        return bool(np.all(self.hessian_eigenvalues < 0))


class EstimationResult(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    kernel: FeedbackKernel
    params: np.ndarray
    labels: tuple[str, ...] = ()
    param_se: np.ndarray
    """Error bars ``diag((-n H)^-1)^(1/2)``; NaN where the variance is not positive."""

    loglik_is: float
    loglik_oos: Optional[float] = None
    n_samplings: int = 1
    n_points: int
    nu: float
    one_step_params: np.ndarray
    one_step_loglik: float
    gradient_norm: float
    hessian_change: float
    """Relative change of the Hessian between the start and the solution."""

    iterations: int = 0
    step_rejected: bool = False
    hessian_indefinite: bool = False
    """The final Hessian is not negative definite; error bars are unreliable."""

    @property
    def n_params(self) -> int:
        return self.params.shape[0]

    @property
    def significant(self) -> np.ndarray:
        return np.abs(self.params) > self.param_se

    @property
    def aic(self) -> float:
        return akaike(self.loglik_is, self.n_params, self.n_points)


def akaike(loglik: float, n_params: int, n_points: int) -> float:
    """
    Per-point Akaike criterion ``-2 (I - M / n)``.
    """
    return -2 * (loglik - n_params / n_points)


class ActiveSet(BaseModel):
    """
    Affine parameterization ``K(p) = base.K + sum_i p_i directions[i]`` of the
    entries being estimated.
    """

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    base: FeedbackKernel
    directions: np.ndarray
    """Symmetric matrices, shape ``(n_params, q, q)``."""

    labels: tuple[str, ...]
    start: np.ndarray

    @property
    def n_params(self) -> int:
        return self.directions.shape[0]

    def kernel(self, params: Sequence[float]) -> FeedbackKernel:
        params = np.asarray(params, dtype=float)
        if params.shape != (self.n_params,):
            raise EstimationError(f"Expected {self.n_params} parameters, got {params.shape}.")

        K = self.base.K + np.tensordot(params, self.directions, axes=1)
        return self.base.model_copy_with(K=K)

    @classmethod
    def off_diagonal(
        cls,
        kernel: FeedbackKernel,
        q_off: Optional[int] = None,
        mask: Optional[np.ndarray] = None,
        start: StartPoint = StartPoint.GMM,
    ) -> "ActiveSet":
        """
        Estimate the off-diagonal entries selected by an upper-triangular
        ``mask`` (default: every pair within the first ``q_off`` lags).
        """
        q = kernel.q
        if mask is None:
            q_off = q if q_off is None else q_off
            mask = np.zeros((q, q), dtype=bool)
            mask[:q_off, :q_off] = np.triu(np.ones((q_off, q_off), dtype=bool), k=1)

        mask = np.triu(np.asarray(mask, dtype=bool), k=1)
        rows, cols = np.nonzero(mask)
        directions = np.zeros((rows.size, q, q))
        directions[np.arange(rows.size), rows, cols] = 1.0
        directions[np.arange(rows.size), cols, rows] = 1.0
        K = kernel.K.copy()
        initial = K[rows, cols].copy() if start == StartPoint.GMM else np.zeros(rows.size)
        K[rows, cols] = K[cols, rows] = 0.0
        labels = tuple(f"K({i + 1},{j + 1})" for i, j in zip(rows, cols))
        return cls(
            base=kernel.model_copy_with(K=K), directions=directions, labels=labels, start=initial
        )

    @classmethod
    def from_design(cls, kernel: FeedbackKernel, design: DesignMatrix) -> "ActiveSet":
        """
        Estimate family parameters on top of the fixed diagonal of ``kernel``.
        """
        if design.q != kernel.q:
            raise EstimationError(f"Design for q={design.q} applied to a q={kernel.q} kernel.")

        directions = np.zeros((design.n_params, kernel.q, kernel.q))
        for i, row in enumerate(design.matrix):
            directions[i] = symmetrize_upper(row, design.q)

        return cls(
            base=kernel.diagonal_only(),
            directions=directions,
            labels=design.labels,
            start=np.zeros(design.n_params),
        )


def numeric_derivatives(
    func: Callable[[np.ndarray], float],
    params: Sequence[float],
    gradient_step: float = GRADIENT_STEP,
    hessian_step: float = HESSIAN_STEP,
) -> tuple[np.ndarray, np.ndarray]:
    """
    Central finite-difference gradient and symmetrized Hessian of ``func``
    with relative steps ``step * max(|p|, 0.01)``.
    """
    p = np.asarray(params, dtype=float)
    n = p.shape[0]
    scale = np.maximum(np.abs(p), STEP_FLOOR)
    h_grad = gradient_step * scale
    h_hess = hessian_step * scale

    def at(offsets: dict[int, float]) -> float:
        shifted = p.copy()
        for index, offset in offsets.items():
            shifted[index] += offset

        value = func(shifted)
        if not np.isfinite(value):
            raise EstimationError(f"Non-finite likelihood at shifted point {shifted}.")

        return value

    gradient = np.array(
        [(at({i: h_grad[i]}) - at({i: -h_grad[i]})) / (2 * h_grad[i]) for i in range(n)]
    )
    center = at({})
    hessian = np.empty((n, n))
    for i in range(n):
        hi = h_hess[i]
        hessian[i, i] = (at({i: hi}) - 2 * center + at({i: -hi})) / hi**2
        for j in range(i):
            hj = h_hess[j]
            value = (
                at({i: hi, j: hj})
                - at({i: hi, j: -hj})
                - at({i: -hi, j: hj})
                + at({i: -hi, j: -hj})
            ) / (4 * hi * hj)
            hessian[i, j] = hessian[j, i] = value

    return gradient, 0.5 * (hessian + hessian.T)


def _point_terms(s: np.ndarray, r: np.ndarray, nu: float) -> np.ndarray:
    a2 = (nu - 2) * s
    return 0.5 * (nu * np.log(a2) - (nu + 1) * np.log(a2 + r * r))


def _clamp(s: np.ndarray, s2: float) -> np.ndarray:
    floor = NEGATIVE_FLOOR * s2
    s = np.where(s > 0, s, floor)
    if np.any(s <= 0):
        raise EstimationError("Nonpositive volatility after clamping (s2 = 0).")

    return s


def _check_nu(nu: float):
    if nu <= 2:
        raise EstimationError(f"Student likelihood needs nu > 2, got {nu}.")


def _scored(returns: np.ndarray, q: int, linear: Optional[np.ndarray]) -> np.ndarray:
    """
    Returns scored from ``t = q`` on, net of the linear prediction when given.
    """
    scored = returns[q:].copy()
    if linear is not None and linear.size:
        p = linear.shape[0]
        if p > q:
            raise EstimationError(f"Linear correction uses {p} lags, more than q={q}.")

        scored -= lag_matrix(returns, q)[:, :p] @ linear

    return scored


def student_loglik(
    kernel: FeedbackKernel,
    returns: Sequence[float],
    nu: float = DEFAULT_NU,
    linear: Optional[Sequence[float]] = None,
) -> float:
    """
    Per-point Student log-likelihood
    ``(1 / 2n) sum [nu ln a_t^2 - (nu + 1) ln(a_t^2 + r_t^2)]`` with
    ``a_t^2 = (nu - 2) sigma2_t``, scoring dates ``t >= q``.

    Args:
        kernel (:class:`~ape_qarch.kernel.FeedbackKernel`): The model.
        returns (Sequence[float]): One return series.
        nu (float): Degrees of freedom.
        linear (Optional[Sequence[float]]): ``C1(tau)`` for ``tau = 1..p``; the
          implied linear prediction is removed from each scored return.

    Returns:
        float
    """
    _check_nu(nu)
    r = as_float_array(returns, "returns", EstimationError)
    if r.shape[0] <= kernel.q:
        raise EstimationError(f"Series of length {r.shape[0]} too short for q={kernel.q}.")

    linear_arr = None if linear is None else np.asarray(linear, dtype=float)
    s = _clamp(sigma2_path(kernel, r), kernel.s2)
    return float(np.mean(_point_terms(s, _scored(r, kernel.q, linear_arr), nu)))


def pool_loglik(
    kernel: FeedbackKernel,
    pool: Pool,
    nu: float = DEFAULT_NU,
    linear: Optional[Sequence[float]] = None,
) -> float:
    """
    Per-point likelihood over every scored date of every series.
    """
    total = 0.0
    points = 0
    for returns in pool:
        n = len(returns) - kernel.q
        total += student_loglik(kernel, returns, nu, linear) * n
        points += n

    if points <= 0:
        raise EstimationError("Empty pool.")

    return total / points


class LikelihoodSurface:
    """
    The pool likelihood as a function of the active parameters. ``sigma2`` is
    affine in them, so each series keeps its base path and one feature path
    per parameter.
    """

    def __init__(
        self,
        active: ActiveSet,
        pool: Pool,
        nu: float = DEFAULT_NU,
        linear: Optional[Sequence[float]] = None,
    ):
        _check_nu(nu)
        self.active = active
        self.nu = nu
        q = active.base.q
        linear_arr = None if linear is None else np.asarray(linear, dtype=float)
        self._base: list[np.ndarray] = []
        self._features: list[np.ndarray] = []
        self._scored: list[np.ndarray] = []
        supports = [np.nonzero(np.triu(d)) for d in active.directions]
        for returns in pool:
            r = as_float_array(returns, "returns", EstimationError)
            if r.shape[0] <= q:
                raise EstimationError(f"Series of length {r.shape[0]} too short for q={q}.")

            windows = lag_matrix(r, q)
            features = np.empty((active.n_params, windows.shape[0]))
            for i, (rows, cols) in enumerate(supports):
                weights = active.directions[i][rows, cols] * np.where(rows == cols, 1.0, 2.0)
                features[i] = (windows[:, rows] * windows[:, cols]) @ weights

            self._base.append(sigma2_path(active.base, r))
            self._features.append(features)
            self._scored.append(_scored(r, q, linear_arr))

        self.n_points = int(sum(s.shape[0] for s in self._scored))
        if self.n_points == 0:
            raise EstimationError("Empty pool.")

    def _sigma2(self, index: int, params: np.ndarray) -> np.ndarray:
        s = self._base[index] + params @ self._features[index]
        return _clamp(s, self.active.base.s2)

    def loglik(self, params: Sequence[float]) -> float:
        params = np.asarray(params, dtype=float)
        total = 0.0
        for index, scored in enumerate(self._scored):
            total += float(np.sum(_point_terms(self._sigma2(index, params), scored, self.nu)))

        return total / self.n_points

    def _local_loglik(self, center: np.ndarray) -> Callable[[np.ndarray], float]:
        """
        The likelihood near ``center``, updating cached paths only along the
        perturbed parameters.
        """
        paths = [base + center @ features for base, features in zip(self._base, self._features)]

        def func(params: np.ndarray) -> float:
            delta = params - center
            moved = np.flatnonzero(delta)
            total = 0.0
            for path, features, scored in zip(paths, self._features, self._scored):
                s = path + delta[moved] @ features[moved] if moved.size else path
                s = _clamp(s, self.active.base.s2)
                total += float(np.sum(_point_terms(s, scored, self.nu)))

            return total / self.n_points

        return func

    def analytic_derivatives(self, params: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
        params = np.asarray(params, dtype=float)
        nu = self.nu
        n = params.shape[0]
        gradient = np.zeros(n)
        hessian = np.zeros((n, n))
        for index, scored in enumerate(self._scored):
            s = self._sigma2(index, params)
            denominator = (nu - 2) * s + scored * scored
            first = 0.5 * (nu / s - (nu + 1) * (nu - 2) / denominator)
            second = 0.5 * (-nu / s**2 + (nu + 1) * (nu - 2) ** 2 / denominator**2)
            features = self._features[index]
            gradient += features @ first
            hessian += (features * second) @ features.T

        return gradient / self.n_points, hessian / self.n_points

    def state(
        self,
        params: Optional[Sequence[float]] = None,
        method: DerivativeMethod = DerivativeMethod.FINITE_DIFFERENCE,
    ) -> MLState:
        params = self.active.start if params is None else np.asarray(params, dtype=float)
        if method == DerivativeMethod.ANALYTIC:
            gradient, hessian = self.analytic_derivatives(params)
        else:
            gradient, hessian = numeric_derivatives(self._local_loglik(params), params)

        return MLState(
            params=params,
            gradient=gradient,
            hessian=hessian,
            loglik=self.loglik(params),
            nu=self.nu,
            n_points=self.n_points,
            labels=self.active.labels,
        )


def loglik_grad_hessian(
    kernel: FeedbackKernel,
    active_mask: Union[np.ndarray, ActiveSet],
    pool: Pool,
    nu: float = DEFAULT_NU,
    method: DerivativeMethod = DerivativeMethod.FINITE_DIFFERENCE,
) -> MLState:
    """
    Likelihood, gradient and Hessian over the active parameters at ``kernel``.
    ``active_mask`` is an upper-triangular boolean mask of off-diagonal entries
    or a prepared :class:`ActiveSet`.
    """
    active = (
        active_mask
        if isinstance(active_mask, ActiveSet)
        else ActiveSet.off_diagonal(kernel, mask=active_mask)
    )
    return LikelihoodSurface(active, pool, nu).state(method=method)


def _newton_step(state: MLState) -> np.ndarray:
    eigenvalues = state.hessian_eigenvalues
    if np.any(eigenvalues >= 0):
        raise IndefiniteHessianError(eigenvalues)

    return -np.linalg.solve(state.hessian, state.gradient)


def one_step_ml(
    surface: LikelihoodSurface,
    state: Optional[MLState] = None,
    max_iterations: int = MAX_NEWTON_ITERATIONS,
    tolerance: float = GRADIENT_TOLERANCE,
    method: DerivativeMethod = DerivativeMethod.FINITE_DIFFERENCE,
) -> EstimationResult:
    """
    Newton update ``p* = p0 - H^-1 grad`` from the surface's start point,
    followed by up to ``max_iterations`` damped iterations while the gradient
    norm exceeds ``tolerance``. The first update is kept as the one-step result.

    Raises:
        :class:`~ape_qarch.exceptions.IndefiniteHessianError`: When the Hessian
          at the start is not negative definite.
    """
    start = state or surface.state(method=method)
    n = start.params.shape[0]
    if n == 0:
        return _result(surface, start, start, start, 0, False)

    one_step_params = start.params + _newton_step(start)
    current = surface.state(one_step_params, method)
    one_step = current
    step_rejected = False
    if current.loglik < start.loglik:
        logger.warning(
            f"One-step update lowers the likelihood ({start.loglik:.8f} -> {current.loglik:.8f})."
        )
        current, step_rejected = start, True

    iterations = 0
    while iterations < max_iterations and current.gradient_norm > tolerance:
        try:
            step = _newton_step(current)
        except IndefiniteHessianError as err:
            logger.warning(f"Stopping Newton iterations: {err}")
            break

        for _ in range(MAX_HALVINGS):
            candidate = surface.state(current.params + step, method)
            if candidate.loglik >= current.loglik:
                break

            step = step / 2
        else:
            logger.warning("Newton step rejected after repeated halving.")
            step_rejected = True
            break

        current = candidate
        iterations += 1
        logger.debug(
            f"Newton iteration {iterations}: loglik={current.loglik:.10f}, "
            f"|grad|={current.gradient_norm:.3g}."
        )

    if max_iterations > 0 and current.gradient_norm > 10 * tolerance and not step_rejected:
        raise EstimationError(
            f"Newton iterations did not converge (|grad| = {current.gradient_norm:.3g})."
        )

    return _result(surface, start, one_step, current, iterations, step_rejected)


def _result(
    surface: LikelihoodSurface,
    start: MLState,
    one_step: MLState,
    final: MLState,
    iterations: int,
    step_rejected: bool,
) -> EstimationResult:
    n = final.params.shape[0]
    if n:
        information = -surface.n_points * final.hessian
        try:
            covariance = np.linalg.inv(information)
        except np.linalg.LinAlgError as err:
            raise EstimationError(f"Singular information matrix: {err}") from err

        variances = np.diag(covariance)
        positive = variances > 0
        param_se = np.full(n, np.nan)
        param_se[positive] = np.sqrt(variances[positive])
        indefinite = not final.is_negative_definite
        if indefinite:
            logger.warning(
                "Hessian at the solution is not negative definite "
                f"(largest eigenvalue {final.hessian_eigenvalues.max():.3g}); "
                f"{int((~positive).sum())} error bars are undefined."
            )

        scale = np.linalg.norm(start.hessian) or 1.0
        hessian_change = float(np.linalg.norm(final.hessian - start.hessian) / scale)
    else:
        param_se = np.zeros(0)
        indefinite = False
        hessian_change = 0.0

    logger.info(
        f"ML: {n} parameters, loglik {start.loglik:.6f} -> {final.loglik:.6f} per point "
        f"({iterations} Newton iterations)."
    )
    return EstimationResult(
        kernel=surface.active.kernel(final.params),
        params=final.params,
        labels=final.labels,
        param_se=param_se,
        loglik_is=final.loglik,
        n_points=final.n_points,
        nu=final.nu,
        one_step_params=one_step.params,
        one_step_loglik=one_step.loglik,
        gradient_norm=final.gradient_norm,
        hessian_change=hessian_change,
        iterations=iterations,
        step_rejected=step_rejected,
        hessian_indefinite=indefinite,
    )


def ml_calibrate(
    kernel: FeedbackKernel,
    pool: Pool,
    q_off: int,
    nu: float = DEFAULT_NU,
    start: StartPoint = StartPoint.GMM,
    linear: Optional[Sequence[float]] = None,
    method: DerivativeMethod = DerivativeMethod.FINITE_DIFFERENCE,
    max_iterations: int = MAX_NEWTON_ITERATIONS,
) -> EstimationResult:
    """
    Off-diagonal ML over the first ``q_off`` lags, the rest of ``kernel`` fixed.
    """
    active = ActiveSet.off_diagonal(kernel, q_off=q_off, start=start)
    surface = LikelihoodSurface(active, pool, nu, linear)
    return one_step_ml(surface, max_iterations=max_iterations, method=method)


def restricted_ml(
    family: Union[FamilySpec, DesignMatrix],
    pool: Pool,
    kernel: FeedbackKernel,
    nu: float = DEFAULT_NU,
    linear: Optional[Sequence[float]] = None,
    method: DerivativeMethod = DerivativeMethod.FINITE_DIFFERENCE,
    max_iterations: int = MAX_NEWTON_ITERATIONS,
) -> EstimationResult:
    """
    ML in a family's parameter space, the diagonal of ``kernel`` held fixed.
    Only the family rows that are not free diagonal parameters are estimated.
    """
    design = family if isinstance(family, DesignMatrix) else family_design_matrix(family, kernel.q)
    active = ActiveSet.from_design(kernel, design.off_diagonal_part())
    surface = LikelihoodSurface(active, pool, nu, linear)
    return one_step_ml(surface, max_iterations=max_iterations, method=method)
