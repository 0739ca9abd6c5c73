"""
QARCH feedback kernels.

The squared volatility is a quadratic form of the ``q`` most recent returns::

    sigma2_t = s2 + sum_tau L(tau) r_{t-tau} + sum_{tau,tau'} K(tau,tau') r_{t-tau} r_{t-tau'}

Every structured family is stored in the dense symmetric form, so that
:func:`sigma2` is the single way a kernel is evaluated.
"""

import math
from collections.abc import Sequence
from enum import Enum
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np
from ape.logging import logger
from pydantic import BaseModel, ConfigDict, Field, model_validator

from ape_qarch._utils import (
    MAX_SUPPORTED_Q,
    Provenance,
    as_float_array,
    format_float,
    frozen,
    iter_chunks,
    lag_matrix,
)
from ape_qarch.exceptions import KernelError

SYMMETRY_TOLERANCE = 1e-12
EIGENVALUE_TOLERANCE = 1e-12


class FamilyTag(str, Enum):
    ARCH = "ARCH"
    FIGARCH_DIAG = "FIGARCH-diag"
    TWO_SCALE = "TwoScale"
    MULTI_SCALE = "MultiScale"
    BB = "BB"
    BB_MIXED = "BB-mixed"
    ZUMBACH = "Zumbach"
    LONG_TREND = "LongTrend"
    COMPOSITE = "Composite"
    UNCONSTRAINED = "Unconstrained"

    def __str__(self) -> str:
        return self.value


# Families whose off-diagonal part may be stacked on a shared diagonal.
COMPOSABLE = (FamilyTag.TWO_SCALE, FamilyTag.BB, FamilyTag.ZUMBACH, FamilyTag.LONG_TREND)


class FeedbackKernel(BaseModel):
    """
    Baseline ``s2``, leverage vector ``L`` and symmetric feedback matrix ``K``
    over a horizon of ``q`` days. Arrays are read-only once constructed.
    """

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    q: int
    """Horizon in days."""

    s2: float
    """Baseline squared volatility."""

    L: np.ndarray
    """Leverage weights, ``L[tau - 1]`` for ``tau = 1..q``."""

    K: np.ndarray
    """Symmetric feedback matrix, ``K[tau - 1, tau' - 1]``."""

    @model_validator(mode="before")
    @classmethod
    def validate_arrays(cls, values: Any) -> Any:
        if not isinstance(values, dict):
            return values

        matrix = as_float_array(values.get("K"), "K", KernelError, ndim=2)
        q = values.get("q", matrix.shape[0])
        if matrix.shape != (q, q):
            raise KernelError(f"K must be {q}x{q}, got {matrix.shape}.")

        elif q < 1:
            raise KernelError("Horizon q must be a positive integer.")

        elif q > MAX_SUPPORTED_Q:
            logger.warning(f"Horizon q={q} exceeds the supported envelope of {MAX_SUPPORTED_Q}.")

        scale = max(1.0, float(np.max(np.abs(matrix))))
        if np.max(np.abs(matrix - matrix.T)) > SYMMETRY_TOLERANCE * scale:
            raise KernelError("K must be symmetric.")

        leverage = values.get("L")
        leverage = np.zeros(q) if leverage is None else as_float_array(leverage, "L", KernelError)
        if leverage.shape != (q,):
            raise KernelError(f"L must have length {q}, got {leverage.shape[0]}.")

        s2 = float(values.get("s2", 0.0))
        if not math.isfinite(s2) or s2 < 0:
            raise KernelError(f"Baseline s2 must be finite and non-negative, got {s2}.")

        return {
            "q": q,
            "s2": s2,
            "L": frozen(leverage),
            "K": frozen(0.5 * (matrix + matrix.T)),
        }

    @property
    def diagonal(self) -> np.ndarray:
        return np.diag(self.K).copy()

    @property
    def trace(self) -> float:
        return float(np.trace(self.K))

    @property
    def has_leverage(self) -> bool:
        return bool(np.any(self.L != 0))

    @property
    def is_diagonal(self) -> bool:
        return not bool(np.any(self.K - np.diag(np.diag(self.K))))

    def off_diagonal(self) -> np.ndarray:
        """
        Upper off-diagonal entries ``K(a, b), a < b`` in row-major order.
        """
        rows, cols = np.triu_indices(self.q, k=1)
        return self.K[rows, cols].copy()

    def with_off_diagonal(self, values: Sequence[float]) -> "FeedbackKernel":
        rows, cols = np.triu_indices(self.q, k=1)
        matrix = np.diag(self.diagonal)
        matrix[rows, cols] = values
        matrix[cols, rows] = values
        return self.model_copy_with(K=matrix)

    def diagonal_only(self) -> "FeedbackKernel":
        return self.model_copy_with(K=np.diag(self.diagonal))

    def truncated(self, q: int) -> "FeedbackKernel":
        """
        The kernel restricted to its first ``q`` lags.
        """
        if not 1 <= q <= self.q:
            raise KernelError(f"Cannot truncate a q={self.q} kernel to q={q}.")

        return FeedbackKernel(q=q, s2=self.s2, L=self.L[:q], K=self.K[:q, :q])

    def model_copy_with(self, **updates) -> "FeedbackKernel":
        values = {"q": self.q, "s2": self.s2, "L": self.L, "K": self.K, **updates}
        return FeedbackKernel(**values)

    def quadratic_form(self, window: Sequence[float]) -> float:
        w = np.asarray(window, dtype=float)[: self.q]
        return float(w @ self.K @ w)


class FamilySpec(BaseModel):
    """
    A structured family and its named parameter blocks.

    Blocks per family (``q`` is the horizon)::

        ARCH           k (q)
        FIGARCH-diag   g, alpha, q0 (scalars)
        TwoScale       g1 (q), g2 (q-1)
        MultiScale     g (ell * (2q + 1 - ell) / 2), scales 1..ell stacked
        BB             g_bb (q)
        BB-mixed       diag (q), g_bb (q-1, for lags 2..q)
        Zumbach        diag (q), g_z (q // 2)
        LongTrend      diag (q), g_lt (q-1)
        Composite      diag (q) plus the off-diagonal block of each component
        Unconstrained  k (q), K_off (q(q-1)/2)
    """

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    family: FamilyTag
    q: int
    params: dict[str, Any] = Field(default_factory=dict)
    components: tuple[FamilyTag, ...] = ()
    scales: Optional[int] = None
    """Number of multi-day scales for ``MultiScale``."""

    @model_validator(mode="after")
    def validate_counts(self):
        if self.q < 1:
            raise KernelError("Horizon q must be a positive integer.")

        if self.family == FamilyTag.COMPOSITE:
            if not self.components:
                raise KernelError("Composite family needs at least one component.")

            for component in self.components:
                if component not in COMPOSABLE:
                    raise KernelError(f"'{component}' cannot be a Composite component.")

        elif self.family == FamilyTag.MULTI_SCALE and not (1 <= (self.scales or 0) <= self.q):
            raise KernelError(f"MultiScale needs 1 <= scales <= q, got {self.scales}.")

        if self.params:
            for name, length in parameter_blocks(self):
                if name not in self.params:
                    raise KernelError(f"Family {self.family} is missing parameter '{name}'.")

                value = self.params[name]
                if length is None:
                    if not math.isfinite(float(value)):
                        raise KernelError(f"Parameter '{name}' must be finite.")

                else:
                    as_float_array(value, name, KernelError, length=length)

        return self

    @property
    def n_params(self) -> int:
        return sum(1 if length is None else length for _, length in parameter_blocks(self))

    def flat_params(self) -> np.ndarray:
        parts = [
            np.atleast_1d(np.asarray(self.params[name], dtype=float))
            for name, _ in parameter_blocks(self)
        ]
        return np.concatenate(parts) if parts else np.zeros(0)

    def with_flat_params(self, vector: Sequence[float]) -> "FamilySpec":
        vector = np.asarray(vector, dtype=float)
        if vector.shape != (self.n_params,):
            raise KernelError(f"Expected {self.n_params} parameters, got {vector.shape}.")

        params: dict[str, Any] = {}
        offset = 0
        for name, length in parameter_blocks(self):
            if length is None:
                params[name] = float(vector[offset])
                offset += 1
            else:
                params[name] = vector[offset : offset + length].copy()
                offset += length

        return self.model_copy(update={"params": params})


def family_from_name(name: str, q: int) -> FamilySpec:
    """
    Parse ``Tag``, ``Composite:TwoScale+LongTrend`` or ``MultiScale:<scales>``
    into a parameter-free :class:`FamilySpec`.
    """
    tag_name, _, rest = name.partition(":")
    try:
        family = FamilyTag(tag_name)
        if family == FamilyTag.COMPOSITE:
            components = tuple(FamilyTag(c) for c in rest.split("+") if c)
            return FamilySpec(family=family, q=q, components=components)

        elif family == FamilyTag.MULTI_SCALE:
            return FamilySpec(family=family, q=q, scales=int(rest) if rest else 1)

    except ValueError as err:
        raise KernelError(f"Unknown family '{name}'.") from err

    if rest:
        raise KernelError(f"Family '{tag_name}' takes no qualifier, got '{name}'.")

    return FamilySpec(family=family, q=q)


def _off_block(component: FamilyTag, q: int) -> tuple[str, Optional[int]]:
    if component == FamilyTag.TWO_SCALE:
        return "g2", q - 1
    elif component == FamilyTag.BB:
        return "g_bb", q - 1
    elif component == FamilyTag.ZUMBACH:
        return "g_z", q // 2
    elif component == FamilyTag.LONG_TREND:
        return "g_lt", q - 1

    raise KernelError(f"Unknown family '{component}'.")


def parameter_blocks(spec: FamilySpec) -> list[tuple[str, Optional[int]]]:
    """
    Ordered ``(name, length)`` blocks for a family. A ``None`` length marks a scalar.
    """
    q = spec.q
    family = spec.family
    if family == FamilyTag.ARCH:
        return [("k", q)]
    elif family == FamilyTag.FIGARCH_DIAG:
        return [("g", None), ("alpha", None), ("q0", None)]
    elif family == FamilyTag.TWO_SCALE:
        return [("g1", q), ("g2", q - 1)]
    elif family == FamilyTag.MULTI_SCALE:
        ell = spec.scales or 1
        return [("g", ell * (2 * q + 1 - ell) // 2)]
    elif family == FamilyTag.BB:
        return [("g_bb", q)]
    elif family == FamilyTag.BB_MIXED:
        return [("diag", q), ("g_bb", q - 1)]
    elif family == FamilyTag.ZUMBACH:
        return [("diag", q), ("g_z", q // 2)]
    elif family == FamilyTag.LONG_TREND:
        return [("diag", q), ("g_lt", q - 1)]
    elif family == FamilyTag.COMPOSITE:
        blocks = [("diag", q)]
        for component in spec.components:
            name, length = _off_block(component, q)
            blocks.append((f"{component.value}.{name}", length))

        return blocks
    elif family == FamilyTag.UNCONSTRAINED:
        return [("k", q), ("K_off", q * (q - 1) // 2)]

    raise KernelError(f"Unknown family '{family}'.")


def _check_length(values: Sequence[float], length: int, name: str) -> np.ndarray:
    return as_float_array(values, name, KernelError, length=length)


def _assemble(
    q: int, s2: float, matrix: np.ndarray, L: Optional[Sequence[float]]
) -> FeedbackKernel:
    leverage = np.zeros(q) if L is None else _check_length(L, q, "L")
    return FeedbackKernel(q=q, s2=s2, L=leverage, K=matrix)


def build_arch(
    k: Sequence[float], s2: float, L: Optional[Sequence[float]] = None, q: Optional[int] = None
) -> FeedbackKernel:
    """
    Purely diagonal kernel ``K(tau, tau') = k(tau) delta(tau, tau')``.
    """
    q = len(k) if q is None else q
    diag = _check_length(k, q, "k")
    return _assemble(q, s2, np.diag(diag), L)


def figarch_diagonal(g: float, alpha: float, q0: float, q: int) -> np.ndarray:
    """
    Power-law diagonal ``g * tau^-alpha * exp(-tau / q0)`` for ``tau = 1..q``.
    A non-finite ``q0`` disables the cutoff.
    """
    tau = np.arange(1, q + 1, dtype=float)
    cutoff = np.exp(-tau / q0) if math.isfinite(q0) else 1.0
    return g * tau ** (-alpha) * cutoff


def build_figarch(
    g: float,
    alpha: float,
    q0: float,
    q: int,
    s2: float,
    L: Optional[Sequence[float]] = None,
) -> FeedbackKernel:
    if q0 <= 0:
        raise KernelError(f"Cutoff q0 must be positive, got {q0}.")

    return build_arch(figarch_diagonal(g, alpha, q0, q), s2, L=L)


def build_two_scale(
    g1: Sequence[float], g2: Sequence[float], s2: float, L: Optional[Sequence[float]] = None
) -> FeedbackKernel:
    """
    Daily and two-day returns::

        sum_l g1(l) r_{t-l-1}^2 + sum_l g2(l) (r_{t-l-1} + r_{t-l-2})^2
    """
    q = len(g1)
    first = _check_length(g1, q, "g1")
    second = _check_length(g2, q - 1, "g2")
    matrix = np.diag(first)
    for ell, value in enumerate(second):
        matrix[ell, ell] += value
        matrix[ell + 1, ell + 1] += value
        matrix[ell, ell + 1] += value
        matrix[ell + 1, ell] += value

    return _assemble(q, s2, matrix, L)


def build_multi_scale(
    g: Sequence[Sequence[float]], s2: float, L: Optional[Sequence[float]] = None
) -> FeedbackKernel:
    """
    Squared ``ell``-day returns at every position for ``ell = 1..len(g)``.
    ``g[ell - 1]`` has length ``q - ell + 1``.
    """
    if not g:
        raise KernelError("At least one scale is required.")

    q = len(g[0])
    matrix = np.zeros((q, q))
    for ell, coefficients in enumerate(g, start=1):
        values = _check_length(coefficients, q - ell + 1, f"g[{ell}]")
        for start, value in enumerate(values):
            matrix[start : start + ell, start : start + ell] += value

    return _assemble(q, s2, matrix, L)


def bb_cumulative(g_bb: np.ndarray) -> np.ndarray:
    """
    ``G[tau] = sum_{l >= tau} g_bb(l)``.
    """
    return np.cumsum(g_bb[::-1])[::-1]


def build_bb(
    g_bb: Sequence[float],
    s2: float,
    L: Optional[Sequence[float]] = None,
    diag: Optional[Sequence[float]] = None,
) -> FeedbackKernel:
    """
    Squared aggregated returns over every horizon, ``K(a, b) = G[max(a, b)]``.
    With ``diag`` the diagonal is overridden (the mixed variant).
    """
    q = len(g_bb)
    values = _check_length(g_bb, q, "g_bb")
    cumulative = bb_cumulative(values)
    index = np.maximum.outer(np.arange(q), np.arange(q))
    matrix = cumulative[index]
    if diag is not None:
        np.fill_diagonal(matrix, _check_length(diag, q, "diag"))

    return _assemble(q, s2, matrix, L)


def zumbach_coefficient(a: int, b: int, g_z: np.ndarray, q: int) -> float:
    """
    Full cross coefficient of ``r_{t-a} r_{t-b}`` (``a < b``) in the expansion
    of ``sum_l g_z(l) R_t^(l) R_{t-l}^(l)``.
    """
    low = max(a, -(-b // 2))
    high = min(b - 1, q // 2)
    return float(np.sum(g_z[low - 1 : high])) if high >= low else 0.0


def build_zumbach(
    diag: Sequence[float],
    g_z: Sequence[float],
    s2: float,
    L: Optional[Sequence[float]] = None,
) -> FeedbackKernel:
    """
    Past trend on past ``l``-day return: ``sum_l g_z(l) R_t^(l) R_{t-l}^(l)``.
    Off-diagonal entries hold half of each cross coefficient so the quadratic
    form reproduces the expansion.
    """
    q = len(diag)
    diagonal = _check_length(diag, q, "diag")
    coefficients = _check_length(g_z, q // 2, "g_z")
    matrix = np.diag(diagonal)
    for a in range(1, q + 1):
        for b in range(a + 1, q + 1):
            if value := zumbach_coefficient(a, b, coefficients, q):
                matrix[a - 1, b - 1] = matrix[b - 1, a - 1] = 0.5 * value

    return _assemble(q, s2, matrix, L)


def build_long_trend(
    diag: Sequence[float],
    g_lt: Sequence[float],
    s2: float,
    L: Optional[Sequence[float]] = None,
) -> FeedbackKernel:
    """
    Yesterday's return confirming a longer trend: ``r_{t-1} sum_l g_lt(l) r_{t-1-l}``.
    """
    q = len(diag)
    diagonal = _check_length(diag, q, "diag")
    trend = _check_length(g_lt, q - 1, "g_lt")
    matrix = np.diag(diagonal)
    matrix[0, 1:] += 0.5 * trend
    matrix[1:, 0] += 0.5 * trend
    return _assemble(q, s2, matrix, L)


def build_unconstrained(
    k: Sequence[float], k_off: Sequence[float], s2: float, L: Optional[Sequence[float]] = None
) -> FeedbackKernel:
    q = len(k)
    kernel = build_arch(k, s2, L=L)
    return kernel.with_off_diagonal(_check_length(k_off, q * (q - 1) // 2, "K_off"))


def _composite_off_diagonal(component: FamilyTag, values: np.ndarray, q: int) -> np.ndarray:
    zeros = np.zeros(q)
    if component == FamilyTag.TWO_SCALE:
        matrix = np.zeros((q, q))
        index = np.arange(q - 1)
        matrix[index, index + 1] = matrix[index + 1, index] = values
        return matrix

    elif component == FamilyTag.BB:
        matrix = build_bb(np.concatenate(([0.0], values)), 0.0).K.copy()
    elif component == FamilyTag.ZUMBACH:
        matrix = build_zumbach(zeros, values, 0.0).K.copy()
    elif component == FamilyTag.LONG_TREND:
        matrix = build_long_trend(zeros, values, 0.0).K.copy()
    else:
        raise KernelError(f"'{component}' cannot be a Composite component.")

    np.fill_diagonal(matrix, 0.0)
    return matrix


def build_from_spec(
    spec: FamilySpec, s2: float = 0.0, L: Optional[Sequence[float]] = None
) -> FeedbackKernel:
    """
    Construct the dense kernel of a parametrised family.
    """
    if not spec.params:
        raise KernelError(f"Family {spec.family} has no parameter values.")

    p = spec.params
    family = spec.family
    if family == FamilyTag.ARCH:
        return build_arch(p["k"], s2, L=L)
    elif family == FamilyTag.FIGARCH_DIAG:
        return build_figarch(p["g"], p["alpha"], p["q0"], spec.q, s2, L=L)
    elif family == FamilyTag.TWO_SCALE:
        return build_two_scale(p["g1"], p["g2"], s2, L=L)
    elif family == FamilyTag.MULTI_SCALE:
        flat = np.asarray(p["g"], dtype=float)
        scales, offset = [], 0
        for ell in range(1, (spec.scales or 1) + 1):
            scales.append(flat[offset : offset + spec.q - ell + 1])
            offset += spec.q - ell + 1

        return build_multi_scale(scales, s2, L=L)
    elif family == FamilyTag.BB:
        return build_bb(p["g_bb"], s2, L=L)
    elif family == FamilyTag.BB_MIXED:
        return build_bb(np.concatenate(([0.0], p["g_bb"])), s2, L=L, diag=p["diag"])
    elif family == FamilyTag.ZUMBACH:
        return build_zumbach(p["diag"], p["g_z"], s2, L=L)
    elif family == FamilyTag.LONG_TREND:
        return build_long_trend(p["diag"], p["g_lt"], s2, L=L)
    elif family == FamilyTag.UNCONSTRAINED:
        return build_unconstrained(p["k"], p["K_off"], s2, L=L)
    elif family == FamilyTag.COMPOSITE:
        matrix = np.diag(_check_length(p["diag"], spec.q, "diag"))
        for component in spec.components:
            name, length = _off_block(component, spec.q)
            values = _check_length(p[f"{component.value}.{name}"], length, name)
            matrix = matrix + _composite_off_diagonal(component, values, spec.q)

        return _assemble(spec.q, s2, matrix, L)

    raise KernelError(f"Unknown family '{family}'.")


def sigma2(kernel: FeedbackKernel, window: Sequence[float]) -> float:
    """
    Squared volatility given the past returns, most recent first.
    The value may be negative when ``K`` is indefinite.
    """
    w = np.asarray(window, dtype=float)
    if w.ndim != 1 or w.shape[0] < kernel.q:
        raise KernelError(f"Window needs at least {kernel.q} returns, got {w.shape}.")

    w = w[: kernel.q]
    if not np.all(np.isfinite(w)):
        raise KernelError("Window contains non-finite returns.")

    return float(kernel.s2 + kernel.L @ w + w @ kernel.K @ w)


def sigma2_path(kernel: FeedbackKernel, returns: Sequence[float]) -> np.ndarray:
    """
    Vectorised :func:`sigma2` at every date ``t = q..T-1`` of a return series.
    """
    r = as_float_array(returns, "returns", KernelError)
    if r.size <= kernel.q:
        raise KernelError(f"Need more than q={kernel.q} returns, got {r.size}.")

    windows = lag_matrix(r, kernel.q)
    out = np.empty(windows.shape[0])
    for chunk in iter_chunks(windows.shape[0]):
        w = windows[chunk]
        out[chunk] = kernel.s2 + w @ kernel.L + np.sum((w @ kernel.K) * w, axis=1)

    return out


class PositivityReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    definite: bool
    margin: Optional[float]
    """``4 s2 - L^T K^-1 L``, or ``None`` when the quadratic test is inapplicable."""

    min_eigenvalue: float
    quadratic_test_applicable: bool


def positivity_check(
    kernel: FeedbackKernel, tol: float = EIGENVALUE_TOLERANCE
) -> PositivityReport:
    """
    Whether ``sigma2`` stays non-negative for every window.
    """
    eigenvalues = np.linalg.eigvalsh(kernel.K)
    eigen_ok = bool(eigenvalues.min() >= -tol)
    scale = max(1.0, float(np.max(np.abs(eigenvalues))))
    singular = bool(np.min(np.abs(eigenvalues)) <= tol * scale)
    if not kernel.has_leverage:
        margin: Optional[float] = 4 * kernel.s2
        applicable = True
    elif singular:
        logger.warning("Singular K with non-zero leverage: quadratic positivity test skipped.")
        margin = None
        applicable = False
    else:
        margin = float(4 * kernel.s2 - kernel.L @ np.linalg.solve(kernel.K, kernel.L))
        applicable = True

    definite = eigen_ok and (margin is None or margin >= 0)
    return PositivityReport(
        definite=definite,
        margin=margin,
        min_eigenvalue=float(eigenvalues.min()),
        quadratic_test_applicable=applicable,
    )


class DesignMatrix(BaseModel):
    """
    Linear map from family parameters onto the upper triangle of ``K``
    (diagonal included), columns ordered as ``numpy.triu_indices(q)``.
    """

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    q: int
    matrix: np.ndarray
    """Shape ``(n_params, q (q + 1) / 2)``."""

    labels: tuple[str, ...]
    diagonal_rows: np.ndarray
    """Boolean mask of rows that are free diagonal parameters."""

    @property
    def n_params(self) -> int:
        return self.matrix.shape[0]

    @property
    def upper_indices(self) -> tuple[np.ndarray, np.ndarray]:
        return np.triu_indices(self.q)

    def apply(self, params: Sequence[float]) -> np.ndarray:
        """
        Symmetric ``K`` for a parameter vector.
        """
        values = np.asarray(params, dtype=float) @ self.matrix
        return symmetrize_upper(values, self.q)

    def off_diagonal_part(self) -> "DesignMatrix":
        """
        The rows that are not free diagonal parameters, restricted to the
        off-diagonal entries of ``K``.
        """
        rows, cols = self.upper_indices
        matrix = self.matrix * (rows != cols)
        keep = ~self.diagonal_rows & np.any(matrix != 0, axis=1)
        return DesignMatrix(
            q=self.q,
            matrix=matrix[keep],
            labels=tuple(label for label, k in zip(self.labels, keep) if k),
            diagonal_rows=np.zeros(int(keep.sum()), dtype=bool),
        )


def symmetrize_upper(values: np.ndarray, q: int) -> np.ndarray:
    rows, cols = np.triu_indices(q)
    matrix = np.zeros((q, q))
    matrix[rows, cols] = values
    matrix[cols, rows] = values
    return matrix


def _upper_column(q: int) -> np.ndarray:
    """
    ``column[a, b]`` is the design column of the (unordered) pair ``a, b``.
    """
    rows, cols = np.triu_indices(q)
    column = np.zeros((q, q), dtype=int)
    column[rows, cols] = np.arange(rows.size)
    column[cols, rows] = np.arange(rows.size)
    return column


def family_design_matrix(spec: FamilySpec, q: Optional[int] = None) -> DesignMatrix:
    """
    Linearise a family: ``DesignMatrix.apply(spec.flat_params())`` equals
    ``build_from_spec(spec).K``.
    """
    q = spec.q if q is None else q
    if q != spec.q:
        spec = FamilySpec(family=spec.family, q=q, components=spec.components, scales=spec.scales)

    if spec.family == FamilyTag.FIGARCH_DIAG:
        raise KernelError("FIGARCH-diag is non-linear in its parameters and has no design matrix.")

    column = _upper_column(q)
    rows: list[np.ndarray] = []
    labels: list[str] = []
    diagonal_rows: list[bool] = []

    def add(label: str, entries: list[tuple[int, int, float]], is_diag: bool = False):
        row = np.zeros(q * (q + 1) // 2)
        for a, b, weight in entries:
            row[column[a, b]] += weight

        rows.append(row)
        labels.append(label)
        diagonal_rows.append(is_diag)

    def add_diagonal(name: str):
        for tau in range(q):
            add(f"{name}({tau + 1})", [(tau, tau, 1.0)], is_diag=True)

    def add_off(component: FamilyTag, prefix: str = ""):
        if component == FamilyTag.TWO_SCALE:
            for ell in range(q - 1):
                add(f"{prefix}g2({ell + 1})", [(ell, ell + 1, 1.0)])

        elif component == FamilyTag.BB:
            for ell in range(2, q + 1):
                entries = [(a, b, 1.0) for a in range(ell) for b in range(a + 1, ell)]
                add(f"{prefix}g_bb({ell})", entries)

        elif component == FamilyTag.ZUMBACH:
            for ell in range(1, q // 2 + 1):
                entries = [
                    (a - 1, b - 1, 0.5)
                    for a in range(1, ell + 1)
                    for b in range(ell + 1, 2 * ell + 1)
                ]
                add(f"{prefix}g_z({ell})", entries)

        elif component == FamilyTag.LONG_TREND:
            for ell in range(1, q):
                add(f"{prefix}g_lt({ell})", [(0, ell, 0.5)])

    family = spec.family
    if family == FamilyTag.ARCH:
        add_diagonal("k")

    elif family == FamilyTag.TWO_SCALE:
        add_diagonal("g1")
        for ell in range(q - 1):
            add(f"g2({ell + 1})", [(ell, ell, 1.0), (ell + 1, ell + 1, 1.0), (ell, ell + 1, 1.0)])

    elif family == FamilyTag.MULTI_SCALE:
        for ell in range(1, (spec.scales or 1) + 1):
            for start in range(q - ell + 1):
                entries = [
                    (a, b, 1.0)
                    for a in range(start, start + ell)
                    for b in range(a, start + ell)
                ]
                add(f"g{ell}({start + 1})", entries, is_diag=ell == 1)

    elif family == FamilyTag.BB:
        for ell in range(1, q + 1):
            entries = [(a, b, 1.0) for a in range(ell) for b in range(a, ell)]
            add(f"g_bb({ell})", entries)

    elif family == FamilyTag.BB_MIXED:
        add_diagonal("diag")
        add_off(FamilyTag.BB)

    elif family in (FamilyTag.ZUMBACH, FamilyTag.LONG_TREND):
        add_diagonal("diag")
        add_off(family)

    elif family == FamilyTag.COMPOSITE:
        add_diagonal("diag")
        for component in spec.components:
            add_off(component, prefix=f"{component.value}.")

    elif family == FamilyTag.UNCONSTRAINED:
        add_diagonal("k")
        for a in range(q):
            for b in range(a + 1, q):
                add(f"K({a + 1},{b + 1})", [(a, b, 1.0)])

    else:
        raise KernelError(f"Unknown family '{family}'.")

    return DesignMatrix(
        q=q,
        matrix=frozen(np.array(rows)),
        labels=tuple(labels),
        diagonal_rows=frozen(np.array(diagonal_rows, dtype=bool)),
    )


def write_kernel(
    kernel: FeedbackKernel, path: Union[str, Path], provenance: Optional[Provenance] = None
) -> Path:
    """
    Serialise a kernel as rows ``q``, ``s2``, ``L`` and then ``q`` rows of ``K``.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf8") as fout:
        if provenance is not None:
            provenance.write(fout)

        fout.write(f"q,{kernel.q}\n")
        fout.write(f"s2,{format_float(kernel.s2)}\n")
        fout.write(",".join(["L", *(format_float(v) for v in kernel.L)]) + "\n")
        for row in kernel.K:
            fout.write(",".join(["K", *(format_float(v) for v in row)]) + "\n")

    return path


def read_kernel(path: Union[str, Path]) -> FeedbackKernel:
    path = Path(path)
    if not path.is_file():
        raise KernelError(f"Kernel file '{path}' not found.")

    rows = [
        line.strip().split(",")
        for line in path.read_text(encoding="utf8").splitlines()
        if line.strip() and not line.startswith("#")
    ]
    try:
        header = {row[0]: row[1:] for row in rows if row[0] in ("q", "s2", "L")}
        q = int(header["q"][0])
        s2 = float(header["s2"][0])
        leverage = [float(v) for v in header["L"]]
        matrix = [[float(v) for v in row[1:]] for row in rows if row[0] == "K"]
    except (KeyError, IndexError, ValueError) as err:
        raise KernelError(f"Malformed kernel file '{path}': {err}") from err

    if len(matrix) != q:
        raise KernelError(f"Kernel file '{path}' declares q={q} but has {len(matrix)} K rows.")

    return FeedbackKernel(q=q, s2=s2, L=leverage, K=matrix)
