"""
In-sample / out-of-sample evaluation of competing estimators over repeated
calibration/test splits of a panel.
"""

from collections.abc import Callable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from typing import Optional

import numpy as np
import pandas as pd
from ape.logging import logger
from pydantic import BaseModel, ConfigDict
from tqdm import tqdm  # type: ignore[import-untyped]

from ape_qarch._utils import DEFAULT_NU, DEFAULT_R_CUT, SplitMode
from ape_qarch.correlators import compute_panel_correlations, truncate_returns
from ape_qarch.data import Split, make_splits
from ape_qarch.estimate.gmm import AmplitudeMode, GMMProblem, gmm_calibrate, gmm_diagonal
from ape_qarch.estimate.ml import StartPoint, akaike, ml_calibrate, pool_loglik, restricted_ml
from ape_qarch.exceptions import EstimationError, KernelError
from ape_qarch.kernel import FamilySpec, FeedbackKernel, family_from_name

SUMMARY_COLUMNS = [
    "estimator",
    "n_params",
    "is_mean",
    "oos_mean",
    "is_std",
    "oos_std",
    "n_is",
    "n_oos",
    "bias",
    "is_corrected",
    "oos_corrected",
    "aic",
]


class FittedModel(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    kernel: FeedbackKernel
    n_params: int
    """Number of calibrated parameters ``M``."""


Estimator = Callable[[list[np.ndarray]], FittedModel]


class EstimatorSettings(BaseModel):
    q_diag: int
    q_off: int
    nu: float = DEFAULT_NU
    max_lag_d: Optional[int] = None
    r_cut: float = DEFAULT_R_CUT
    amplitude: AmplitudeMode = AmplitudeMode.ABSOLUTE
    threads: int = 1


class HarnessReport(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    summary: pd.DataFrame
    """One row per estimator."""

    samplings: pd.DataFrame
    """One row per (sampling, estimator)."""

    n_samplings: int
    mode: SplitMode


def bias(n_params: int, n_points: int) -> float:
    """
    Expected in-sample excess (and out-of-sample deficit) ``M / 2n`` per point.
    """
    return n_params / (2 * n_points)


def _problem(pool: list[np.ndarray], settings: EstimatorSettings, off: bool) -> GMMProblem:
    correlations = compute_panel_correlations(
        pool,
        max_lag=settings.q_diag,
        max_lag_d=settings.max_lag_d,
        threads=settings.threads,
    )
    truncated = None
    if off and settings.q_off > 1:
        truncated = compute_panel_correlations(
            [truncate_returns(r, settings.r_cut) for r in pool],
            max_lag=settings.q_diag,
            max_lag_d=settings.max_lag_d or settings.q_off,
            threads=settings.threads,
        )

    return GMMProblem(
        correlations=correlations,
        truncated=truncated,
        q_diag=settings.q_diag,
        q_off=settings.q_off if off else 0,
        amplitude=settings.amplitude,
    )


def _n_off(q_off: int) -> int:
    return q_off * (q_off - 1) // 2


def make_estimator(name: str, settings: EstimatorSettings) -> Estimator:
    """
    Standard estimators by name: ``arch`` (GMM diagonal only), ``gmm``
    (diagonal and off-diagonal GMM), ``ml`` and ``ml-zero`` (one-step ML from
    the GMM or zero off-diagonal) and ``family:<Tag>`` (restricted ML).
    """
    q = settings.q_diag
    diagonal_params = 2 * q + 1

    def arch(pool: list[np.ndarray]) -> FittedModel:
        result = gmm_diagonal(_problem(pool, settings, off=False))
        return FittedModel(kernel=result.kernel(), n_params=diagonal_params)

    def gmm(pool: list[np.ndarray]) -> FittedModel:
        result = gmm_calibrate(_problem(pool, settings, off=True))
        n_params = diagonal_params + _n_off(settings.q_off)
        return FittedModel(kernel=result.kernel(), n_params=n_params)

    def ml(start: StartPoint) -> Estimator:
        def run(pool: list[np.ndarray]) -> FittedModel:
            base = gmm(pool).kernel
            result = ml_calibrate(base, pool, settings.q_off, settings.nu, start=start)
            return FittedModel(kernel=result.kernel, n_params=diagonal_params + result.n_params)

        return run

    def family(spec: FamilySpec) -> Estimator:
        def run(pool: list[np.ndarray]) -> FittedModel:
            base = arch(pool).kernel
            result = restricted_ml(spec, pool, base, settings.nu)
            return FittedModel(kernel=result.kernel, n_params=diagonal_params + result.n_params)

        return run

    if name == "arch":
        return arch

    elif name == "gmm":
        return gmm

    elif name == "ml":
        return ml(StartPoint.GMM)

    elif name == "ml-zero":
        return ml(StartPoint.ZERO)

    elif name.startswith("family:"):
        try:
            spec = family_from_name(name.removeprefix("family:"), q)
        except KernelError as err:
            raise EstimationError(f"Bad estimator '{name}': {err}") from err

        return family(spec)

    raise EstimationError(f"Unknown estimator '{name}'.")


def _evaluate(
    split: Split,
    pool: Sequence[np.ndarray],
    estimators: Mapping[str, Estimator],
    nu: float,
    q: int,
) -> list[dict]:
    calibration = split.select(pool, "calibration", min_length=q + 2)
    test = split.select(pool, "test", min_length=q + 2)
    if not calibration or not test:
        raise EstimationError(f"Split {split.index} leaves an empty calibration or test set.")

    rows = []
    for name, estimator in estimators.items():
        fitted = estimator(calibration)
        rows.append(
            {
                "sampling": split.index,
                "estimator": name,
                "n_params": fitted.n_params,
                "loglik_is": pool_loglik(fitted.kernel, calibration, nu),
                "loglik_oos": pool_loglik(fitted.kernel, test, nu),
                "n_is": sum(len(r) - fitted.kernel.q for r in calibration),
                "n_oos": sum(len(r) - fitted.kernel.q for r in test),
            }
        )

    return rows


def is_oos_harness(
    pool: Sequence[Sequence[float]],
    split_mode: SplitMode,
    n_samplings: int,
    estimators: Mapping[str, Estimator],
    q: int,
    nu: float = DEFAULT_NU,
    seed: Optional[int] = None,
    threads: int = 1,
    progress: bool = False,
) -> HarnessReport:
    """
    Calibrate every estimator on each split and score it in and out of sample.

    Args:
        pool (Sequence[Sequence[float]]): Return series on a common date axis.
        split_mode (SplitMode): ``random-halves`` over series or ``block-dates``.
        n_samplings (int): Number of splits.
        estimators (Mapping[str, Estimator]): Named calibration functions.
        q (int): Kernel horizon (block-date splits need at least ``2 q`` dates).
        nu (float): Student degrees of freedom of the likelihood.
        seed (Optional[int]): Master seed of the split sequence.
        threads (int): Concurrent samplings.
        progress (bool): Show a progress bar.

    Returns:
        :class:`HarnessReport`
    """
    series = [np.asarray(r, dtype=float) for r in pool]
    if not series:
        raise EstimationError("Empty panel.")

    n_dates = min(r.shape[0] for r in series)
    splits = make_splits(len(series), n_dates, split_mode, n_samplings, seed, q)
    logger.info(
        f"IS/OOS harness: {n_samplings} samplings ({split_mode}), "
        f"estimators {', '.join(estimators)}."
    )

    def run(split: Split) -> list[dict]:
        return _evaluate(split, series, estimators, nu, q)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as executor:
        results = executor.map(run, splits)
        batches = tqdm(results, total=len(splits), disable=not progress)
        rows = [row for batch in batches for row in batch]

    samplings = pd.DataFrame(rows)
    return HarnessReport(
        summary=summarize(samplings),
        samplings=samplings,
        n_samplings=n_samplings,
        mode=SplitMode(split_mode),
    )


def summarize(samplings: pd.DataFrame) -> pd.DataFrame:
    """
    Mean and dispersion of the per-sampling likelihoods, with the ``M / 2n``
    bias corrections and the per-point AIC.
    """
    records = []
    for name, group in samplings.groupby("estimator", sort=False):
        n_params = int(group["n_params"].iloc[0])
        n_is = float(group["n_is"].mean())
        is_mean = float(group["loglik_is"].mean())
        oos_mean = float(group["loglik_oos"].mean())
        ddof = 1 if len(group) > 1 else 0
        shift = bias(n_params, int(n_is))
        records.append(
            {
                "estimator": name,
                "n_params": n_params,
                "is_mean": is_mean,
                "oos_mean": oos_mean,
                "is_std": float(group["loglik_is"].std(ddof=ddof)),
                "oos_std": float(group["loglik_oos"].std(ddof=ddof)),
                "n_is": n_is,
                "n_oos": float(group["n_oos"].mean()),
                "bias": shift,
                "is_corrected": is_mean - shift,
                "oos_corrected": oos_mean + shift,
                "aic": akaike(is_mean, n_params, int(n_is)),
            }
        )

    return pd.DataFrame(records, columns=SUMMARY_COLUMNS)
