import os
from pathlib import Path
from typing import Any, Optional, Union

import yaml
from ape.api import PluginConfig
from pydantic import Field, ValidationError, field_validator, model_validator

from ape_qarch._utils import (
    DEFAULT_NU,
    DEFAULT_R_CUT,
    ESTIMATOR_NAMES,
    ResidualLaw,
    SplitMode,
)
from ape_qarch.estimate.gmm import AmplitudeMode
from ape_qarch.estimate.ml import DerivativeMethod
from ape_qarch.exceptions import ConfigError, KernelError
from ape_qarch.kernel import family_from_name
from ape_qarch.simulate import NegativeSigma2Policy

OUTPUT_DIR_ENV_VAR = "QARCH_OUTPUT_DIR"
COMMANDS = ("simulate", "calibrate", "analyze", "splits")


def default_output_dir() -> Path:
    return Path(os.environ.get(OUTPUT_DIR_ENV_VAR, "qarch_output"))


class SimulateConfig(PluginConfig):
    model_config = {"extra": "forbid"}

    kernel_file: Optional[Path] = None
    """
    Kernel file as written by ``calibrate``. When unset, the kernel is the
    diagonal ``k`` with baseline ``s2``, or the long-memory reference kernel
    when ``k`` is empty too.
    """

    k: list[float] = []
    s2: float = 1.0
    reference_q: int = 512
    """Horizon of the long-memory reference kernel."""

    length: int = Field(default=10_000, gt=0)
    """Number of emitted days."""

    burn_in: Optional[int] = None
    residual: ResidualLaw = ResidualLaw.GAUSSIAN
    n_series: int = Field(default=1, ge=1)
    negative_sigma2_policy: NegativeSigma2Policy = NegativeSigma2Policy.CLAMP
    allow_unstable: bool = False

    intraday: bool = False
    """Also simulate intraday prices and report the Rogers-Satchell volatility."""

    bins: int = 100
    intraday_residual: ResidualLaw = ResidualLaw.GAUSSIAN
    intraday_nu: float = 4.0
    """Degrees of freedom of Student intraday increments."""

    @field_validator("bins")
    @classmethod
    def validate_bins(cls, value):
        if value < 4:
            raise ConfigError(f"Intraday simulation needs at least 4 bins, got {value}.")

        return value

    @field_validator("intraday_nu")
    @classmethod
    def validate_intraday_nu(cls, value):
        if value <= 2:
            raise ConfigError(f"Intraday nu must exceed 2, got {value}.")

        return value


class CalibrateConfig(PluginConfig):
    model_config = {"extra": "forbid"}

    manifest: Optional[Path] = None
    """
    Text file listing one OHLC CSV per line, relative to the manifest.
    """

    q_diag: int = Field(default=10, ge=1)
    q_off: int = Field(default=5, ge=0)
    max_lag: Optional[int] = None
    """Largest two-point lag; defaults to ``q_diag``."""

    max_lag_d: Optional[int] = None
    r_cut: float = Field(default=DEFAULT_R_CUT, gt=0)
    amplitude: AmplitudeMode = AmplitudeMode.ABSOLUTE
    smooth: bool = False
    """Feed GMM the fitted leverage and amplitude forms instead of the raw estimates."""

    derivatives: DerivativeMethod = DerivativeMethod.FINITE_DIFFERENCE
    market_adjust: bool = True
    """Divide returns by the leave-one-out market volatility before standardizing."""

    include_c1: bool = False
    """Remove the linear conditional mean before scoring the likelihood."""

    estimators: list[str] = ["arch", "gmm", "ml"]
    """
    Compared in the in-sample / out-of-sample harness. Restricted families use
    ``family:<Tag>``, e.g. ``family:Composite:TwoScale+LongTrend``.
    """

    families: list[str] = ["TwoScale", "BB", "Zumbach", "LongTrend"]
    """Families fitted on the whole panel, one parameter CSV each."""

    split_mode: SplitMode = SplitMode.RANDOM_HALVES
    n_samplings: int = Field(default=10, ge=1)
    index_mode: bool = False
    """Single series with block-date splits."""

    profile_q: list[int] = []
    """Horizons of the baseline profile ``s2(q)``; empty means ``1..q_diag``."""

    @model_validator(mode="after")
    def validate_horizons(self):
        if self.q_off > self.q_diag:
            raise ConfigError(f"q_off ({self.q_off}) must not exceed q_diag ({self.q_diag}).")

        elif self.max_lag is not None and self.max_lag < self.q_diag:
            raise ConfigError(f"max_lag ({self.max_lag}) must cover q_diag ({self.q_diag}).")

        elif self.index_mode and self.split_mode != SplitMode.BLOCK_DATES:
            raise ConfigError("Index mode needs split_mode 'block-dates'.")

        for name in self.estimators:
            if name in ESTIMATOR_NAMES:
                continue

            elif not name.startswith("family:"):
                raise ConfigError(
                    f"Unknown estimator '{name}'. "
                    f"Use one of {', '.join(ESTIMATOR_NAMES)} or 'family:<Tag>'."
                )

            _check_family(name.removeprefix("family:"), self.q_diag)

        for name in self.families:
            _check_family(name, self.q_diag)

        return self


class AnalyzeConfig(PluginConfig):
    model_config = {"extra": "forbid"}

    kernel_file: Optional[Path] = None
    manifest: Optional[Path] = None
    path_file: Optional[Path] = None
    """Simulated path CSV as written by ``simulate``."""

    residual: ResidualLaw = ResidualLaw.GAUSSIAN
    alphas: list[float] = [round(1.0 + 0.1 * i, 1) for i in range(21)]
    frontier_q: list[float] = [16, 64, 256, 1024, float("inf")]
    max_tau: int = Field(default=50, ge=1)
    n_boot: int = Field(default=200, ge=0)
    block: int = Field(default=50, ge=1)
    thresholds: list[float] = [3.0, 4.0, 5.0, 6.0]
    """Jump thresholds, in trailing RMS returns, of the aftershock curve."""

    omega_variance: float = Field(default=0.0, ge=0)
    omega_ar: float = Field(default=0.0, ge=0, lt=1)
    """Stochastic baseline whose shift of the time-reversal asymmetry is reported."""


class SplitsConfig(PluginConfig):
    model_config = {"extra": "forbid"}

    manifest: Optional[Path] = None
    n_series: Optional[int] = None
    n_dates: Optional[int] = None
    """Shape used when no manifest is given."""

    split_mode: SplitMode = SplitMode.RANDOM_HALVES
    n_samplings: int = Field(default=10, ge=1)
    q: int = Field(default=0, ge=0)


def _check_family(name: str, q: int):
    try:
        family_from_name(name, q)
    except KernelError as err:
        raise ConfigError(str(err)) from err


class QarchConfig(PluginConfig):
    """
    The ``qarch:`` section of ``ape-config.yaml``.

    Usage example::

        qarch:
          threads: 4
          seed: 7
          calibrate:
            q_diag: 20
            q_off: 10
            estimators: ["arch", "gmm", "ml", "family:TwoScale"]

    """

    output_dir: Path = Field(default_factory=default_output_dir)
    """
    Where every command writes its artifacts. Defaults to ``$QARCH_OUTPUT_DIR``.
    """

    threads: int = Field(default=1, ge=1)
    seed: Optional[int] = None
    nu: float = DEFAULT_NU
    """Student degrees of freedom of residuals and likelihood."""

    simulate: SimulateConfig = SimulateConfig()
    calibrate: CalibrateConfig = CalibrateConfig()
    analyze: AnalyzeConfig = AnalyzeConfig()
    splits: SplitsConfig = SplitsConfig()

    @field_validator("nu")
    @classmethod
    def validate_nu(cls, value):
        if value <= 2:
            raise ConfigError(f"nu must exceed 2, got {value}.")

        return value

    def run_config(self, command: str) -> dict:
        """
        The global keys plus the section of ``command``, echoed in every output header.
        """
        if command not in COMMANDS:
            raise ConfigError(f"Unknown command '{command}'.")

        data = self.model_dump(mode="json", include={"output_dir", "threads", "seed", "nu"})
        data["command"] = command
        data[command] = getattr(self, command).model_dump(mode="json")
        return data


def _merge(base: dict, update: dict) -> dict:
    merged = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value

    return merged


def read_config_file(path: Union[str, Path]) -> dict:
    """
    Load the ``qarch:`` mapping of a YAML file. A file without that key is
    taken to be the mapping itself.
    """
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf8")) or {}
    except (OSError, yaml.YAMLError) as err:
        raise ConfigError(f"Unable to read config file '{path}': {err}") from err

    if not isinstance(data, dict):
        raise ConfigError(f"Config file '{path}' must hold a mapping.")

    data = data.get("qarch", data)
    if not isinstance(data, dict):
        raise ConfigError(f"'qarch' in '{path}' must be a mapping.")

    return data


def load_config(
    base: Optional[Union[QarchConfig, dict]] = None,
    config_file: Optional[Union[str, Path]] = None,
    overrides: Optional[dict[str, Any]] = None,
) -> QarchConfig:
    """
    Merge, later wins: defaults, ``base`` (the project ``qarch:`` section),
    ``config_file`` and ``overrides`` (command-line flags, ``None`` meaning unset).
    """
    if isinstance(base, QarchConfig):
        data = base.model_dump(mode="json", exclude_unset=True)
    else:
        data = dict(base or {})

    if config_file is not None:
        data = _merge(data, read_config_file(config_file))

    if overrides:
        data = _merge(data, _drop_unset(overrides))

    try:
        return QarchConfig.model_validate(data)
    except ValidationError as err:
        raise ConfigError(f"Invalid configuration:\n{err}") from err


def _drop_unset(values: dict) -> dict:
    cleaned: dict = {}
    for key, value in values.items():
        if isinstance(value, dict):
            if nested := _drop_unset(value):
                cleaned[key] = nested

        elif value is not None and value != ():
            cleaned[key] = list(value) if isinstance(value, tuple) else value

    return cleaned
