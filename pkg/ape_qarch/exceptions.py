from enum import Enum
from typing import Optional

from ape.exceptions import ApeException


class QarchError(ApeException):
    """
    An error raised in the QARCH toolkit.
    """


class KernelError(QarchError):
    """
    Raised when a feedback kernel or family specification is invalid.
    """


class SimulationError(QarchError):
    """
    Raised when a path cannot be generated, such as a negative volatility
    under the ``reject`` policy or an overflow from an unstable kernel.
    """


class CorrelationError(QarchError):
    """
    Raised when correlation estimators receive incompatible inputs.
    """


class FitError(QarchError):
    """
    Raised when a nonlinear fit does not converge or has nothing to fit.
    """


class EstimationError(QarchError):
    """
    Raised during kernel calibration (GMM or maximum likelihood).
    """


class IndefiniteHessianError(EstimationError):
    """
    Raised when a Newton step is requested from a point where the
    likelihood Hessian is not negative definite.
    """

    def __init__(self, eigenvalues, message: Optional[str] = None):
        self.eigenvalues = eigenvalues
        largest = max(eigenvalues) if len(eigenvalues) else float("nan")
        super().__init__(
            message or f"Hessian not negative definite (largest eigenvalue {largest})."
        )


class DataError(QarchError):
    """
    Raised when input market data is malformed.
    """

    def __init__(self, message: str, row: Optional[int] = None, path: Optional[str] = None):
        self.row = row
        self.path = path
        prefix = ""
        if path:
            prefix = f"{path}: "
        if row is not None:
            prefix = f"{prefix}row {row}: "

        super().__init__(f"{prefix}{message}")


class ConfigError(QarchError):
    """
    Raised when a run configuration fails validation.
    """


class Stage(str, Enum):
    """
    Pipeline stages named in CLI error reports.
    """

    LOAD = "load"
    CORRELATIONS = "correlations"
    GMM = "gmm"
    LIKELIHOOD = "likelihood"
    HARNESS = "harness"
    PROFILE = "profile"
    FAMILIES = "families"
    MOMENTS = "moments"
    FRONTIER = "frontier"
    SPECTRUM = "spectrum"
    TRI = "tri"
    AFTERSHOCK = "aftershock"
    SIMULATE = "simulate"

    def __str__(self) -> str:
        return self.value


class StageError(QarchError):
    """
    Wraps a failure with the name of the pipeline stage it occurred in.
    """

    def __init__(self, stage: Stage, err: Exception):
        self.stage = stage
        self.base_err = err
        super().__init__(f"Stage '{stage}' failed: {err}")


class MomentError(QarchError):
    """
    Raised for arguments outside the domain of a moment law, or when a
    frontier search cannot bracket its root.
    """
