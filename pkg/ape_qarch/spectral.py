"""
Eigen-analysis of the feedback matrix.
"""

from pathlib import Path
from typing import Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict

from ape_qarch._utils import Provenance, as_float_array, write_grid, write_table
from ape_qarch.exceptions import KernelError
from ape_qarch.kernel import FeedbackKernel

NEUTRAL_FRACTION = 1e-3


class SpectrumReport(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    eigenvalues: np.ndarray
    """Descending."""

    eigenvectors: np.ndarray
    """Column ``n`` pairs with ``eigenvalues[n]``; largest-magnitude component positive."""

    arch_reference: np.ndarray
    """Descending eigenvalues of the diagonal-only kernel."""

    neutral_count: int
    """Eigenvalues with ``|lambda| < 1e-3 lambda_max``."""

    def reconstruct(self) -> np.ndarray:
        return (self.eigenvectors * self.eigenvalues) @ self.eigenvectors.T

    def projections(self, window) -> np.ndarray:
        """
        ``<r|v_n>`` for every mode.
        """
        w = as_float_array(window, "window", KernelError, length=self.eigenvalues.shape[0])
        return w @ self.eigenvectors


def _sign_convention(vectors: np.ndarray) -> np.ndarray:
    pivots = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[pivots, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def eigendecompose(kernel: Union[FeedbackKernel, np.ndarray]) -> SpectrumReport:
    """
    Full spectrum of ``K`` in descending order.
    """
    K = kernel.K if isinstance(kernel, FeedbackKernel) else kernel
    K = as_float_array(K, "K", KernelError, ndim=2)
    if K.shape[0] != K.shape[1] or not np.allclose(K, K.T, rtol=0, atol=1e-12):
        raise KernelError("Eigen-analysis needs a symmetric matrix.")

    eigenvalues, eigenvectors = np.linalg.eigh(K)
    order = np.argsort(eigenvalues)[::-1]
    eigenvalues = eigenvalues[order]
    eigenvectors = _sign_convention(eigenvectors[:, order])
    reference = np.sort(np.diag(K))[::-1]
    largest = float(np.max(np.abs(eigenvalues))) if eigenvalues.size else 0.0
    neutral = int(np.sum(np.abs(eigenvalues) < NEUTRAL_FRACTION * largest))
    return SpectrumReport(
        eigenvalues=eigenvalues,
        eigenvectors=eigenvectors,
        arch_reference=reference,
        neutral_count=neutral,
    )


def mode_projection(window, v) -> float:
    """
    ``<r|v> = sum_tau v(tau) r_{t-tau}`` for a window ordered most recent first.
    """
    w = as_float_array(window, "window", KernelError)
    v = as_float_array(v, "v", KernelError)
    if w.shape != v.shape:
        raise KernelError(
            f"Window of length {w.shape[0]} does not match mode of length {v.shape[0]}."
        )

    return float(w @ v)


def rank_one_mode(kernel: Union[FeedbackKernel, np.ndarray]) -> tuple[float, np.ndarray, float]:
    """
    Closed-form eigenpair of a rank-one ``K``: ``lambda = trace K`` and
    ``|v(tau)| = sqrt(K(tau, tau) / trace K)``, signs taken from the row of the
    largest diagonal entry.

    Returns:
        tuple[float, np.ndarray, float]: ``lambda``, ``v`` and the relative
        Frobenius residual of ``K - lambda v v^T`` (zero for an exact rank-one kernel).
    """
    K = kernel.K if isinstance(kernel, FeedbackKernel) else kernel
    K = as_float_array(K, "K", KernelError, ndim=2)
    trace = float(np.trace(K))
    if trace == 0 or np.any(np.diag(K) / trace < 0):
        raise KernelError("Rank-one formula needs a nonzero trace and same-sign diagonal.")

    v = np.sqrt(np.diag(K) / trace)
    pivot = int(np.argmax(np.abs(np.diag(K))))
    v = v * np.where(K[pivot] * trace < 0, -1.0, 1.0)
    norm = float(np.linalg.norm(K))
    residual = float(np.linalg.norm(K - trace * np.outer(v, v))) / norm if norm else 0.0
    return trace, v, residual


def write_spectrum(
    report: SpectrumReport,
    directory: Union[str, Path],
    provenance: Optional[Provenance] = None,
) -> list[Path]:
    directory = Path(directory)
    columns = {
        "n": np.arange(1, report.eigenvalues.shape[0] + 1),
        "lambda": report.eigenvalues,
        "lambda_arch_reference": report.arch_reference,
    }
    return [
        write_table(directory / "spectrum.csv", columns, provenance),
        write_grid(directory / "eigenvectors.csv", report.eigenvectors, provenance),
    ]
