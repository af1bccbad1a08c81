"""Activation statistics and pre-conditioning matrices.

Activations follow the column convention: ``X`` has shape ``(d, l)`` with one
token per column.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from ._validation import as_matrix, check_real
from .errors import ArgumentError
from .linalg import psd_sqrt

DEFAULT_LAMBDA_REL = 1e-4
DEFAULT_L1_ALPHA = 0.5
_DIAG_FLOOR = 1e-12


class Preconditioner(str, enum.Enum):
    IDENTITY = "identity"
    DIAG_HESSIAN = "hessian"
    DIAG_L1 = "l1"
    DIAG_L2 = "l2"
    COVARIANCE = "cov"
    ROOT_COVARIANCE = "rootcov"

    @classmethod
    def parse(cls, value) -> "Preconditioner":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            names = ", ".join(k.value for k in cls)
            raise ArgumentError(f"unknown preconditioner {value!r}; choose from {names}") from None


@dataclass(frozen=True)
class CalibrationStats:
    """Damped second-moment statistics of one layer input.

    ``C = X X^T + lam I`` and ``C0 = (X - mu 1^T)(X - mu 1^T)^T + lam I``;
    neither is divided by the sample length.
    """

    C: np.ndarray
    C0: np.ndarray
    mu: np.ndarray
    sample_len: int
    lam: float
    lambda_rel: float = DEFAULT_LAMBDA_REL

    @property
    def dim(self) -> int:
        return self.C.shape[0]

    def whitening_matrix(self, centered: bool = False) -> np.ndarray:
        return self.C0 if centered else self.C


def _damping(gram: np.ndarray, lambda_rel: float) -> float:
    tr = float(np.trace(gram))
    if tr == 0.0:
        return lambda_rel
    return lambda_rel * tr / gram.shape[0]


def estimate_stats(X, lambda_rel: float = DEFAULT_LAMBDA_REL) -> CalibrationStats:
    """Statistics of the calibration window ``X`` (d x l).

    The ridge is trace-relative: ``lam = lambda_rel * tr(X X^T) / d``
    (``lam = lambda_rel`` when ``X`` is all zeros).
    """
    X = as_matrix(X, "X")
    lambda_rel = check_real(lambda_rel, "lambda_rel", low=0.0)
    d, l = X.shape
    gram = X @ X.T
    lam = _damping(gram, lambda_rel)
    mu = X.mean(axis=1)
    Xc = X - mu[:, None]
    eye = np.eye(d)
    C = gram + lam * eye
    C0 = Xc @ Xc.T + lam * eye
    return CalibrationStats(
        C=0.5 * (C + C.T),
        C0=0.5 * (C0 + C0.T),
        mu=mu,
        sample_len=l,
        lam=lam,
        lambda_rel=lambda_rel,
    )


def make_preconditioner(
    stats: CalibrationStats,
    kind="rootcov",
    raw_X=None,
    *,
    alpha: float = DEFAULT_L1_ALPHA,
    centered: bool = False,
) -> np.ndarray:
    """Pre-conditioning matrix ``P`` applied as ``svd(W @ P)``.

    ``centered`` switches the second-moment matrix from ``C`` to ``C0``, which
    is what bias-corrected compression needs.
    """
    kind = Preconditioner.parse(kind)
    C = stats.whitening_matrix(centered)
    d = C.shape[0]
    if kind is Preconditioner.IDENTITY:
        return np.eye(d)
    if kind is Preconditioner.COVARIANCE:
        return C.copy()
    if kind is Preconditioner.ROOT_COVARIANCE:
        return psd_sqrt(C)
    if kind is Preconditioner.DIAG_HESSIAN:
        hinv = np.diag(np.linalg.inv(C))
        return np.diag(np.maximum(hinv, _DIAG_FLOOR) ** -0.5)
    if kind is Preconditioner.DIAG_L2:
        # undamped diagonal of X X^T
        diag = np.diag(C) - stats.lam
        return np.diag(np.sqrt(np.maximum(diag, _DIAG_FLOOR)))
    # DIAG_L1
    if raw_X is None:
        raise ArgumentError("the l1 preconditioner needs the raw activations (raw_X)")
    raw_X = as_matrix(raw_X, "raw_X")
    if raw_X.shape[0] != d:
        raise ArgumentError(f"raw_X has {raw_X.shape[0]} rows, expected {d}")
    alpha = check_real(alpha, "alpha")
    if centered:
        raw_X = raw_X - raw_X.mean(axis=1, keepdims=True)
    norms = np.maximum(np.abs(raw_X).sum(axis=1), _DIAG_FLOOR)
    return np.diag(np.maximum(norms**alpha, _DIAG_FLOOR))


def additive_pe_adjust(stats: CalibrationStats, E, raw_X) -> CalibrationStats:
    """Re-estimate statistics for inputs carrying an additive positional
    embedding ``E`` (same shape as the calibration window)."""
    E = as_matrix(E, "E")
    raw_X = as_matrix(raw_X, "raw_X")
    if E.shape != raw_X.shape:
        raise ArgumentError(f"E shape {E.shape} does not match raw_X shape {raw_X.shape}")
    if raw_X.shape[0] != stats.dim:
        raise ArgumentError("raw_X row count does not match the statistics dimension")
    return estimate_stats(raw_X + E, stats.lambda_rel)
