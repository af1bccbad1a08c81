"""Dense linear-algebra kernels: truncated SVD, PSD square root, top singular
subspaces and a tolerance-controlled pseudo-inverse.

Everything runs in float64. Singular vectors follow a deterministic sign
convention (largest-magnitude entry of each left vector is positive) so that
results are reproducible across runs and platforms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import as_matrix, check_count, check_square
from .errors import InputError

EPS = np.finfo(np.float64).eps


@dataclass(frozen=True)
class SvdResult:
    """Rank-r SVD ``U @ diag(S) @ V`` with ``U`` (m, r) and ``V`` (r, n)."""

    U: np.ndarray
    S: np.ndarray
    V: np.ndarray

    @property
    def rank(self) -> int:
        return self.S.shape[0]

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.S) @ self.V


def _fix_signs(U: np.ndarray, V: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    idx = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[idx, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    return U * signs, V * signs[:, None]


def _row_signs(R: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(R), axis=1)
    signs = np.sign(R[np.arange(R.shape[0]), idx])
    signs[signs == 0] = 1.0
    return R * signs[:, None]


def full_svd(M) -> SvdResult:
    M = as_matrix(M, "M")
    U, S, Vh = np.linalg.svd(M, full_matrices=False)
    U, Vh = _fix_signs(U, Vh)
    return SvdResult(U, S, Vh)


def truncated_svd(M, r: int) -> SvdResult:
    """Best rank-``r`` approximation of ``M`` in Frobenius norm.

    The residual ``||M - U S V||^2`` equals the sum of the squared discarded
    singular values.
    """
    M = as_matrix(M, "M")
    r = check_count(r, "r", low=1, high=min(M.shape))
    res = full_svd(M)
    return SvdResult(res.U[:, :r], res.S[:r], res.V[:r])


def svd_residual(M, r: int) -> float:
    """Sum of squared singular values of ``M`` beyond the leading ``r``."""
    s = np.linalg.svd(as_matrix(M, "M"), compute_uv=False)
    return float(np.sum(s[r:] ** 2))


def check_symmetric(C: np.ndarray, name: str = "C", rtol: float = 1e-8) -> np.ndarray:
    check_square(C, name)
    scale = max(np.linalg.norm(C), np.finfo(float).tiny)
    if np.linalg.norm(C - C.T) > rtol * scale:
        raise InputError(f"{name} is not symmetric within relative tolerance {rtol:g}")
    return 0.5 * (C + C.T)


def psd_eigh(C, name: str = "C", neg_tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric PSD matrix with tiny negative
    eigenvalues clamped to zero."""
    C = check_symmetric(as_matrix(C, name), name)
    w, Q = np.linalg.eigh(C)
    scale = np.max(np.abs(w)) if w.size else 0.0
    if w.size and w[0] < -neg_tol * scale:
        raise InputError(f"{name} is indefinite (smallest eigenvalue {w[0]:.3e})")
    return np.clip(w, 0.0, None), Q


def psd_sqrt(C) -> np.ndarray:
    """Symmetric PSD square root ``S`` with ``S @ S == C``."""
    w, Q = psd_eigh(C)
    # eigenvalues at rounding level would otherwise turn into sqrt(eps) noise
    if w.size:
        w = np.where(w > w.size * EPS * w.max(), w, 0.0)
    S = (Q * np.sqrt(w)) @ Q.T
    return 0.5 * (S + S.T)


def psd_inv_sqrt(C, tol: float | None = None) -> np.ndarray:
    """Pseudo-inverse of the PSD square root of ``C``."""
    w, Q = psd_eigh(C)
    if tol is None:
        tol = C.shape[0] * EPS
    cut = tol * (w.max() if w.size else 0.0)
    inv = np.zeros_like(w)
    keep = w > cut
    inv[keep] = 1.0 / np.sqrt(w[keep])
    S = (Q * inv) @ Q.T
    return 0.5 * (S + S.T)


def _is_symmetric(M: np.ndarray) -> bool:
    if M.shape[0] != M.shape[1]:
        return False
    scale = max(np.linalg.norm(M), np.finfo(float).tiny)
    return np.linalg.norm(M - M.T) <= 1e-12 * scale


def right_singular(M, r: int) -> np.ndarray:
    """Orthonormal rows spanning the top-``r`` right-singular subspace of ``M``.

    Symmetric PSD inputs (the Gram sums built during alternation) go through
    ``eigh`` which is more accurate than a general SVD for that case.
    """
    M = as_matrix(M, "M")
    r = check_count(r, "r", low=1, high=M.shape[1])
    if _is_symmetric(M):
        Ms = 0.5 * (M + M.T)
        w, Q = np.linalg.eigh(Ms)
        scale = np.max(np.abs(w)) if w.size else 0.0
        if w[0] >= -1e-10 * scale:
            order = np.argsort(-w, kind="stable")[:r]
            return _row_signs(Q[:, order].T.copy())
    _, _, Vh = np.linalg.svd(M, full_matrices=True)
    return _row_signs(Vh[:r].copy())


def pinv(M, tol: float | None = None) -> np.ndarray:
    """Moore-Penrose pseudo-inverse.

    Singular values at or below ``tol * sigma_max`` are treated as zero;
    the default ``tol`` is ``max(rows, cols) * eps``.
    """
    M = as_matrix(M, "M", allow_empty=True)
    if tol is None:
        tol = max(M.shape) * EPS
    elif tol < 0:
        raise InputError("tol must be non-negative")
    if M.size == 0:
        return np.zeros(M.shape[::-1])
    U, S, Vh = np.linalg.svd(M, full_matrices=False)
    smax = S[0] if S.size else 0.0
    keep = S > tol * smax
    if not np.any(keep):
        return np.zeros(M.shape[::-1])
    return (Vh[keep].T / S[keep]) @ U[:, keep].T


def orthonormal_rows(rng: np.random.Generator, r: int, d: int) -> np.ndarray:
    """Random ``r x d`` matrix with orthonormal rows (Haar distributed)."""
    Q, R = np.linalg.qr(rng.standard_normal((d, r)))
    return (Q * np.sign(np.diag(R))).T
