"""Sparse residuals and chunk-wise uniform quantisation.

``fista_sparse`` fits ``D`` in ``W ~ BA + D`` under the activation metric with
an l1 penalty; the proximal step is soft shrinkage.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._validation import as_matrix, check_count, check_real
from .errors import ArgumentError
from .linalg import psd_eigh


@dataclass
class SparseResidual:
    D: np.ndarray
    objective_trace: list = field(default_factory=list)
    best_trace: list = field(default_factory=list)

    @property
    def nnz(self) -> int:
        return int(np.count_nonzero(self.D))

    @property
    def objective(self) -> float:
        return self.best_trace[-1] if self.best_trace else float("nan")


def soft_shrink(x, alpha: float) -> np.ndarray:
    """``sign(x) * max(|x| - alpha, 0)``, the prox of ``alpha * ||.||_1``."""
    alpha = check_real(alpha, "alpha", low=0.0)
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.maximum(np.abs(x) - alpha, 0.0)


def hard_shrink_topk(D, kappa: int) -> np.ndarray:
    """Keep the ``kappa`` largest-magnitude entries (earlier row-major index wins
    ties) and zero the rest."""
    D = np.asarray(D, dtype=np.float64)
    kappa = check_count(kappa, "kappa", low=0, high=D.size)
    flat = D.ravel()
    keep = np.argsort(-np.abs(flat), kind="stable")[:kappa]
    out = np.zeros_like(flat)
    out[keep] = flat[keep]
    return out.reshape(D.shape)


def top_eigenvalue(C, tol: float = 1e-8, max_iter: int = 10_000) -> float:
    """Largest eigenvalue of a PSD matrix by power iteration."""
    d = C.shape[0]
    v = np.ones(d) / np.sqrt(d)
    lam = 0.0
    for _ in range(max_iter):
        w = C @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        new = float(v @ w)
        v = w / norm
        if abs(new - lam) <= tol * max(abs(new), 1e-300):
            lam = new
            break
        lam = new
    # the Rayleigh quotient converges from below; never undershoot the true bound
    return max(lam, float(np.linalg.norm(C @ v)))


def sparse_objective(D, R, C, lam) -> float:
    """``tr[(D - R) C (D - R)^T] + lam ||D||_1`` with ``R = W - BA``."""
    E = D - R
    return float(np.einsum("ij,jk,ik->", E, C, E) + lam * np.abs(D).sum())


def fista_sparse(W, BA, C, lam: float, iters: int = 100, D0=None) -> SparseResidual:
    """Accelerated proximal gradient for the sparse residual.

    Step ``1 / (2 L)`` with ``L`` the top eigenvalue of ``C``; the returned
    ``D`` is the best iterate seen (plain FISTA is not monotone).
    """
    W = as_matrix(W, "W")
    BA = as_matrix(BA, "BA")
    if W.shape != BA.shape:
        raise ArgumentError(f"W {W.shape} and BA {BA.shape} differ in shape")
    C = as_matrix(C, "C")
    if C.shape != (W.shape[1], W.shape[1]):
        raise ArgumentError(f"C must be {W.shape[1]}x{W.shape[1]}")
    psd_eigh(C, "C")  # rejects asymmetric or indefinite metrics
    C = 0.5 * (C + C.T)
    lam = check_real(lam, "lambda", low=0.0)
    iters = check_count(iters, "iters")
    R = W - BA
    L = top_eigenvalue(C)
    if L <= 0.0:
        return SparseResidual(np.zeros_like(R), [0.0], [0.0])
    step = 1.0 / (2.0 * L)
    D = np.zeros_like(R) if D0 is None else as_matrix(D0, "D0").copy()
    Yk = D.copy()
    t = 1.0
    best = D.copy()
    best_f = sparse_objective(D, R, C, lam)
    trace, best_trace = [best_f], [best_f]
    for _ in range(iters):
        grad = 2.0 * (Yk - R) @ C
        D_new = soft_shrink(Yk - step * grad, lam * step)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        Yk = D_new + ((t - 1.0) / t_new) * (D_new - D)
        D, t = D_new, t_new
        f = sparse_objective(D, R, C, lam)
        if f < best_f:
            best, best_f = D.copy(), f
        trace.append(f)
        best_trace.append(best_f)
    return SparseResidual(best, trace, best_trace)


def ista_sparse(W, BA, C, lam: float, iters: int) -> np.ndarray:
    """Plain proximal gradient (no momentum); a slow but simple reference."""
    R = as_matrix(W, "W") - as_matrix(BA, "BA")
    C = as_matrix(C, "C")
    step = 1.0 / (2.0 * np.linalg.eigvalsh(0.5 * (C + C.T))[-1])
    D = np.zeros_like(R)
    for _ in range(iters):
        D = soft_shrink(D - step * 2.0 * (D - R) @ C, lam * step)
    return D


def uniform_quantize(x, q: int, chunk: int):
    """Chunk-wise q-bit uniform quantisation (row-major chunks of ``chunk`` values).

    Returns the de-quantised array and an (n_chunks, 2) array of ``(min, max)``.
    A constant chunk is reproduced exactly.
    """
    if isinstance(q, bool) or not isinstance(q, (int, np.integer)) or q <= 0:
        raise ArgumentError(f"bit width must be a positive integer, got {q!r}")
    chunk = check_count(chunk, "chunk")
    x = np.asarray(x, dtype=np.float64)
    flat = x.ravel()
    levels = float(2**q - 1)
    out = np.empty_like(flat)
    n = -(-flat.size // chunk)
    params = np.zeros((n, 2))
    for k in range(n):
        seg = flat[k * chunk : (k + 1) * chunk]
        lo, hi = seg.min(), seg.max()
        params[k] = lo, hi
        if hi == lo:
            out[k * chunk : (k + 1) * chunk] = seg
            continue
        scale = (hi - lo) / levels
        codes = np.round((seg - lo) / scale)
        out[k * chunk : (k + 1) * chunk] = np.clip(codes * scale + lo, lo, hi)
    return out.reshape(x.shape), params
