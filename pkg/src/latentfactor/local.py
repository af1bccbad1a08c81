"""Single-layer activation-aware compression.

A weight ``W`` (d_out x d_in) is replaced by ``B @ A`` with ``A`` (r x d_in) and
``B`` (d_out x r) obtained from the truncated SVD of ``W @ P``. The
``Junction`` gauge decides how the singular values and an invertible r x r
matrix are split between the two factors; it never changes ``B @ A``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg

from ._validation import as_matrix, as_vector, check_count
from .calibration import CalibrationStats
from .errors import ArgumentError, DegenerateInputError, NumericError
from .linalg import EPS, truncated_svd

PIVOT_TOL = 1e-10
LU_TOL = 1e-10


class Junction(str, enum.Enum):
    LEFT_SINGULAR = "left"
    RIGHT_SINGULAR = "right"
    SYMMETRIC = "symmetric"
    BLOCK_IDENTITY_A = "block-identity"
    BLOCK_IDENTITY_B = "block-identity-b"
    LU = "lu"

    @classmethod
    def parse(cls, value) -> "Junction":
        if isinstance(value, cls):
            return value
        aliases = {"dense": cls.LEFT_SINGULAR, "block_identity": cls.BLOCK_IDENTITY_A}
        value = str(value).lower()
        if value in aliases:
            return aliases[value]
        try:
            return cls(value)
        except ValueError:
            names = ", ".join(["dense"] + [k.value for k in cls])
            raise ArgumentError(f"unknown junction {value!r}; choose from {names}") from None

    @property
    def saves_block(self) -> bool:
        return self in (Junction.BLOCK_IDENTITY_A, Junction.BLOCK_IDENTITY_B, Junction.LU)


def lowrank_params(d_out: int, d_in: int, r: int, junction=Junction.LEFT_SINGULAR) -> int:
    """Stored parameters of a rank-``r`` factor: ``r(d_out + d_in)``, minus ``r^2``
    for the block-identity and LU gauges."""
    junction = Junction.parse(junction)
    n = r * (d_out + d_in)
    return n - r * r if junction.saves_block else n


@dataclass
class LowRankFactor:
    """Compressed linear map ``x -> B @ A @ x + bias``.

    ``U``, ``S`` and ``Vp`` keep the whitened SVD (``Vp = V P^+``) so the factor
    can be re-gauged later. ``col_perm[:r]`` lists the columns of ``A`` that hold
    the identity block (block-identity and LU forms); ``row_perm[:r]`` does the
    same for the rows of ``B``.
    """

    B: np.ndarray
    A: np.ndarray
    bias: np.ndarray | None = None
    junction: Junction = Junction.LEFT_SINGULAR
    col_perm: np.ndarray | None = None
    row_perm: np.ndarray | None = None
    whitened_loss: float = 0.0
    U: np.ndarray | None = field(default=None, repr=False)
    S: np.ndarray | None = field(default=None, repr=False)
    Vp: np.ndarray | None = field(default=None, repr=False)

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.B.shape[0], self.A.shape[1]

    @property
    def stored_params(self) -> int:
        return lowrank_params(*self.shape, self.rank, self.junction)

    def product(self) -> np.ndarray:
        return self.B @ self.A

    def __call__(self, X) -> np.ndarray:
        out = self.B @ (self.A @ X)
        if self.bias is not None:
            out = out + self.bias[:, None]
        return out


def activation_loss(W, BA, C) -> float:
    """``||(W - BA) C^{1/2}||^2`` evaluated as ``tr[(W - BA) C (W - BA)^T]``."""
    D = np.asarray(W, dtype=np.float64) - np.asarray(BA, dtype=np.float64)
    return float(np.einsum("ij,jk,ik->", D, C, D))


def _invert_preconditioner(P: np.ndarray) -> np.ndarray:
    U, s, Vh = np.linalg.svd(P)
    if s.size == 0 or s[-1] <= max(P.shape) * EPS * s[0]:
        raise NumericError("pre-conditioner is singular")
    return (Vh.T / s) @ U.T


def compress_local(W, P, r: int) -> LowRankFactor:
    """Whitened truncated SVD: ``U S V = svd_r(W P)``, ``B = U S``, ``A = V P^-1``.

    With ``P = C^{1/2}`` this is the rank-r minimiser of the activation loss.
    """
    W = as_matrix(W, "W")
    P = as_matrix(P, "P")
    d_out, d_in = W.shape
    if P.shape != (d_in, d_in):
        raise ArgumentError(f"P must be {d_in}x{d_in}, got {P.shape}")
    r = check_count(r, "r", low=1, high=min(d_out, d_in))
    P_inv = _invert_preconditioner(P)
    WP = W @ P
    svd = truncated_svd(WP, r)
    full_s = np.linalg.svd(WP, compute_uv=False)
    Vp = svd.V @ P_inv
    return LowRankFactor(
        B=svd.U * svd.S,
        A=Vp,
        junction=Junction.LEFT_SINGULAR,
        whitened_loss=float(np.sum(full_s[r:] ** 2)),
        U=svd.U,
        S=svd.S,
        Vp=Vp,
    )


def bias_update_local(W, factor: LowRankFactor, stats: CalibrationStats, b) -> np.ndarray:
    """Bias that absorbs the mean activation error: ``b + (W - BA) mu``."""
    W = as_matrix(W, "W")
    if W.shape != factor.shape:
        raise ArgumentError(f"W shape {W.shape} does not match factor shape {factor.shape}")
    b = as_vector(b, "b", size=W.shape[0])
    if stats.mu.shape[0] != W.shape[1]:
        raise ArgumentError("statistics dimension does not match W")
    return b + (W - factor.product()) @ stats.mu


def pivot_columns(M: np.ndarray, tol: float = PIVOT_TOL) -> np.ndarray:
    """Column permutation whose first ``k`` entries index an invertible k x k
    block of the k-row matrix ``M`` (greedy column-pivoted elimination)."""
    work = np.array(M, dtype=np.float64)
    k, n = work.shape
    scale = np.max(np.abs(work)) if work.size else 0.0
    chosen: list[int] = []
    free = np.ones(n, dtype=bool)
    for i in range(k):
        row = np.where(free, np.abs(work[i]), -1.0)
        j = int(np.argmax(row))
        if row[j] <= tol * scale:
            raise DegenerateInputError(
                f"no invertible {k}x{k} pivot block (row {i} exhausted)"
            )
        chosen.append(j)
        free[j] = False
        if i + 1 < k:
            work[i + 1 :] -= np.outer(work[i + 1 :, j] / work[i, j], work[i])
    rest = [c for c in range(n) if free[c]]
    return np.array(chosen + rest, dtype=np.intp)


def _canonical(factor: LowRankFactor) -> tuple[np.ndarray, np.ndarray]:
    if factor.U is not None:
        return factor.U * factor.S, factor.Vp
    return factor.B, factor.A


def apply_junction(factor: LowRankFactor, form) -> LowRankFactor:
    """Re-gauge ``factor`` into ``form``; ``B @ A`` is preserved."""
    form = Junction.parse(form)
    r = factor.rank
    B0, A0 = _canonical(factor)
    common = dict(col_perm=None, row_perm=None, junction=form)

    if form in (Junction.LEFT_SINGULAR, Junction.RIGHT_SINGULAR, Junction.SYMMETRIC):
        if factor.U is None:
            raise ArgumentError(f"{form.value} gauge needs the SVD basis of the factor")
        U, S, Vp = factor.U, factor.S, factor.Vp
        if form is Junction.LEFT_SINGULAR:
            B, A = U * S, Vp
        elif form is Junction.RIGHT_SINGULAR:
            B, A = U * (S > 0), S[:, None] * Vp
        else:
            root = np.sqrt(S)
            B, A = U * root, root[:, None] * Vp
        return replace(factor, B=B, A=A, **common)

    if form is Junction.BLOCK_IDENTITY_A:
        return _block_identity_a(factor, B0, A0)

    if form is Junction.BLOCK_IDENTITY_B:
        perm = pivot_columns(B0.T)
        J_inv = B0[perm[:r]]
        B = np.linalg.solve(J_inv.T, B0.T).T
        B[perm[:r]] = np.eye(r)
        A = J_inv @ A0
        return replace(factor, B=B, A=A, row_perm=perm, col_perm=None, junction=form)

    # LU: lower-triangular (unit diagonal) pivot block in B, upper-triangular in A.
    try:
        cols = pivot_columns(A0)
        rows = pivot_columns(B0.T)
    except DegenerateInputError:
        return _block_identity_a(factor, B0, A0)
    M11 = B0[rows[:r]] @ A0[:, cols[:r]]
    p, low, up = scipy.linalg.lu(M11)
    d = np.abs(np.diag(up))
    if d.min() <= LU_TOL * d.max():
        return _block_identity_a(factor, B0, A0)
    order = np.argmax(p, axis=0)  # p.T @ M11 = low @ up
    sel = rows[:r][order]
    rows = np.concatenate([sel, rows[r:]])
    J = np.linalg.solve(B0[sel], low)
    B = B0 @ J
    A = np.linalg.solve(J, A0)
    B[sel] = np.tril(low)
    A[:, cols[:r]] = np.triu(up)
    return replace(factor, B=B, A=A, row_perm=rows, col_perm=cols, junction=Junction.LU)


def _block_identity_a(factor, B0, A0) -> LowRankFactor:
    r = A0.shape[0]
    perm = pivot_columns(A0)
    J = A0[:, perm[:r]]
    A = np.linalg.solve(J, A0)
    A[:, perm[:r]] = np.eye(r)
    B = B0 @ J
    return replace(
        factor, B=B, A=A, col_perm=perm, row_perm=None, junction=Junction.BLOCK_IDENTITY_A
    )


def compress_joint_qkv(Wq, Wk, Wv, P, r: int) -> LowRankFactor:
    """One shared compression matrix for the stacked ``[Wq; Wk; Wv]``."""
    blocks = [as_matrix(w, name) for w, name in ((Wq, "Wq"), (Wk, "Wk"), (Wv, "Wv"))]
    if len({b.shape[1] for b in blocks}) != 1:
        raise ArgumentError("Wq, Wk and Wv must share the input dimension")
    return compress_local(np.vstack(blocks), P, r)


def compress_split_head(W, head_count: int, P, r_per_head: int) -> list[LowRankFactor]:
    """Independent whitened SVD per head slice (rows) of ``W``."""
    W = as_matrix(W, "W")
    head_count = check_count(head_count, "head_count")
    if W.shape[0] % head_count:
        raise ArgumentError(f"{W.shape[0]} rows are not divisible by {head_count} heads")
    return [compress_local(Wi, P, r_per_head) for Wi in np.split(W, head_count, axis=0)]


def split_head_product(factors: list[LowRankFactor]) -> np.ndarray:
    return np.vstack([f.product() for f in factors])
