"""Joint value/output compression.

Per head the value path is ``W_o,i W_v,i`` (d' x d). The slices
``G_i = W_o,i W_v,i C^{1/2}`` share a left plane ``B_o`` (d' x r_o) and a right
plane ``A_v'`` (r_v x d); each head keeps ``A_o,i`` (r_o x d_h) and ``B_v,i``
(d_h x r_v).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from ._validation import as_vector, check_count
from .attention import DEFAULT_ITERS, hosvd_alternation
from .calibration import CalibrationStats
from .errors import ArgumentError, DegenerateInputError
from .linalg import psd_inv_sqrt, psd_sqrt
from .local import Junction, pivot_columns

__all__ = [
    "ValueHeads",
    "VoFactors",
    "ContractionOrder",
    "ContractionPlan",
    "joint_vo",
    "vo_bias_update",
    "vo_contraction_plan",
    "vo_apply",
    "vo_params",
]


@dataclass
class ValueHeads:
    """``Wv`` (h, d_h, d), ``Wo`` (h, d', d_h): head ``i`` owns columns
    ``i*d_h:(i+1)*d_h`` of the output projection."""

    Wv: np.ndarray
    Wo: np.ndarray
    bv: np.ndarray | None = None
    bo: np.ndarray | None = None

    def __post_init__(self):
        self.Wv = np.asarray(self.Wv, dtype=np.float64)
        self.Wo = np.asarray(self.Wo, dtype=np.float64)
        if self.Wv.ndim != 3 or self.Wo.ndim != 3:
            raise ArgumentError("Wv and Wo must be stacks of head matrices")
        if self.Wo.shape[0] != self.Wv.shape[0] or self.Wo.shape[2] != self.Wv.shape[1]:
            raise ArgumentError(f"head shapes {self.Wv.shape} and {self.Wo.shape} disagree")
        if self.bv is not None:
            self.bv = np.asarray(self.bv, dtype=np.float64).reshape(self.h, self.d_h)
        if self.bo is not None:
            self.bo = as_vector(self.bo, "bo", size=self.d_out)

    @classmethod
    def from_projections(cls, Wv, Wo, h: int, bv=None, bo=None):
        Wv = np.asarray(Wv, dtype=np.float64)
        Wo = np.asarray(Wo, dtype=np.float64)
        h = check_count(h, "h")
        if Wv.shape[0] % h or Wo.shape[1] != Wv.shape[0]:
            raise ArgumentError("value/output projections do not split into heads")
        d_h = Wv.shape[0] // h
        return cls(
            Wv.reshape(h, d_h, -1),
            Wo.reshape(Wo.shape[0], h, d_h).transpose(1, 0, 2),
            bv,
            bo,
        )

    @property
    def h(self):
        return self.Wv.shape[0]

    @property
    def d_h(self):
        return self.Wv.shape[1]

    @property
    def d(self):
        return self.Wv.shape[2]

    @property
    def d_out(self):
        return self.Wo.shape[1]

    def products(self) -> np.ndarray:
        return np.einsum("hoe,hex->hox", self.Wo, self.Wv)


@dataclass
class VoFactors:
    Bo: np.ndarray  # d' x r_o
    Av: np.ndarray  # r_v x d
    Ao: np.ndarray  # h x r_o x d_h
    Bv: np.ndarray  # h x d_h x r_v
    bo_hat: np.ndarray | None = None
    loss_trace: list = field(default_factory=list)
    stored_params: int = 0

    @property
    def h(self):
        return self.Ao.shape[0]

    @property
    def r_o(self):
        return self.Bo.shape[1]

    @property
    def r_v(self):
        return self.Av.shape[0]

    def products(self) -> np.ndarray:
        """``W_o,i W_v,i`` per head as implied by the factors."""
        return np.einsum("or,hre,hes,sx->hox", self.Bo, self.Ao, self.Bv, self.Av, optimize=True)

    def value_weight(self) -> np.ndarray:
        return self.Bv.reshape(-1, self.r_v) @ self.Av

    def output_weight(self) -> np.ndarray:
        return self.Bo @ np.concatenate(list(self.Ao), axis=1)


def vo_params(d, d_out, d_h, h, r_v, r_o, block_identity=False) -> int:
    n = d_out * r_o + r_v * d + h * d_h * (r_o + r_v)
    if block_identity:
        n -= r_o * r_o + r_v * r_v + d_h * d_h * h
    return n


def joint_vo(
    heads: ValueHeads,
    stats: CalibrationStats,
    r_v: int,
    r_o: int,
    iters: int = DEFAULT_ITERS,
    *,
    centered: bool = False,
    junction="dense",
) -> VoFactors:
    """Alternating HOSVD of the whitened value/output slices.

    ``A_v'`` starts from the top right-singular plane of ``sum G_i^T G_i``;
    the trace records ``sum ||G_i||^2 - ||B_o^T G_i A_v'^T||^2``.
    """
    if stats.dim != heads.d:
        raise ArgumentError("statistics dimension does not match the value heads")
    r_v = check_count(r_v, "r_v", low=1, high=heads.d)
    r_o = check_count(r_o, "r_o", low=1, high=heads.d_out)
    iters = check_count(iters, "iters", low=0)
    junction = Junction.parse(junction)
    C = stats.whitening_matrix(centered)
    root = psd_sqrt(C)
    root_inv = psd_inv_sqrt(C)
    WvP = heads.Wv @ root
    G = np.einsum("hoe,hex->hox", heads.Wo, WvP)
    # transpose so the first alternation mode is the value plane
    Av_w, BoT, trace = hosvd_alternation(G.transpose(0, 2, 1), r_v, r_o, iters)
    Bo = BoT.T
    Ao = np.einsum("or,hoe->hre", Bo, heads.Wo)
    Bv = np.einsum("hex,rx->her", WvP, Av_w)
    Av = Av_w @ root_inv
    stored = vo_params(heads.d, heads.d_out, heads.d_h, heads.h, r_v, r_o)
    if junction.saves_block:
        perm = pivot_columns(Av)
        J = Av[:, perm[:r_v]]
        Av = np.linalg.solve(J, Av)
        Av[:, perm[:r_v]] = np.eye(r_v)
        Bv = Bv @ J
        perm = pivot_columns(Bo.T)
        J = Bo[perm[:r_o]]
        Bo = np.linalg.solve(J.T, Bo.T).T
        Bo[perm[:r_o]] = np.eye(r_o)
        Ao = J @ Ao
        stored -= r_v * r_v + r_o * r_o
        if r_v >= heads.d_h:
            for i in range(heads.h):
                try:
                    cols = pivot_columns(Bv[i])
                except DegenerateInputError:
                    continue
                Ji = Bv[i][:, cols[: heads.d_h]].copy()
                if np.linalg.cond(Ji) > 1e10:
                    continue
                Bv[i] = np.linalg.solve(Ji, Bv[i])
                Bv[i][:, cols[: heads.d_h]] = np.eye(heads.d_h)
                Ao[i] = Ao[i] @ Ji
                stored -= heads.d_h * heads.d_h
    return VoFactors(Bo=Bo, Av=Av, Ao=Ao, Bv=Bv, loss_trace=list(trace), stored_params=int(stored))


def vo_bias_update(heads: ValueHeads, factors: VoFactors, stats: CalibrationStats) -> np.ndarray:
    """Output bias for the compressed value path (value biases become zero).

    ``b_o + sum_i W_o,i (W_v,i mu + b_v,i) - sum_i W_hat_o,i W_hat_v,i mu``.
    Attention rows sum to one, so a constant value offset passes straight to
    the output and can be folded into ``b_o``.
    """
    if factors.h != heads.h or factors.Bo.shape[0] != heads.d_out:
        raise ArgumentError("factors do not match the value heads")
    if stats.dim != heads.d:
        raise ArgumentError("statistics dimension does not match the value heads")
    bo = np.zeros(heads.d_out) if heads.bo is None else heads.bo
    bv = np.zeros((heads.h, heads.d_h)) if heads.bv is None else heads.bv
    mu = stats.mu
    exact = np.einsum("hoe,he->o", heads.Wo, np.einsum("hex,x->he", heads.Wv, mu) + bv)
    approx = np.einsum("hox,x->o", factors.products(), mu)
    b_hat = bo + exact - approx
    factors.bo_hat = b_hat
    return b_hat


class ContractionOrder(str, enum.Enum):
    VALUE_SIDE = "value-side"
    OUTPUT_SIDE = "output-side"


@dataclass(frozen=True)
class ContractionPlan:
    order: ContractionOrder
    flops_value_side: int
    flops_output_side: int


def vo_contraction_plan(d, d_out, d_h, h, l, r_v, r_o) -> ContractionPlan:
    """Multiply-add counts for the two evaluation orders of the latent value path.

    Value side: ``l d r_v + h d_h l r_v + h d_h l^2 + h d_h l r_o + h d' l r_o``.
    Output side: ``l d r_v + r_v l^2 + h d_h l r_v + h d_h l r_o + d' l r_o``.
    Ties go to the value side.
    """
    d, d_out, d_h, h, l, r_v, r_o = (
        check_count(v, n)
        for v, n in zip((d, d_out, d_h, h, l, r_v, r_o), ("d", "d_out", "d_h", "h", "l", "r_v", "r_o"))
    )
    value = l * d * r_v + h * d_h * l * r_v + h * d_h * l * l + h * d_h * l * r_o + h * d_out * l * r_o
    output = l * d * r_v + r_v * l * l + h * d_h * l * r_v + h * d_h * l * r_o + d_out * l * r_o
    order = ContractionOrder.OUTPUT_SIDE if output < value else ContractionOrder.VALUE_SIDE
    return ContractionPlan(order, int(value), int(output))


def vo_apply(factors: VoFactors, X, maps, order=ContractionOrder.VALUE_SIDE) -> np.ndarray:
    """Attention output ``sum_i W_o,i W_v,i X S_i^T`` (+ ``bo_hat``) through the
    factors. ``maps`` holds the (h, l, l) row-stochastic attention weights."""
    order = ContractionOrder(order)
    X = np.asarray(X, dtype=np.float64)
    maps = np.asarray(maps, dtype=np.float64)
    Z = factors.Av @ X
    if order is ContractionOrder.VALUE_SIDE:
        V = np.einsum("her,rl->hel", factors.Bv, Z)
        V = np.einsum("hel,hml->hem", V, maps)
        Y = np.einsum("or,hre,hem->hom", factors.Bo, factors.Ao, V, optimize=True).sum(axis=0)
    else:
        Zs = np.einsum("rl,hml->hrm", Z, maps)
        V = np.einsum("hse,her,hrm->sm", factors.Ao, factors.Bv, Zs, optimize=True)
        Y = factors.Bo @ V
    if factors.bo_hat is not None:
        Y = Y + factors.bo_hat[:, None]
    return Y
