"""Joint query/key compression into multi-head latent attention.

All query heads share one compression ``A_q`` (r_q x d) and all key heads share
``A_k`` (r_k x d); each head keeps small up-projections ``B_q,i`` (d_h x r_q) and
``B_k,i`` (d_h x r_k). The pre-softmax score of head ``i`` becomes
``x^T A_q^T B_q,i^T B_k,i A_k x'``.

The subspaces come from an alternating higher-order SVD on the whitened slices
``G_i = (W_q,i P)^T (W_k,i P)``. Each half-step takes the top eigenvectors of a
Gram sum, which is the exact block minimiser, so the recorded loss never goes up.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from ._validation import as_matrix, check_count, check_real
from .calibration import CalibrationStats
from .errors import ArgumentError, DegenerateInputError
from .linalg import psd_inv_sqrt, psd_sqrt, right_singular
from .local import Junction, _invert_preconditioner, pivot_columns

DEFAULT_ITERS = 8
DEFAULT_WINDOW = 10
DEFAULT_THETA = 1e4
CONVERGENCE_RTOL = 1e-12


@dataclass
class AttentionHeads:
    """Per-head query/key projections.

    ``Wq`` has shape (h, d_h, d) and ``Wk`` (h_kv, d_h, d). Query head ``t``
    reads key head ``t // group_size``.
    """

    Wq: np.ndarray
    Wk: np.ndarray
    bq: np.ndarray | None = None
    bk: np.ndarray | None = None

    def __post_init__(self):
        self.Wq = np.asarray(self.Wq, dtype=np.float64)
        self.Wk = np.asarray(self.Wk, dtype=np.float64)
        if self.Wq.ndim != 3 or self.Wk.ndim != 3:
            raise ArgumentError("Wq and Wk must be stacks of head matrices (h, d_h, d)")
        if self.Wq.shape[1:] != self.Wk.shape[1:]:
            raise ArgumentError(
                f"query heads {self.Wq.shape[1:]} and key heads {self.Wk.shape[1:]} differ"
            )
        if self.h % self.h_kv:
            raise ArgumentError(f"{self.h} query heads not divisible by {self.h_kv} kv heads")
        for name, b, n in (("bq", self.bq, self.h), ("bk", self.bk, self.h_kv)):
            if b is not None:
                b = np.asarray(b, dtype=np.float64).reshape(n, self.d_h)
                setattr(self, name, b)
        if not (np.all(np.isfinite(self.Wq)) and np.all(np.isfinite(self.Wk))):
            raise ArgumentError("head weights contain non-finite entries")

    @classmethod
    def from_projections(cls, Wq, Wk, h: int, h_kv: int | None = None, bq=None, bk=None):
        """Split stacked ``(h*d_h, d)`` projection matrices into heads."""
        Wq = as_matrix(Wq, "Wq")
        Wk = as_matrix(Wk, "Wk")
        h = check_count(h, "h")
        h_kv = h if h_kv is None else check_count(h_kv, "h_kv")
        if Wq.shape[0] % h or Wk.shape[0] % h_kv:
            raise ArgumentError("projection rows are not divisible by the head count")
        d_h = Wq.shape[0] // h
        if Wk.shape[0] // h_kv != d_h:
            raise ArgumentError("query and key head dimensions differ")
        return cls(
            Wq.reshape(h, d_h, -1),
            Wk.reshape(h_kv, d_h, -1),
            None if bq is None else np.asarray(bq).reshape(h, d_h),
            None if bk is None else np.asarray(bk).reshape(h_kv, d_h),
        )

    @property
    def h(self) -> int:
        return self.Wq.shape[0]

    @property
    def h_kv(self) -> int:
        return self.Wk.shape[0]

    @property
    def d_h(self) -> int:
        return self.Wq.shape[1]

    @property
    def d(self) -> int:
        return self.Wq.shape[2]

    @property
    def group_size(self) -> int:
        return self.h // self.h_kv

    @property
    def has_bias(self) -> bool:
        return self.bq is not None and self.bk is not None

    def kv_index(self) -> np.ndarray:
        return np.arange(self.h) // self.group_size


@dataclass
class MlaFactors:
    """Latent attention factors; ``Bq`` is (h, d_h, r_q), ``Bk`` is (h_kv, d_h, r_k)."""

    Aq: np.ndarray
    Ak: np.ndarray
    Bq: np.ndarray
    Bk: np.ndarray
    bq_hat: np.ndarray | None = None
    bk_hat: np.ndarray | None = None
    per_head_junctions: list = field(default_factory=list)
    loss_trace: list = field(default_factory=list)
    stored_params: int = 0
    aq_perm: np.ndarray | None = None
    ak_perm: np.ndarray | None = None

    @property
    def r_q(self) -> int:
        return self.Aq.shape[0]

    @property
    def r_k(self) -> int:
        return self.Ak.shape[0]

    @property
    def h(self) -> int:
        return self.Bq.shape[0]

    @property
    def h_kv(self) -> int:
        return self.Bk.shape[0]

    @property
    def d_h(self) -> int:
        return self.Bq.shape[1]

    @property
    def group_size(self) -> int:
        return self.h // self.h_kv

    @property
    def final_loss(self) -> float:
        return self.loss_trace[-1] if self.loss_trace else float("nan")

    def query_weight(self) -> np.ndarray:
        """Dense ``(h*d_h, d)`` query projection implied by the factors."""
        return self.Bq.reshape(-1, self.r_q) @ self.Aq

    def key_weight(self) -> np.ndarray:
        return self.Bk.reshape(-1, self.r_k) @ self.Ak

    def slice_products(self) -> np.ndarray:
        """``W_q,i^T W_k,i`` per query head as implied by the factors."""
        kv = np.arange(self.h) // self.group_size
        Wq = np.einsum("hdr,rx->hdx", self.Bq, self.Aq)
        Wk = np.einsum("hdr,rx->hdx", self.Bk, self.Ak)[kv]
        return np.einsum("hdx,hdy->hxy", Wq, Wk)


def mla_params(d, d_h, h, r_q, r_k, h_kv=None, block_identity=False) -> int:
    """Stored parameters of latent QK factors.

    ``(r_q + r_k)(d + d_h h) - r_q^2 - r_k^2 - d_h^2 h`` with block-identity
    junctions (key heads counted once per kv group under GQA).
    """
    h_kv = h if h_kv is None else h_kv
    n = r_q * (d + d_h * h) + r_k * (d + d_h * h_kv)
    if block_identity:
        n -= r_q * r_q + r_k * r_k + d_h * d_h * h_kv
    return n


# -- alternating HOSVD ----------------------------------------------------------


def _slice_loss(G: np.ndarray, Aq: np.ndarray, Ak: np.ndarray, total: float) -> float:
    core = np.einsum("ax,nxy,by->nab", Aq, G, Ak, optimize=True)
    return float(total - np.sum(core * core))


def _pin(A: np.ndarray) -> np.ndarray:
    r, d = A.shape
    out = np.zeros((r + 1, d + 1))
    out[:r, :d] = A
    out[r, d] = 1.0
    return out


def _subspace(gram: np.ndarray, r: int, pinned: bool) -> np.ndarray:
    if pinned:
        return _pin(right_singular(gram[:-1, :-1], r))
    return right_singular(gram, r)


def hosvd_alternation(G, r_q: int, r_k: int, iters: int, *, pinned=False, init=None):
    """Alternating top-subspace updates on the slice stack ``G`` (n, dq, dk).

    With ``pinned`` the last coordinate of both modes is a fixed latent
    direction (used for the bias terms). Returns ``(Aq, Ak, loss_trace)``; the
    trace holds the loss after every half-step.
    """
    G = np.asarray(G, dtype=np.float64)
    total = float(np.sum(G * G))
    tol = CONVERGENCE_RTOL * max(total, np.finfo(float).tiny)
    if init is None:
        Aq = _subspace(np.einsum("nxy,nzy->xz", G, G, optimize=True), r_q, pinned)
    else:
        Aq = _pin(init) if pinned else np.asarray(init, dtype=np.float64)

    def k_step(Aq):
        T = np.einsum("ax,nxy->nay", Aq, G, optimize=True)
        return _subspace(np.einsum("nay,naz->yz", T, T, optimize=True), r_k, pinned)

    def q_step(Ak):
        T = np.einsum("nxy,by->nxb", G, Ak, optimize=True)
        return _subspace(np.einsum("nxb,nzb->xz", T, T, optimize=True), r_q, pinned)

    Ak = k_step(Aq)
    trace = [_slice_loss(G, Aq, Ak, total)]
    for _ in range(iters):
        Aq_new = q_step(Ak)
        loss_q = _slice_loss(G, Aq_new, Ak, total)
        if loss_q > trace[-1]:
            # ties in a degenerate spectrum can only cost rounding; keep the old plane
            Aq_new, loss_q = Aq, trace[-1]
        Ak_new = k_step(Aq_new)
        loss_k = _slice_loss(G, Aq_new, Ak_new, total)
        if loss_k > loss_q:
            Ak_new, loss_k = Ak, loss_q
        Aq, Ak = Aq_new, Ak_new
        prev = trace[-1]
        trace += [loss_q, loss_k]
        if prev - loss_k < tol:
            break
    if pinned:
        Aq, Ak = Aq[:-1, :-1], Ak[:-1, :-1]
    return Aq, Ak, trace


# -- gauges and assembly --------------------------------------------------------


def _check_ranks(heads: AttentionHeads, r_q, r_k, iters):
    r_q = check_count(r_q, "r_q", low=1, high=heads.d)
    r_k = check_count(r_k, "r_k", low=1, high=heads.d)
    iters = check_count(iters, "iters", low=0)
    if min(r_q, r_k) < heads.d_h:
        warnings.warn(
            f"latent rank below the head dimension {heads.d_h} limits every head",
            RuntimeWarning,
            stacklevel=3,
        )
    return r_q, r_k, iters


def _assemble(heads, Aq_w, Ak_w, Wq_w, Wk_w, right_q, right_k, trace, junction, biases=None):
    """Build factors from whitened planes.

    ``Aq_w``/``Ak_w`` have orthonormal rows in whitened coordinates,
    ``Wq_w``/``Wk_w`` are the whitened head weights and ``right_q``/``right_k``
    map the planes back to input coordinates.
    """
    junction = Junction.parse(junction)
    Bq = np.einsum("hdx,rx->hdr", Wq_w, Aq_w)
    Bk = np.einsum("hdx,rx->hdr", Wk_w, Ak_w)
    Aq = Aq_w @ right_q
    Ak = Ak_w @ right_k
    h, d_h = heads.h, heads.d_h
    d = heads.d
    r_q, r_k = Aq.shape[0], Ak.shape[0]
    stored = mla_params(d, d_h, h, r_q, r_k, heads.h_kv)
    junctions = [np.eye(d_h) for _ in range(heads.h_kv)]
    aq_perm = ak_perm = None
    bq_hat, bk_hat = biases if biases is not None else (heads.bq, heads.bk)
    bq_hat = None if bq_hat is None else np.array(bq_hat, dtype=np.float64)
    bk_hat = None if bk_hat is None else np.array(bk_hat, dtype=np.float64)
    if junction.saves_block:
        aq_perm = pivot_columns(Aq)
        J = Aq[:, aq_perm[:r_q]]
        Aq = np.linalg.solve(J, Aq)
        Aq[:, aq_perm[:r_q]] = np.eye(r_q)
        Bq = Bq @ J
        ak_perm = pivot_columns(Ak)
        J = Ak[:, ak_perm[:r_k]]
        Ak = np.linalg.solve(J, Ak)
        Ak[:, ak_perm[:r_k]] = np.eye(r_k)
        Bk = Bk @ J
        stored -= r_q * r_q + r_k * r_k
        kv = heads.kv_index()
        for g in range(heads.h_kv):
            if r_k < d_h:
                continue
            try:
                cols = pivot_columns(Bk[g])
            except DegenerateInputError:
                continue
            Ji = Bk[g][:, cols[:d_h]].copy()
            if np.linalg.cond(Ji) > 1e10:
                continue
            Bk[g] = np.linalg.solve(Ji, Bk[g])
            Bk[g][:, cols[:d_h]] = np.eye(d_h)
            if bk_hat is not None:
                bk_hat[g] = np.linalg.solve(Ji, bk_hat[g])
            for t in np.flatnonzero(kv == g):
                Bq[t] = Ji.T @ Bq[t]
                if bq_hat is not None:
                    bq_hat[t] = Ji.T @ bq_hat[t]
            junctions[g] = Ji
            stored -= d_h * d_h
    return MlaFactors(
        Aq=Aq,
        Ak=Ak,
        Bq=Bq,
        Bk=Bk,
        bq_hat=bq_hat,
        bk_hat=bk_hat,
        per_head_junctions=junctions,
        loss_trace=list(trace),
        stored_params=int(stored),
        aq_perm=aq_perm,
        ak_perm=ak_perm,
    )


def _slices(WqP: np.ndarray, WkP: np.ndarray, kv: np.ndarray) -> np.ndarray:
    return np.einsum("hdx,hdy->hxy", WqP, WkP[kv], optimize=True)


def joint_qk(
    heads: AttentionHeads,
    P,
    r_q: int,
    r_k: int,
    iters: int = DEFAULT_ITERS,
    *,
    junction="dense",
) -> MlaFactors:
    """Shared query/key compression by alternating HOSVD on ``(W_q P)^T (W_k P)``.

    Biases, if present, are carried over unchanged. Grouped-query heads
    (``h_kv < h``) are handled by pairing each query head with its kv head.
    """
    P = as_matrix(P, "P")
    if P.shape != (heads.d, heads.d):
        raise ArgumentError(f"P must be {heads.d}x{heads.d}, got {P.shape}")
    r_q, r_k, iters = _check_ranks(heads, r_q, r_k, iters)
    P_inv = _invert_preconditioner(P)
    WqP = heads.Wq @ P
    WkP = heads.Wk @ P
    G = _slices(WqP, WkP, heads.kv_index())
    Aq, Ak, trace = hosvd_alternation(G, r_q, r_k, iters)
    return _assemble(heads, Aq, Ak, WqP, WkP, P_inv, P_inv, trace, junction)


def joint_qk_gqa(heads: AttentionHeads, P, r_q, r_k, iters=DEFAULT_ITERS, *, junction="dense"):
    """Grouped-query variant; key factors are shared within each query group."""
    return joint_qk(heads, P, r_q, r_k, iters, junction=junction)


def joint_qk_attention_aware(
    heads: AttentionHeads, stats: CalibrationStats, r_q, r_k, iters=DEFAULT_ITERS, *, junction="dense"
) -> MlaFactors:
    """``joint_qk`` whitened by ``C^{1/2}``, which minimises the pre-softmax map
    error on the calibration activations."""
    return joint_qk(heads, psd_sqrt(stats.C), r_q, r_k, iters, junction=junction)


def joint_qk_bias_aware(
    heads: AttentionHeads, stats: CalibrationStats, r_q, r_k, iters=DEFAULT_ITERS, *, junction="dense"
) -> MlaFactors:
    """Joint QK compression that also refits the query/key biases.

    Work in centred coordinates ``[x - mu; 1]`` where the second moment is
    ``blockdiag(C0, l)``. The bias column becomes one extra latent direction
    pinned in both planes, so the alternation runs on augmented slices and the
    fitted biases are ``b + W mu - W C0 A^T A mu``.
    """
    if not heads.has_bias:
        raise ArgumentError("bias-aware compression needs query and key biases")
    r_q, r_k, iters = _check_ranks(heads, r_q, r_k, iters)
    if stats.dim != heads.d:
        raise ArgumentError("statistics dimension does not match the heads")
    root = psd_sqrt(stats.C0)
    root_inv = psd_inv_sqrt(stats.C0)
    sl = np.sqrt(stats.sample_len)
    mq = heads.Wq @ stats.mu + heads.bq
    mk = heads.Wk @ stats.mu + heads.bk
    Wq_aug = np.concatenate([heads.Wq @ root, sl * mq[:, :, None]], axis=2)
    Wk_aug = np.concatenate([heads.Wk @ root, sl * mk[:, :, None]], axis=2)
    G = _slices(Wq_aug, Wk_aug, heads.kv_index())
    Aq_w, Ak_w, trace = hosvd_alternation(G, r_q, r_k, iters, pinned=True)
    Aq = Aq_w @ root_inv
    Ak = Ak_w @ root_inv
    bq = mq - np.einsum("hdx,rx,r->hd", heads.Wq @ root, Aq_w, Aq @ stats.mu)
    bk = mk - np.einsum("hdx,rx,r->hd", heads.Wk @ root, Ak_w, Ak @ stats.mu)
    return _assemble(
        heads, Aq_w, Ak_w, heads.Wq @ root, heads.Wk @ root, root_inv, root_inv, trace,
        junction, biases=(bq, bk),
    )


def rope_rotation(d_h: int, offset, theta: float = DEFAULT_THETA) -> np.ndarray:
    """Rotary block rotation for a position (or position offset).

    Uses the half-split layout: coordinate ``i`` pairs with ``i + d_h/2`` and
    turns by ``offset * theta^(-2i/d_h)``. ``R(m).T @ R(n) == R(n - m)``.
    """
    d_h = check_count(d_h, "d_h")
    if d_h % 2:
        raise ArgumentError(f"rotary embedding needs an even head dimension, got {d_h}")
    theta = check_real(theta, "theta", low=0.0, strict=True)
    half = d_h // 2
    freq = theta ** (-2.0 * np.arange(half) / d_h)
    ang = float(offset) * freq
    c, s = np.cos(ang), np.sin(ang)
    R = np.zeros((d_h, d_h))
    i = np.arange(half)
    R[i, i] = c
    R[i + half, i + half] = c
    R[i, i + half] = -s
    R[i + half, i] = s
    return R


def rope_slices(heads: AttentionHeads, P, window: int, theta: float) -> np.ndarray:
    """Whitened slices ``P^T W_q,i^T R(-delta) W_k,i P`` for causal offsets
    ``delta = 0..window`` (keys never sit after their query)."""
    WqP = heads.Wq @ P
    WkP = heads.Wk[heads.kv_index()] @ P
    out = []
    for delta in range(window + 1):
        R = rope_rotation(heads.d_h, -delta, theta)
        out.append(np.einsum("hdx,de,hey->hxy", WqP, R, WkP, optimize=True))
    return np.concatenate(out, axis=0)


def joint_qk_rope(
    heads: AttentionHeads,
    stats: CalibrationStats,
    r_q,
    r_k,
    iters=DEFAULT_ITERS,
    window: int = DEFAULT_WINDOW,
    theta: float = DEFAULT_THETA,
    *,
    junction="dense",
) -> MlaFactors:
    """Joint QK compression of the rotary-embedded scores over a causal window.

    Biases are carried over unchanged; the rotations stay outside the factors
    and are applied to ``B_q A_q x`` and ``B_k A_k x`` at inference.
    """
    window = check_count(window, "window", low=0)
    if heads.d_h % 2:
        raise ArgumentError(f"rotary embedding needs an even head dimension, got {heads.d_h}")
    r_q, r_k, iters = _check_ranks(heads, r_q, r_k, iters)
    P = psd_sqrt(stats.C)
    P_inv = _invert_preconditioner(P)
    G = rope_slices(heads, P, window, theta)
    Aq, Ak, trace = hosvd_alternation(G, r_q, r_k, iters)
    return _assemble(heads, Aq, Ak, heads.Wq @ P, heads.Wk @ P, P_inv, P_inv, trace, junction)


def rope_window_loss(heads: AttentionHeads, factors: MlaFactors, stats, window, theta=DEFAULT_THETA):
    """Windowed rotary objective ``sum ||C^{1/2} (G_delta - G_hat_delta) C^{1/2}||^2``."""
    P = psd_sqrt(stats.C)
    ref = rope_slices(heads, P, window, theta)
    approx = AttentionHeads(
        np.einsum("hdr,rx->hdx", factors.Bq, factors.Aq),
        np.einsum("hdr,rx->hdx", factors.Bk, factors.Ak),
    )
    diff = ref - rope_slices(approx, P, window, theta)
    return float(np.sum(diff * diff))


def reconstruct_attention_maps(params, X) -> np.ndarray:
    """Pre-softmax score maps ``(W_q x + b_q)^T (W_k x' + b_k)`` per query head,
    returned as an (h, l, l) array (no scaling, no mask)."""
    X = as_matrix(X, "X")
    if isinstance(params, MlaFactors):
        Wq = np.einsum("hdr,rx->hdx", params.Bq, params.Aq)
        Wk = np.einsum("hdr,rx->hdx", params.Bk, params.Ak)
        bq, bk = params.bq_hat, params.bk_hat
        kv = np.arange(params.h) // params.group_size
    elif isinstance(params, AttentionHeads):
        Wq, Wk, bq, bk = params.Wq, params.Wk, params.bq, params.bk
        kv = params.kv_index()
    else:
        raise ArgumentError(f"cannot build attention maps from {type(params).__name__}")
    if Wq.shape[2] != X.shape[0]:
        raise ArgumentError(f"X has {X.shape[0]} rows, heads expect {Wq.shape[2]}")
    Q = np.einsum("hdx,xl->hdl", Wq, X)
    K = np.einsum("hdx,xl->hdl", Wk, X)
    if bq is not None:
        Q = Q + bq[:, :, None]
    if bk is not None:
        K = K + bk[:, :, None]
    return np.einsum("hdl,hdm->hlm", Q, K[kv])


def attention_map_error(heads: AttentionHeads, params, X) -> float:
    diff = reconstruct_attention_maps(heads, X) - reconstruct_attention_maps(params, X)
    return float(np.sum(diff * diff))
