"""Joint up/down compression of a two-layer MLP ``Y = W_d act(W_u X)``.

Block-coordinate descent on the decoupled loss

    L4 = alpha ||Z - W_u X||^2 + beta ||Z' - act(Z)||^2 + gamma ||W_d Z' - Y||^2

with auxiliary pre-activations ``Z`` and post-activations ``Z'``. The factor
steps are whitened SVDs, the ``Z'`` step is a linear solve and the ``Z`` step
has an element-wise closed form for ReLU.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from ._validation import as_matrix, as_vector, check_count, check_real
from .calibration import DEFAULT_LAMBDA_REL, _damping
from .errors import ArgumentError
from .linalg import pinv, psd_sqrt
from .local import LowRankFactor, compress_local

DEFAULT_ITERS = 4
ACTIVATIONS = ("relu", "gelu")


def relu(x):
    return np.maximum(x, 0.0)


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def activation_fn(name: str):
    if name == "relu":
        return relu
    if name == "gelu":
        return gelu
    raise ArgumentError(f"unknown activation {name!r}; choose from {', '.join(ACTIVATIONS)}")


def solve_zprime(Wd, Z, Y, beta: float, gamma: float, activation="relu") -> np.ndarray:
    """Minimiser of ``beta ||Z' - act(Z)||^2 + gamma ||W_d Z' - Y||^2`` over ``Z'``:
    ``(gamma W_d^T W_d + beta I)^+ (beta act(Z) + gamma W_d^T Y)``."""
    Wd = as_matrix(Wd, "Wd")
    Z = as_matrix(Z, "Z")
    Y = as_matrix(Y, "Y")
    beta = check_real(beta, "beta", low=0.0)
    gamma = check_real(gamma, "gamma", low=0.0)
    if beta == 0.0 and gamma == 0.0:
        raise ArgumentError("beta and gamma cannot both be zero")
    if Wd.shape[1] != Z.shape[0] or Wd.shape[0] != Y.shape[0] or Z.shape[1] != Y.shape[1]:
        raise ArgumentError("Wd, Z and Y shapes are inconsistent")
    M = gamma * (Wd.T @ Wd) + beta * np.eye(Wd.shape[1])
    rhs = beta * activation_fn(activation)(Z) + gamma * (Wd.T @ Y)
    if beta > 0.0:
        return np.linalg.solve(M, rhs)
    return pinv(M) @ rhs


def z_objective(z, zminus, zp, alpha, beta):
    return alpha * (z - zminus) ** 2 + beta * (zp - relu(z)) ** 2


def solve_z_relu(Zminus, Zp, alpha: float, beta: float) -> np.ndarray:
    """Element-wise minimiser of ``alpha (z - z_-)^2 + beta (z' - relu(z))^2``.

    Active branch: ``max((alpha z_- + beta z') / (alpha + beta), 0)``; inactive
    branch: ``min(z_-, 0)``. The cheaper one wins, the active branch on ties.
    """
    Zminus = np.asarray(Zminus, dtype=np.float64)
    Zp = np.asarray(Zp, dtype=np.float64)
    if Zminus.shape != Zp.shape:
        raise ArgumentError(f"Z- shape {Zminus.shape} does not match Z' shape {Zp.shape}")
    alpha = check_real(alpha, "alpha", low=0.0)
    beta = check_real(beta, "beta", low=0.0)
    if alpha + beta <= 0.0:
        raise ArgumentError("alpha + beta must be positive")
    zpos = np.maximum((alpha * Zminus + beta * Zp) / (alpha + beta), 0.0)
    zneg = np.minimum(Zminus, 0.0)
    fpos = z_objective(zpos, Zminus, Zp, alpha, beta)
    fneg = z_objective(zneg, Zminus, Zp, alpha, beta)
    return np.where(fpos <= fneg, zpos, zneg)


@dataclass
class MlpFactors:
    up: LowRankFactor
    down: LowRankFactor
    Z: np.ndarray = field(repr=False)
    Zp: np.ndarray = field(repr=False)
    loss_trace: list = field(default_factory=list)
    weights: tuple = (1.0, 1.0, 1.0)
    activation: str = "relu"

    @property
    def Bu(self):
        return self.up.B

    @property
    def Au(self):
        return self.up.A

    @property
    def Bd(self):
        return self.down.B

    @property
    def Ad(self):
        return self.down.A

    @property
    def stored_params(self) -> int:
        return self.up.stored_params + self.down.stored_params

    def __call__(self, X) -> np.ndarray:
        return self.down(activation_fn(self.activation)(self.up(X)))


def _ridge_step(W0, T, X, r, lambda_rel, with_bias):
    """Rank-r fit of ``T ~ W X (+ b)`` with the ridge anchored at ``W0``.

    The effective weight ``W0 + (T - W0 X) X^T (X X^T + lam I)^-1`` is compressed
    with the whitening of the (centred) input second moment.
    """
    if with_bias:
        mu = X.mean(axis=1)
        t_mean = T.mean(axis=1)
        Xc = X - mu[:, None]
        Tc = T - t_mean[:, None]
    else:
        Xc, Tc = X, T
    gram = Xc @ Xc.T
    C = gram + _damping(gram, lambda_rel) * np.eye(X.shape[0])
    R = Tc - W0 @ Xc
    W_eff = W0 + np.linalg.solve(C, Xc @ R.T).T
    factor = compress_local(W_eff, psd_sqrt(C), r)
    if with_bias:
        factor.bias = t_mean - factor.product() @ mu
    return factor


def decoupled_loss(Z, Zminus, Zp, Y, down: LowRankFactor, alpha, beta, gamma, act) -> float:
    e1 = Z - Zminus
    e2 = Zp - act(Z)
    e3 = down(Zp) - Y
    return float(alpha * np.sum(e1 * e1) + beta * np.sum(e2 * e2) + gamma * np.sum(e3 * e3))


def compress_mlp(
    Wu,
    Wd,
    X,
    Y=None,
    *,
    r_u: int,
    r_d: int,
    iters: int = DEFAULT_ITERS,
    alpha: float = 1.0,
    beta: float = 1.0,
    gamma: float = 1.0,
    bu=None,
    bd=None,
    activation: str = "relu",
    lambda_rel: float = DEFAULT_LAMBDA_REL,
) -> MlpFactors:
    """Joint low-rank compression of ``W_u`` (d_i x d) and ``W_d`` (d x d_i).

    ``X`` is the (d x l) calibration input; ``Y`` defaults to the original
    output. Biases are refitted by centring each regression. With GELU the
    element-wise ``Z`` step has no closed form and ``Z`` tracks ``W_u X``.
    """
    Wu = as_matrix(Wu, "Wu")
    Wd = as_matrix(Wd, "Wd")
    X = as_matrix(X, "X")
    d_i, d = Wu.shape
    if Wd.shape != (Wd.shape[0], d_i) or X.shape[0] != d:
        raise ArgumentError("Wu, Wd and X shapes are inconsistent")
    act = activation_fn(activation)
    with_bias = bu is not None or bd is not None
    bu = np.zeros(d_i) if bu is None else as_vector(bu, "bu", size=d_i)
    bd = np.zeros(Wd.shape[0]) if bd is None else as_vector(bd, "bd", size=Wd.shape[0])
    if Y is None:
        Y = Wd @ act(Wu @ X + bu[:, None]) + bd[:, None]
    Y = as_matrix(Y, "Y")
    if Y.shape != (Wd.shape[0], X.shape[1]):
        raise ArgumentError(f"Y must be {Wd.shape[0]}x{X.shape[1]}, got {Y.shape}")
    r_u = check_count(r_u, "r_u", low=1, high=min(Wu.shape))
    r_d = check_count(r_d, "r_d", low=1, high=min(Wd.shape))
    iters = check_count(iters, "iters", low=1)
    alpha = check_real(alpha, "alpha", low=0.0, strict=True)
    beta = check_real(beta, "beta", low=0.0, strict=True)
    gamma = check_real(gamma, "gamma", low=0.0, strict=True)

    Z = Wu @ X + bu[:, None]
    Zp = act(Z)
    down = LowRankFactor(B=Wd, A=np.eye(d_i), bias=bd)
    trace = []
    for _ in range(iters):
        up = _ridge_step(Wu, Z, X, r_u, lambda_rel, with_bias)
        Zminus = up(X)
        target = Y if down.bias is None else Y - down.bias[:, None]
        Zp = solve_zprime(down.product(), Z, target, beta, gamma, activation)
        Z = solve_z_relu(Zminus, Zp, alpha, beta) if activation == "relu" else Zminus
        down = _ridge_step(Wd, Y, Zp, r_d, lambda_rel, with_bias)
        trace.append(decoupled_loss(Z, Zminus, Zp, Y, down, alpha, beta, gamma, act))
    return MlpFactors(
        up=up,
        down=down,
        Z=Z,
        Zp=Zp,
        loss_trace=trace,
        weights=(alpha, beta, gamma),
        activation=activation,
    )


def compress_mlp_local(Wu, Wd, X, *, r_u, r_d, bu=None, bd=None, activation="relu", lambda_rel=DEFAULT_LAMBDA_REL):
    """Independent activation-aware compression of the two projections."""
    Wu = as_matrix(Wu, "Wu")
    Wd = as_matrix(Wd, "Wd")
    X = as_matrix(X, "X")
    with_bias = bu is not None or bd is not None
    bu = np.zeros(Wu.shape[0]) if bu is None else as_vector(bu, "bu", size=Wu.shape[0])
    bd = np.zeros(Wd.shape[0]) if bd is None else as_vector(bd, "bd", size=Wd.shape[0])
    Z = Wu @ X + bu[:, None]
    H = activation_fn(activation)(Z)
    up = _ridge_step(Wu, Z, X, r_u, lambda_rel, with_bias)
    down = _ridge_step(Wd, Wd @ H + bd[:, None], H, r_d, lambda_rel, with_bias)
    return up, down
