"""scikit-learn style wrappers.

Inputs follow the sklearn row convention: ``X`` is (n_samples, n_features), one
token activation per row. The weights being compressed are constructor
parameters; ``fit`` only reads calibration activations.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .attention import AttentionHeads, joint_qk, joint_qk_bias_aware
from .calibration import DEFAULT_LAMBDA_REL, estimate_stats, make_preconditioner
from .errors import ArgumentError
from .local import Junction, activation_loss, apply_junction, bias_update_local, compress_local
from .mlp import compress_mlp


def _activations(X, n_features):
    X = check_array(X, dtype=np.float64)
    if X.shape[1] != n_features:
        raise ArgumentError(f"X has {X.shape[1]} features, the weight expects {n_features}")
    return X.T


class LowRankLinear(TransformerMixin, BaseEstimator):
    """Activation-aware low-rank replacement of one linear layer ``y = W x + b``.

    ``transform`` returns the latent codes ``A x`` and ``predict`` the layer
    output ``B A x + b_hat``.
    """

    def __init__(
        self,
        weight=None,
        bias=None,
        rank=1,
        preconditioner="rootcov",
        junction="left",
        bias_correction=False,
        lambda_rel=DEFAULT_LAMBDA_REL,
    ):
        self.weight = weight
        self.bias = bias
        self.rank = rank
        self.preconditioner = preconditioner
        self.junction = junction
        self.bias_correction = bias_correction
        self.lambda_rel = lambda_rel

    def fit(self, X, y=None):
        if self.weight is None:
            raise ArgumentError("LowRankLinear needs a weight matrix")
        W = check_array(self.weight, dtype=np.float64)
        Xc = _activations(X, W.shape[1])
        stats = estimate_stats(Xc, self.lambda_rel)
        centered = bool(self.bias_correction)
        P = make_preconditioner(stats, self.preconditioner, Xc, centered=centered)
        factor = compress_local(W, P, self.rank)
        b = np.zeros(W.shape[0]) if self.bias is None else np.asarray(self.bias, dtype=np.float64)
        if centered:
            b = bias_update_local(W, factor, stats, b)
        form = Junction.parse(self.junction)
        if form is not Junction.LEFT_SINGULAR:
            factor = apply_junction(factor, form)
        factor.bias = b
        self.factor_ = factor
        self.loss_ = activation_loss(W, factor.product(), stats.whitening_matrix(centered))
        self.n_features_in_ = W.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "factor_")
        return _activations(X, self.n_features_in_).T @ self.factor_.A.T

    def predict(self, X):
        check_is_fitted(self, "factor_")
        return self.factor_(_activations(X, self.n_features_in_)).T

    @property
    def stored_params_(self) -> int:
        check_is_fitted(self, "factor_")
        return self.factor_.stored_params


class JointQKCompressor(TransformerMixin, BaseEstimator):
    """Shared query/key latent projection for multi-head attention.

    ``transform`` returns ``[A_q x, A_k x]`` per row, which is what a latent
    attention layer caches.
    """

    def __init__(
        self,
        wq=None,
        wk=None,
        n_heads=1,
        n_kv_heads=None,
        r_q=1,
        r_k=1,
        iters=8,
        bq=None,
        bk=None,
        bias_aware=False,
        junction="dense",
        lambda_rel=DEFAULT_LAMBDA_REL,
    ):
        self.wq = wq
        self.wk = wk
        self.n_heads = n_heads
        self.n_kv_heads = n_kv_heads
        self.r_q = r_q
        self.r_k = r_k
        self.iters = iters
        self.bq = bq
        self.bk = bk
        self.bias_aware = bias_aware
        self.junction = junction
        self.lambda_rel = lambda_rel

    def fit(self, X, y=None):
        if self.wq is None or self.wk is None:
            raise ArgumentError("JointQKCompressor needs query and key weights")
        heads = AttentionHeads.from_projections(
            self.wq, self.wk, self.n_heads, self.n_kv_heads, self.bq, self.bk
        )
        Xc = _activations(X, heads.d)
        stats = estimate_stats(Xc, self.lambda_rel)
        if self.bias_aware:
            f = joint_qk_bias_aware(heads, stats, self.r_q, self.r_k, self.iters, junction=self.junction)
        else:
            P = make_preconditioner(stats, "rootcov")
            f = joint_qk(heads, P, self.r_q, self.r_k, self.iters, junction=self.junction)
        self.heads_ = heads
        self.factors_ = f
        self.n_features_in_ = heads.d
        return self

    def transform(self, X):
        check_is_fitted(self, "factors_")
        Xc = _activations(X, self.n_features_in_)
        return np.concatenate([self.factors_.Aq @ Xc, self.factors_.Ak @ Xc], axis=0).T


class JointMLPCompressor(BaseEstimator):
    """Joint low-rank compression of a two-layer MLP; ``predict`` gives the
    compressed MLP output for each row of ``X``."""

    def __init__(
        self,
        w_up=None,
        w_down=None,
        b_up=None,
        b_down=None,
        r_u=1,
        r_d=1,
        iters=4,
        alpha=1.0,
        beta=1.0,
        gamma=1.0,
        activation="relu",
        lambda_rel=DEFAULT_LAMBDA_REL,
    ):
        self.w_up = w_up
        self.w_down = w_down
        self.b_up = b_up
        self.b_down = b_down
        self.r_u = r_u
        self.r_d = r_d
        self.iters = iters
        self.alpha = alpha
        self.beta = beta
        self.gamma = gamma
        self.activation = activation
        self.lambda_rel = lambda_rel

    def fit(self, X, y=None):
        """``y`` (n_samples, d) overrides the regression target; by default it
        is the original MLP output."""
        if self.w_up is None or self.w_down is None:
            raise ArgumentError("JointMLPCompressor needs up and down weights")
        Wu = check_array(self.w_up, dtype=np.float64)
        Xc = _activations(X, Wu.shape[1])
        Y = None if y is None else check_array(y, dtype=np.float64).T
        self.factors_ = compress_mlp(
            Wu,
            self.w_down,
            Xc,
            Y,
            r_u=self.r_u,
            r_d=self.r_d,
            iters=self.iters,
            alpha=self.alpha,
            beta=self.beta,
            gamma=self.gamma,
            bu=self.b_up,
            bd=self.b_down,
            activation=self.activation,
            lambda_rel=self.lambda_rel,
        )
        self.n_features_in_ = Wu.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "factors_")
        return self.factors_(_activations(X, self.n_features_in_)).T
