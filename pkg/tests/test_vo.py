import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from latentfactor.attention import hosvd_alternation
from latentfactor.calibration import estimate_stats
from latentfactor.errors import ArgumentError
from latentfactor.linalg import orthonormal_rows, psd_sqrt
from latentfactor.vo import (
    ContractionOrder,
    ValueHeads,
    joint_vo,
    vo_apply,
    vo_bias_update,
    vo_contraction_plan,
    vo_params,
)

from conftest import rel


def vheads(rng, h, d_h, d, d_out=None, bias=False):
    d_out = d_out or d
    return ValueHeads(
        rng.standard_normal((h, d_h, d)),
        rng.standard_normal((h, d_out, d_h)),
        rng.standard_normal((h, d_h)) if bias else None,
        rng.standard_normal(d_out) if bias else None,
    )


def identity_stats(d):
    X = np.sqrt(0.5) * np.hstack([np.eye(d), -np.eye(d)])
    return estimate_stats(X, 0.0)


def stochastic(rng, h, l):
    S = np.tril(rng.random((h, l, l)) + 0.1)
    return S / S.sum(axis=-1, keepdims=True)


def dense_output(heads, X, maps):
    V = np.einsum("hex,xl->hel", heads.Wv, X)
    if heads.bv is not None:
        V = V + heads.bv[:, :, None]
    Y = np.einsum("hoe,hel,hml->om", heads.Wo, V, maps)
    return Y if heads.bo is None else Y + heads.bo[:, None]


def test_from_projections(rng):
    Wv = rng.standard_normal((6, 5))
    Wo = rng.standard_normal((4, 6))
    heads = ValueHeads.from_projections(Wv, Wo, 3)
    assert np.allclose(heads.products().sum(axis=0), Wo @ Wv)
    with pytest.raises(ArgumentError):
        ValueHeads.from_projections(Wv, Wo, 4)


def test_single_head_full_rank(rng):
    heads = vheads(rng, 1, 3, 5)
    f = joint_vo(heads, estimate_stats(rng.standard_normal((5, 20))), 5, 5)
    assert rel(f.products(), heads.products()) <= 1e-8


def test_single_head_svd_oracle(rng):
    heads = vheads(rng, 1, 4, 6)
    s = np.linalg.svd(heads.products()[0], compute_uv=False)
    f = joint_vo(heads, identity_stats(6), 2, 2)
    assert f.loss_trace[-1] == pytest.approx(np.sum(s[2:] ** 2), abs=1e-10)


def test_restart_oracle():
    rng = np.random.default_rng(8)
    heads = vheads(rng, 2, 4, 8)
    s = estimate_stats(rng.standard_normal((8, 40)))
    f = joint_vo(heads, s, 5, 5, iters=100)
    G = np.einsum("hox,xy->hoy", heads.products(), psd_sqrt(s.C)).transpose(0, 2, 1)
    best = np.inf
    for _ in range(100):
        init = orthonormal_rows(rng, 5, 8)
        best = min(best, hosvd_alternation(G, 5, 5, 100, init=init)[2][-1])
    assert all(b <= a + 1e-10 for a, b in zip(f.loss_trace, f.loss_trace[1:]))
    assert f.loss_trace[-1] <= best + 1e-6


def test_loss_trace_matches_products(rng):
    heads = vheads(rng, 3, 2, 6)
    s = estimate_stats(rng.standard_normal((6, 30)))
    f = joint_vo(heads, s, 3, 4)
    D = (heads.products() - f.products()) @ psd_sqrt(s.C)
    assert np.sum(D * D) == pytest.approx(f.loss_trace[-1], rel=1e-8)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 100_000))
def test_monotone(seed):
    rng = np.random.default_rng(seed)
    h, d_h = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    d = int(rng.integers(2, 9))
    heads = vheads(rng, h, d_h, d)
    f = joint_vo(heads, estimate_stats(rng.standard_normal((d, 20))), int(rng.integers(1, d + 1)),
                 int(rng.integers(1, d + 1)), iters=10)
    assert all(b <= a + 1e-10 for a, b in zip(f.loss_trace, f.loss_trace[1:]))


def test_block_identity(rng):
    heads = vheads(rng, 2, 3, 6)
    s = estimate_stats(rng.standard_normal((6, 30)))
    a = joint_vo(heads, s, 4, 4)
    b = joint_vo(heads, s, 4, 4, junction="block-identity")
    assert rel(b.products(), a.products()) <= 1e-8
    assert a.stored_params == vo_params(6, 6, 3, 2, 4, 4)
    assert b.stored_params == vo_params(6, 6, 3, 2, 4, 4, block_identity=True)


def test_bias_zero(rng):
    heads = vheads(rng, 2, 2, 4)
    Y = rng.standard_normal((4, 10))
    s = estimate_stats(np.hstack([Y, -Y]))
    f = joint_vo(heads, s, 2, 2)
    assert np.allclose(vo_bias_update(heads, f, s), 0)


def test_bias_full_rank_exact(rng):
    heads = vheads(rng, 2, 2, 4, bias=True)
    X = rng.standard_normal((4, 12)) + 1.0
    s = estimate_stats(X)
    f = joint_vo(heads, s, 4, 4)
    b = vo_bias_update(heads, f, s)
    assert np.allclose(b, heads.bo + np.einsum("hoe,he->o", heads.Wo, heads.bv))
    maps = stochastic(rng, 2, 12)
    assert rel(vo_apply(f, X, maps), dense_output(heads, X, maps)) <= 1e-8


def test_bias_finite_difference(rng):
    heads = vheads(rng, 2, 2, 5, bias=True)
    X = rng.standard_normal((5, 30)) + 2.0
    s = estimate_stats(X)
    f = joint_vo(heads, s, 2, 3, centered=True)
    b = vo_bias_update(heads, f, s)
    eye = np.broadcast_to(np.eye(30), (2, 30, 30))
    target = dense_output(heads, X, eye)

    def loss(bias):
        f.bo_hat = bias
        return float(np.sum((vo_apply(f, X, eye) - target) ** 2))

    base = loss(b)
    Xc = X - s.mu[:, None]
    centred = np.einsum("hox,xl->ol", heads.products() - f.products(), Xc)
    assert base == pytest.approx(np.sum(centred**2), rel=1e-8)
    for i in range(5):
        for eps in (1e-3, -1e-3):
            e = np.zeros(5)
            e[i] = eps
            assert loss(b + e) > base


def test_plan_example():
    p = vo_contraction_plan(64, 64, 16, 4, 128, 32, 4)
    assert p.flops_value_side == 128 * 64 * 32 + 64 * 128 * 32 + 64 * 128**2 + 64 * 128 * 4 + 4 * 64 * 128 * 4
    assert p.flops_output_side == 128 * 64 * 32 + 32 * 128**2 + 64 * 128 * 32 + 64 * 128 * 4 + 64 * 128 * 4
    assert p.order is ContractionOrder.OUTPUT_SIDE


def test_plan_tie():
    p = vo_contraction_plan(8, 8, 8, 1, 16, 8, 3)
    assert p.flops_value_side == p.flops_output_side
    assert p.order is ContractionOrder.VALUE_SIDE


def test_plan_difference_identity():
    rng = np.random.default_rng(0)
    for _ in range(20):
        h, d_h = int(rng.integers(1, 17)), int(rng.integers(1, 129))
        d = h * d_h
        l, r_v, r_o = int(rng.integers(1, 4097)), int(rng.integers(1, d + 1)), int(rng.integers(1, d + 1))
        p = vo_contraction_plan(d, d, d_h, h, l, r_v, r_o)
        assert p.flops_value_side - p.flops_output_side == (d - r_v) * l * l + (h - 1) * d * l * r_o


def test_orders_agree(rng):
    heads = vheads(rng, 3, 2, 6, bias=True)
    X = rng.standard_normal((6, 10))
    s = estimate_stats(X)
    f = joint_vo(heads, s, 3, 4)
    vo_bias_update(heads, f, s)
    maps = stochastic(rng, 3, 10)
    a = vo_apply(f, X, maps, "value-side")
    b = vo_apply(f, X, maps, ContractionOrder.OUTPUT_SIDE)
    assert rel(b, a) <= 1e-9


def test_full_rank_any_map(rng):
    heads = vheads(rng, 2, 3, 6)
    X = rng.standard_normal((6, 8))
    f = joint_vo(heads, estimate_stats(X), 6, 6)
    maps = rng.standard_normal((2, 8, 8))
    assert rel(vo_apply(f, X, maps), dense_output(heads, X, maps)) <= 1e-8


def test_rank_errors(rng):
    heads = vheads(rng, 2, 2, 4)
    s = estimate_stats(rng.standard_normal((4, 9)))
    with pytest.raises(ArgumentError):
        joint_vo(heads, s, 5, 2)
    with pytest.raises(ArgumentError):
        joint_vo(heads, estimate_stats(rng.standard_normal((3, 9))), 2, 2)
