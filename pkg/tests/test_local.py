import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from latentfactor.calibration import Preconditioner, estimate_stats, make_preconditioner
from latentfactor.errors import ArgumentError, DegenerateInputError, NumericError
from latentfactor.linalg import psd_sqrt
from latentfactor.local import (
    Junction,
    LowRankFactor,
    activation_loss,
    apply_junction,
    bias_update_local,
    compress_joint_qkv,
    compress_local,
    compress_split_head,
    lowrank_params,
    pivot_columns,
    split_head_product,
)

from conftest import rel, wishart

FORMS = [j for j in Junction]


def test_full_rank_identity(rng):
    W = rng.standard_normal((5, 7))
    f = compress_local(W, np.eye(7), 5)
    assert rel(f.product(), W) <= 1e-9
    assert f.whitened_loss == pytest.approx(0.0, abs=1e-20)


def test_diag_discarded():
    f = compress_local(np.diag([3.0, 2.0, 1.0]), np.eye(3), 2)
    assert f.whitened_loss == pytest.approx(1.0)
    assert activation_loss(np.diag([3.0, 2.0, 1.0]), f.product(), np.eye(3)) == pytest.approx(1.0)


def test_rootcov_beats_identity(rng):
    W = rng.standard_normal((8, 8))
    C = wishart(rng, 8)
    a = activation_loss(W, compress_local(W, psd_sqrt(C), 4).product(), C)
    b = activation_loss(W, compress_local(W, np.eye(8), 4).product(), C)
    assert a < b


def test_whitened_loss_recorded(rng):
    W = rng.standard_normal((6, 8))
    C = wishart(rng, 8)
    f = compress_local(W, psd_sqrt(C), 3)
    assert f.whitened_loss == pytest.approx(activation_loss(W, f.product(), C), rel=1e-9)


def test_errors(rng):
    W = rng.standard_normal((4, 3))
    with pytest.raises(NumericError):
        compress_local(W, np.diag([1.0, 1.0, 0.0]), 2)
    with pytest.raises(ArgumentError):
        compress_local(W, np.eye(3), 4)
    with pytest.raises(ArgumentError):
        compress_local(W, np.eye(4), 2)


@pytest.mark.parametrize("seed", range(50))
def test_rootcov_optimal_among_kinds(seed):
    rng = np.random.default_rng(seed)
    d_out, d = int(rng.integers(2, 33)), int(rng.integers(2, 33))
    W = rng.standard_normal((d_out, d))
    X = rng.standard_normal((d, 3 * d)) * np.exp(rng.standard_normal(d))[:, None]
    s = estimate_stats(X)
    r = int(rng.integers(1, min(d_out, d) + 1))
    best = activation_loss(W, compress_local(W, make_preconditioner(s, "rootcov"), r).product(), s.C)
    for kind in Preconditioner:
        P = make_preconditioner(s, kind, X)
        loss = activation_loss(W, compress_local(W, P, r).product(), s.C)
        assert best <= loss + 1e-9 * max(1.0, loss)


@pytest.mark.parametrize("s", [0.5, 2.0, 10.0])
def test_c_scale_invariance(s, rng):
    W = rng.standard_normal((6, 6))
    C = wishart(rng, 6)
    a = compress_local(W, psd_sqrt(C), 3).product()
    b = compress_local(W, psd_sqrt(s * C), 3).product()
    assert rel(b, a) <= 1e-8


def test_bias_update_trivial(rng):
    W = rng.standard_normal((4, 5))
    b = rng.standard_normal(4)
    X = rng.standard_normal((5, 30))
    centred = estimate_stats(X - X.mean(axis=1, keepdims=True))
    f = compress_local(W, np.eye(5), 2)
    assert np.allclose(bias_update_local(W, f, centred, b), b)
    full = compress_local(W, np.eye(5), 4)
    assert np.allclose(bias_update_local(W, full, estimate_stats(X), b), b, atol=1e-12)


def _biased_loss(W, b, BA, bh, X):
    return float(np.sum((W @ X + b[:, None] - BA @ X - bh[:, None]) ** 2))


def test_bias_update_optimal(rng):
    W = rng.standard_normal((4, 6))
    b = rng.standard_normal(4)
    X = rng.standard_normal((6, 40)) + 2.0
    s = estimate_stats(X)
    f = compress_local(W, make_preconditioner(s, "rootcov", centered=True), 2)
    bh = bias_update_local(W, f, s, b)
    base = _biased_loss(W, b, f.product(), bh, X)
    Xc = X - s.mu[:, None]
    assert base == pytest.approx(np.sum(((W - f.product()) @ Xc) ** 2), rel=1e-8)
    for i in range(4):
        for eps in (1e-3, -1e-3):
            e = np.zeros(4)
            e[i] = eps
            assert _biased_loss(W, b, f.product(), bh + e, X) > base


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(FORMS))
def test_junction_preserves_product(seed, form):
    rng = np.random.default_rng(seed)
    d_out, d = int(rng.integers(2, 10)), int(rng.integers(2, 10))
    W = rng.standard_normal((d_out, d))
    r = int(rng.integers(1, min(d_out, d) + 1))
    f = compress_local(W, psd_sqrt(wishart(rng, d)), r)
    g = apply_junction(f, form)
    assert np.linalg.norm(g.product() - f.product()) <= 1e-8 * np.linalg.norm(f.product())
    assert g.stored_params == lowrank_params(d_out, d, r, g.junction)


def test_block_identity_structure(rng):
    f = compress_local(rng.standard_normal((6, 8)), np.eye(8), 3)
    a = apply_junction(f, "block-identity")
    assert np.abs(a.A[:, a.col_perm[:3]] - np.eye(3)).max() <= 1e-10
    b = apply_junction(f, Junction.BLOCK_IDENTITY_B)
    assert np.abs(b.B[b.row_perm[:3]] - np.eye(3)).max() <= 1e-10
    lu = apply_junction(f, Junction.LU)
    assert lu.junction is Junction.LU
    assert np.allclose(np.triu(lu.B[lu.row_perm[:3]], 1), 0)
    assert np.allclose(np.tril(lu.A[:, lu.col_perm[:3]], -1), 0)
    assert np.allclose(np.diag(lu.B[lu.row_perm[:3]]), 1)


def test_left_on_left_unchanged(rng):
    f = compress_local(rng.standard_normal((5, 5)), np.eye(5), 2)
    g = apply_junction(f, "left")
    assert np.array_equal(g.B, f.B) and np.array_equal(g.A, f.A)


def test_block_identity_counts():
    assert lowrank_params(16, 16, 12, "block-identity") == 240
    for d in (4, 8, 16, 32):
        assert lowrank_params(d, d, 3 * d // 4, "block-identity") * 16 == 15 * d * d


def test_block_identity_formula_grid():
    for d_out in range(1, 13):
        for d in range(1, 13):
            for r in range(1, min(d_out, d) + 1):
                n = lowrank_params(d_out, d, r, Junction.BLOCK_IDENTITY_A)
                assert n == r * (d_out + d) - r * r
                if r < min(d_out, d):
                    assert n < d_out * d


def test_pivot_degenerate():
    with pytest.raises(DegenerateInputError):
        pivot_columns(np.array([[1.0, 2.0, 3.0], [2.0, 4.0, 6.0]]))
    f = LowRankFactor(B=np.ones((3, 2)), A=np.array([[1.0, 2.0, 3.0], [2.0, 4.0, 6.0]]))
    with pytest.raises(DegenerateInputError):
        apply_junction(f, "block-identity")


def test_joint_qkv(rng):
    Wq, Wk, Wv = (rng.standard_normal((4, 6)) for _ in range(3))
    full = compress_joint_qkv(Wq, Wk, Wv, np.eye(6), 6)
    assert rel(full.product(), np.vstack([Wq, Wk, Wv])) <= 1e-9
    same = rng.standard_normal((4, 2)) @ rng.standard_normal((2, 6))
    rep = compress_joint_qkv(same, same, same, np.eye(6), 2)
    assert rep.whitened_loss == pytest.approx(0.0, abs=1e-20)
    f = compress_joint_qkv(Wq, Wk, Wv, np.eye(6), 3)
    assert f.stored_params == 3 * (12 + 6)
    # equal storage: rank r for the stack vs r' per block, r(3d'+d) = 3 r'(d'+d)
    C = wishart(rng, 6)
    P = psd_sqrt(C)
    joint = compress_joint_qkv(Wq, Wk, Wv, P, 5)
    split = [compress_local(W, P, 3) for W in (Wq, Wk, Wv)]
    assert joint.stored_params == sum(s.stored_params for s in split) == 90
    jl = activation_loss(np.vstack([Wq, Wk, Wv]), joint.product(), C)
    sl = sum(activation_loss(W, s.product(), C) for W, s in zip((Wq, Wk, Wv), split))
    assert jl == pytest.approx(joint.whitened_loss, rel=1e-9)
    assert sl == pytest.approx(sum(s.whitened_loss for s in split), rel=1e-9)


def test_split_head(rng):
    W = rng.standard_normal((8, 8))
    one = compress_split_head(W, 1, np.eye(8), 3)[0]
    assert np.allclose(one.product(), compress_local(W, np.eye(8), 3).product())
    full = compress_split_head(W, 2, np.eye(8), 4)
    assert rel(split_head_product(full), W) <= 1e-9
    C = wishart(rng, 8)
    P = psd_sqrt(C)
    split = activation_loss(W, split_head_product(compress_split_head(W, 2, P, 2)), C)
    dense = activation_loss(W, compress_local(W, P, 4).product(), C)
    assert split >= dense - 1e-9
    with pytest.raises(ArgumentError):
        compress_split_head(W, 3, P, 1)
