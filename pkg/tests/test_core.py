import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from interp_forge.core import (
    Block,
    Dataset,
    Dense,
    FeedForward,
    RankOneSym,
    ScaledIdentity,
    SelfAttention,
    Transformer,
    ff_apply,
    hardmax_weights,
    hausdorff_distance,
    param_count,
    sa_apply,
    sequences_equal_as_sets,
    softmax_weights,
    transformer_apply,
    validate_dataset,
)
from interp_forge.geometry import hat_ff

I2 = ScaledIdentity(1.0)


def test_ff_identity_when_output_weights_vanish():
    ff = FeedForward(1.0, np.zeros((2, 3)), np.ones((3, 2)), np.array([1.0, -2.0, 0.5]))
    assert np.array_equal(ff_apply(ff, [3.0, -2.0]), [3.0, -2.0])


def test_ff_zero_when_both_terms_vanish():
    ff = FeedForward(0.0, np.zeros((2, 1)), np.ones((1, 2)), np.ones(1))
    assert np.array_equal(ff_apply(ff, [7.0, 11.0]), [0.0, 0.0])


def test_ff_dimension_mismatch_raises():
    ff = FeedForward.identity(2)
    with pytest.raises(ValueError):
        ff_apply(ff, [1.0, 2.0, 3.0])


def test_ff_matches_hand_evaluation():
    W = np.array([[1.0, -1.0], [2.0, 0.0]])
    U = np.array([[1.0, 1.0], [0.0, -1.0]])
    b = np.array([0.0, 1.0])
    x = np.array([1.0, 3.0])
    # hidden: relu(4) = 4, relu(-3 + 1) = 0
    assert np.allclose(ff_apply(FeedForward(0.5, W, U, b), x), [0.5 + 4.0, 1.5 + 8.0])


def test_hat_layer_example_moves_one_point():
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    ff = hat_ff(pts, 0, np.array([5.0, 5.0]))
    assert np.allclose(ff_apply(ff, pts[0]), [5.0, 5.0], atol=1e-12)
    assert np.allclose(ff_apply(ff, pts[1]), [1.0, 0.0], atol=1e-12)
    assert np.allclose(ff_apply(ff, pts[2]), [0.0, 1.0], atol=1e-12)


X3 = np.array([[2.0, 0.0], [0.0, 1.0], [1.0, 1.0]])


def test_hardmax_unique_maximiser():
    assert np.array_equal(hardmax_weights(X3, I2, 0), [1.0, 0.0, 0.0])


def test_hardmax_exact_tie_splits_weight():
    assert np.array_equal(hardmax_weights(X3, I2, 1), [0.0, 0.5, 0.5])


def test_hardmax_zero_matrix_is_uniform():
    assert np.allclose(hardmax_weights(X3, ScaledIdentity(0.0), 2), [1 / 3] * 3)


def test_hardmax_index_out_of_range():
    with pytest.raises(IndexError):
        hardmax_weights(X3, I2, 3)


def test_softmax_zero_matrix_is_uniform():
    for tau in (0.01, 1.0, 100.0):
        assert np.allclose(softmax_weights(X3, ScaledIdentity(0.0), tau, 0), [1 / 3] * 3)


def test_softmax_two_point_example():
    w = softmax_weights(np.array([[1.0, 0.0], [0.0, 0.0]]), I2, 1.0, 0)
    e = math.e
    assert np.allclose(w, [e / (e + 1), 1 / (e + 1)], rtol=0, atol=1e-15)


def test_softmax_survives_huge_exponents():
    w = softmax_weights(np.array([[1e3, 0.0], [0.0, 1.0]]), I2, 1e-3, 0)
    assert np.all(np.isfinite(w)) and abs(w.sum() - 1) < 1e-12


def test_softmax_approaches_hardmax():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(6, 3))
    A = Dense(rng.normal(size=(3, 3)))
    hard = hardmax_weights(X, A, 2)
    assert np.count_nonzero(hard) == 1
    gaps = [np.max(np.abs(softmax_weights(X, A, 10.0**-k, 2) - hard)) for k in range(8)]
    assert gaps[-1] < 1e-6
    assert all(a >= b - 1e-15 for a, b in zip(gaps, gaps[1:]))


def test_sa_identity_configuration():
    X = np.random.default_rng(0).normal(size=(5, 3))
    assert np.array_equal(sa_apply(SelfAttention.identity(), X), X)


def test_softmax_collapse_to_average():
    X = np.random.default_rng(1).normal(size=(4, 2))
    out = sa_apply(SelfAttention(0.0, I2, ScaledIdentity(0.0), 1.0), X)
    assert np.allclose(out, np.tile(X.mean(axis=0), (4, 1)), atol=1e-14)


def test_hardmax_full_clustering_in_one_application():
    R = 2.0
    X = np.array([[R, R], [0.5, 1.5], [1.2, 0.3], [1.9, 1.9]])
    out = sa_apply(SelfAttention(0.0, I2, I2), X)
    assert np.array_equal(out, np.tile([R, R], (4, 1)))


def test_leader_is_fixed_point():
    X = np.array([[3.0, 0.0], [1.0, 1.0], [0.0, 2.0]])
    A = RankOneSym(np.array([1.0, 0.0]))
    # token 0 is its own unique cluster; with V = (1 - rho) I it stays put
    out = sa_apply(SelfAttention(0.3, ScaledIdentity(0.7), A), X)
    assert np.array_equal(out[0], X[0])


def test_transformer_zero_blocks_is_identity():
    X = np.random.default_rng(2).normal(size=(3, 2))
    assert np.array_equal(transformer_apply(Transformer((), 2), X), X)


def test_transformer_identity_block():
    X = np.random.default_rng(2).normal(size=(3, 2))
    T = Transformer((Block(FeedForward.identity(2), SelfAttention.identity()),))
    assert np.array_equal(transformer_apply(T, X), X)


def test_transformer_rejects_mixed_dimensions():
    with pytest.raises(ValueError):
        Transformer((Block(FeedForward.identity(2), SelfAttention.identity()),
                     Block(FeedForward.identity(3), SelfAttention.identity())))


def test_hausdorff_examples():
    assert hausdorff_distance([[0.0, 0.0]], [[3.0, 4.0]]) == 5.0
    assert math.isclose(hausdorff_distance([[0.0, 0.0], [10.0, 0.0]], [[0.0, 1.0]]), math.sqrt(101), rel_tol=1e-15)
    X = np.random.default_rng(4).normal(size=(5, 3))
    assert hausdorff_distance(X, X) == 0.0


def test_hausdorff_brute_force():
    rng = np.random.default_rng(5)
    for _ in range(20):
        X, Y = rng.normal(size=(4, 2)), rng.normal(size=(6, 2))
        dxy = max(min(np.linalg.norm(x - y) for y in Y) for x in X)
        dyx = max(min(np.linalg.norm(x - y) for x in X) for y in Y)
        assert math.isclose(hausdorff_distance(X, Y), max(dxy, dyx), rel_tol=1e-12)


def test_set_equality_examples():
    X = np.random.default_rng(6).normal(size=(5, 2))
    assert sequences_equal_as_sets(X[::-1], X, tol=0.0)
    assert not sequences_equal_as_sets([[0.0, 0.0]], [[1e-8, 0.0]], tol=1e-9)
    assert sequences_equal_as_sets([[0.0, 0.0]], [[1e-10, 0.0]], tol=1e-9)


def test_param_count_examples():
    assert param_count(Transformer((), 2)) == 0
    zero = Block(FeedForward(0.0, np.zeros((2, 1)), np.zeros((1, 2)), np.zeros(1)),
                 SelfAttention(0.0, ScaledIdentity(0.0), ScaledIdentity(0.0)))
    assert param_count(Transformer((zero,))) == 0
    blk = Block(FeedForward(1.0, np.array([[1.0], [0.0]]), np.array([[2.0, 3.0]]), np.array([0.0])),
                SelfAttention(0.5, ScaledIdentity(0.5), RankOneSym(np.array([1.0, 2.0]))))
    # eta 1 + W 1 + U 2 + b 0 + rho 1 + V 1 + A 2
    assert param_count(Transformer((blk,))) == 8


def test_validate_dataset_clauses():
    X = np.array([[0.0, 0.0], [1.0, 1.0]])
    v = validate_dataset(Dataset([X, X[::-1]], [X[:1], X[:1]]))
    assert v is not None and v.clause == "assumption-1-i" and v.indices == (0, 1)
    v = validate_dataset(Dataset([np.array([[1.0, 2.0], [1.0, 2.0]])], [X[:1]]))
    assert v.clause == "assumption-1-ii"
    v = validate_dataset(Dataset([X[:1]], [X]))
    assert v.clause == "length"
    v = validate_dataset(Dataset([np.array([[1.0], [2.0]])], [np.array([[1.0]])]))
    assert v.clause == "dimension"
    assert validate_dataset(Dataset([X], [X[:1]])) is None


# --------------------------------------------------------------------------
# properties

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


@st.composite
def seq_and_matrix(draw):
    d = draw(st.integers(2, 4))
    n = draw(st.integers(1, 6))
    X = draw(arrays(float, (n, d), elements=finite))
    A = draw(arrays(float, (d, d), elements=finite))
    return X, A


@settings(max_examples=60, deadline=None)
@given(seq_and_matrix(), st.floats(0.01, 10))
def test_weights_normalised(data, tau):
    X, A = data
    for i in range(X.shape[0]):
        h = hardmax_weights(X, Dense(A), i)
        s = softmax_weights(X, Dense(A), tau, i)
        assert abs(h.sum() - 1) < 1e-12 and abs(s.sum() - 1) < 1e-12
        nz = h[h > 0]
        assert np.all(nz == nz[0])
        assert np.all(s >= 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_hausdorff_pseudometric(seed):
    rng = np.random.default_rng(seed)
    X, Y, Z = (rng.normal(size=(rng.integers(1, 6), 3)) for _ in range(3))
    assert hausdorff_distance(X, Y) == hausdorff_distance(Y, X)
    assert hausdorff_distance(X, Z) <= hausdorff_distance(X, Y) + hausdorff_distance(Y, Z) + 1e-12
    assert hausdorff_distance(X, rng.permutation(X)) == 0.0


def test_hausdorff_zero_iff_same_set():
    X = np.array([[0.0, 1.0], [2.0, 3.0]])
    assert hausdorff_distance(X, np.vstack([X, X[:1]])) == 0.0
    assert hausdorff_distance(X, X[:1]) > 0
