import io as _io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial import Delaunay

from interp_forge.dynamics import (
    DynamicsConfig,
    HypothesisError,
    check_partial_hypotheses,
    classify,
    predict_full_equilibrium,
    predict_partial_equilibrium,
    predict_rank1_equilibrium,
    simulate,
    step,
    write_trajectory_csv,
)


def sphere_points(rng, n, d, R):
    Z = rng.normal(size=(n, d))
    return R * Z / np.linalg.norm(Z, axis=1, keepdims=True)


def full_cluster_config(rng, n, d, R):
    X = rng.uniform(0.05 * R, 0.95 * R, size=(n, d))
    X[0] = R
    return X


def test_config_validation():
    with pytest.raises(ValueError):
        DynamicsConfig.scaled_identity(0.0)
    with pytest.raises(ValueError):
        DynamicsConfig.scaled_identity(1.5)
    with pytest.raises(ValueError):
        DynamicsConfig.scaled_identity(0.5, xi=-1.0)
    with pytest.raises(ValueError):
        DynamicsConfig.rank_one(0.5, [0.0, 0.0])


def test_step_hand_example():
    X = np.array([[1.0, 1.0], [0.5, 0.5]])
    out = step(X, DynamicsConfig.scaled_identity(0.5))
    assert np.array_equal(out, [[1.0, 1.0], [0.75, 0.75]])


def test_full_clustering_one_step():
    X = full_cluster_config(np.random.default_rng(0), 6, 3, 2.0)
    out = step(X, DynamicsConfig.scaled_identity(1.0))
    assert np.array_equal(out, np.tile(X[0], (6, 1)))
    traj = simulate(X, DynamicsConfig.scaled_identity(1.0))
    assert traj.converged and traj.steps_taken <= 1
    assert np.array_equal(traj.final, predict_full_equilibrium(X, 0, 2.0))


def test_full_clustering_geometric_decay():
    X = full_cluster_config(np.random.default_rng(1), 5, 2, 1.5)
    traj = simulate(X, DynamicsConfig.scaled_identity(0.5), max_steps=30)
    d0 = np.linalg.norm(X - X[0], axis=1)
    for k, Xk in enumerate(traj.iterates):
        dk = np.linalg.norm(Xk - X[0], axis=1)
        # rounding of x_k is ~eps*|x|, so the error is measured against the initial displacement
        assert np.all(np.abs(dk - 0.5**k * d0) <= 1e-12 * d0)


def test_sphere_is_fixed_point():
    rng = np.random.default_rng(2)
    X = sphere_points(rng, 7, 3, 2.5)
    for gamma in (0.2, 1.0):
        for xi in (0.5, 3.0):
            assert np.array_equal(step(X, DynamicsConfig.scaled_identity(gamma, xi)), X)


def test_rank1_prediction_example():
    X = np.array([[2.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [-3.0, 0.0]])
    pred = predict_rank1_equilibrium(X, [1.0, 0.0])
    assert np.array_equal(pred, [[2.0, 0.0], [2.0, 0.0], [-3.0, 0.0], [-3.0, 0.0]])


def test_rank1_simulation_matches_prediction():
    X = np.array([[2.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [-3.0, 0.0]])
    traj = simulate(X, DynamicsConfig.rank_one(0.7, [1.0, 0.0]), max_steps=200)
    assert np.max(np.abs(traj.final - predict_rank1_equilibrium(X, [1.0, 0.0]))) < 1e-6
    one = simulate(X, DynamicsConfig.rank_one(1.0, [1.0, 0.0]), max_steps=1)
    assert np.array_equal(one.iterates[1], predict_rank1_equilibrium(X, [1.0, 0.0]))


def test_rank1_hypothesis_errors():
    with pytest.raises(HypothesisError):
        predict_rank1_equilibrium([[1.0, 0.0], [0.0, 1.0]], [1.0, 0.0])
    with pytest.raises(HypothesisError):
        predict_rank1_equilibrium([[1.0, 0.0], [1.0, 1.0], [-1.0, 0.0]], [1.0, 0.0])


def test_partial_prediction_example():
    X = np.array([[0.3, 0.4], [0.2, 0.9], [1.0, 1.0], [-0.6, -0.8]])
    pred = predict_partial_equilibrium(X, [2, 3], 1.0)
    assert np.array_equal(pred, [[1.0, 1.0], [1.0, 1.0], [1.0, 1.0], [-0.6, -0.8]])
    one = simulate(X, DynamicsConfig.scaled_identity(1.0), max_steps=1)
    assert np.array_equal(one.iterates[1], pred)
    slow = simulate(X, DynamicsConfig.scaled_identity(0.5), max_steps=200)
    assert np.max(np.abs(slow.final - pred)) < 1e-6


@pytest.mark.parametrize(
    "X, leaders, clause",
    [
        (np.array([[1.2, 0.5], [1.0, 1.0]]), [1], "clause i"),
        (np.array([[0.5, 0.5], [1.0, 0.9]]), [1], "clause ii"),
        (np.array([[0.5, 0.5], [1.0, 1.0], [-0.5, -0.5]]), [1, 2], "clause iii"),
        (np.array([[0.5, 0.5], [1.0, 1.0], [0.6, -0.8]]), [1, 2], "clause iii"),
    ],
)
def test_partial_hypothesis_clauses(X, leaders, clause):
    with pytest.raises(HypothesisError, match=clause):
        check_partial_hypotheses(X, leaders, 1.0)


def test_classification_labels():
    rng = np.random.default_rng(3)
    assert classify(sphere_points(rng, 4, 2, 1.0), DynamicsConfig.scaled_identity(1.0)).label == "no clustering"
    X = full_cluster_config(rng, 4, 2, 1.0)
    assert classify(X, DynamicsConfig.scaled_identity(1.0)).label == "full clustering"
    X = np.array([[0.3, 0.4], [0.2, 0.9], [1.0, 1.0], [-0.6, -0.8]])
    assert classify(X, DynamicsConfig.scaled_identity(1.0)).label == "partial clustering"
    assert classify(rng.normal(size=(5, 2)), DynamicsConfig.scaled_identity(1.0)).label == "unclassified"
    assert classify(np.array([[1.0, 0.0], [-2.0, 1.0]]), DynamicsConfig.rank_one(0.5, [1.0, 0.0])).label == "rank-one"


def test_trajectory_csv_columns():
    X = np.array([[1.0, 1.0], [0.5, 0.5]])
    traj = simulate(X, DynamicsConfig.scaled_identity(1.0))
    buf = _io.StringIO()
    write_trajectory_csv(buf, traj.iterates)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "step,token_index,coord_0,coord_1"
    assert lines[1] == "0,0,1,1" and lines[-1] == "1,1,1,1"


def test_default_max_steps():
    assert DynamicsConfig.scaled_identity(1.0).default_max_steps() == 2
    assert DynamicsConfig.scaled_identity(0.5).default_max_steps(1e-10) == 10 * math.ceil(math.log(1e-10) / math.log(0.5))


# --------------------------------------------------------------------------
# properties


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([0.3, 0.7, 1.0]))
def test_rank1_sign_and_range_invariant(seed, gamma):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(6, 3))
    v = rng.normal(size=3)
    try:
        predict_rank1_equilibrium(X, v)
    except HypothesisError:
        return
    p0 = X @ v
    traj = simulate(X, DynamicsConfig.rank_one(gamma, v), max_steps=60)
    for Xk in traj.iterates:
        pk = Xk @ v
        assert np.all(np.sign(pk) == np.sign(p0))
        assert np.all(pk <= p0.max() + 1e-12) and np.all(pk >= p0.min() - 1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 1.0))
def test_hull_shrinks(seed, gamma):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(8, 2))
    hull = Delaunay(X)
    Y = step(X, DynamicsConfig.scaled_identity(gamma, 1.0))
    # every new token is a convex combination of old ones
    assert np.all(hull.find_simplex(Y, tol=1e-9) >= 0)
