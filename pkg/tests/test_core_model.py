import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from otafl.core_model import (DimensionError, DivergenceError, GlobalObjective, LossModel, Sample, check_finite,
                              eval_grad, eval_loss, finite_diff_grad, global_grad, global_grad_norm_sq, global_loss)
from otafl.data import Dataset, partition_equal, synth_dataset

import oracles

QUAD = LossModel("quadratic")
LOGI = LossModel("logistic", lam=0.1)


def test_quadratic_loss_at_minimum_is_zero():
    assert eval_loss(QUAD, np.zeros(2), Sample(np.array([3.0, -1.0]), 0.0)) == 0.0


def test_quadratic_half_norm():
    # zero target: f = 0.5 ||theta||^2
    assert eval_loss(QUAD, np.array([1.0, 0.0]), Sample(np.array([5.0, 5.0]), 0.0)) == 0.5
    np.testing.assert_array_equal(eval_grad(QUAD, np.array([1.0, 0.0]), Sample(np.ones(2), 0.0)), [1.0, 0.0])


def test_logistic_at_zero_is_log2():
    m = LossModel("logistic", lam=0.0)
    x = np.array([0.3, -2.0, 1.0])
    assert eval_loss(m, np.zeros(3), Sample(x, 1.0)) == pytest.approx(math.log(2), abs=1e-15)
    np.testing.assert_allclose(eval_grad(m, np.zeros(3), Sample(x, 1.0)), -x / 2)


def test_dimension_mismatch_raises():
    with pytest.raises(DimensionError):
        eval_loss(QUAD, np.zeros(3), Sample(np.zeros(2), 0.0))
    with pytest.raises(DimensionError):
        eval_grad(LOGI, np.zeros(1), Sample(np.zeros(2), 1.0))


def test_finite_diff_exact_on_quadratic():
    g = finite_diff_grad(QUAD, np.array([1.0, 0.0]), Sample(np.zeros(2), 0.0), h=1e-6)
    np.testing.assert_allclose(g, [1.0, 0.0], atol=1e-9)


def test_finite_diff_rejects_bad_step():
    for h in (0.0, -1e-3):
        with pytest.raises(ValueError):
            finite_diff_grad(QUAD, np.zeros(2), Sample(np.zeros(2), 0.0), h=h)


def test_finite_diff_of_constant_loss():
    # logistic with zero features and no penalty is constant in theta
    m = LossModel("logistic", lam=0.0)
    np.testing.assert_array_equal(finite_diff_grad(m, np.array([0.4, -3.0]), Sample(np.zeros(2), 1.0)), 0.0)


@given(st.integers(1, 50), st.sampled_from(["quadratic", "logistic"]), st.integers(0, 2**31 - 1))
def test_grad_matches_finite_difference(d, kind, seed):
    rng = np.random.default_rng(seed)
    model = LossModel(kind, 0.1)
    theta = rng.normal(size=d)
    sample = Sample(rng.normal(size=d), float(rng.choice([-1.0, 1.0])))
    g = eval_grad(model, theta, sample)
    fd = finite_diff_grad(model, theta, sample)
    assert np.linalg.norm(g - fd) / (1 + np.linalg.norm(g)) <= 1e-5


@given(st.integers(1, 8), st.sampled_from(["quadratic", "logistic"]), st.integers(0, 2**31 - 1))
def test_loss_and_grad_match_plain_python(d, kind, seed):
    rng = np.random.default_rng(seed)
    theta, x, y = rng.normal(size=d), rng.normal(size=d), float(rng.choice([-1.0, 1.0]))
    model = LossModel(kind, 0.1)
    assert eval_loss(model, theta, Sample(x, y)) == pytest.approx(oracles.loss(kind, theta, x, y), rel=1e-12)
    np.testing.assert_allclose(eval_grad(model, theta, Sample(x, y)), oracles.sample_grad(kind, theta, x, y),
                               rtol=1e-10, atol=1e-12)


def test_logistic_stable_at_extreme_margins():
    x = np.array([1.0])
    for t in (-800.0, 800.0):
        assert np.isfinite(eval_loss(LOGI, np.array([t]), Sample(x, 1.0)))
        assert np.all(np.isfinite(eval_grad(LOGI, np.array([t]), Sample(x, 1.0))))


def test_global_grad_norm_sq_trivial_cases():
    zeros = Dataset(np.ones((4, 2)), np.zeros(4))
    shards = partition_equal(zeros, 2, 0).shards
    assert global_grad_norm_sq(QUAD, np.zeros(2), shards) == 0.0
    one = [Dataset(np.ones((3, 2)), np.zeros(3))]
    assert global_grad_norm_sq(QUAD, np.array([1.0, 0.0]), one) == 1.0


def test_global_grad_logistic_matches_brute_force():
    ds = synth_dataset(10, 3, seed=4)
    shards = partition_equal(ds, 3, 0).shards
    theta = np.array([0.2, -1.0, 0.5])
    ref = oracles.global_grad("logistic", theta, [(s.X.tolist(), s.y.tolist()) for s in shards])
    np.testing.assert_allclose(global_grad(LOGI, theta, shards), ref, rtol=1e-12)
    assert global_grad_norm_sq(LOGI, theta, shards) == pytest.approx(sum(v * v for v in ref), rel=1e-12)


def test_global_functions_reject_empty():
    with pytest.raises(ValueError):
        global_grad(QUAD, np.zeros(2), [])
    with pytest.raises(ValueError):
        global_loss(QUAD, np.zeros(2), [])


@given(st.integers(0, 2**31 - 1))
def test_global_grad_norm_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    ds = synth_dataset(24, 4, seed=seed % 1000)
    shards = partition_equal(ds, 4, 1).shards
    theta = rng.normal(size=4)
    ref = global_grad_norm_sq(LOGI, theta, shards)
    order = rng.permutation(len(shards))
    shuffled = [shards[i].subset(rng.permutation(len(shards[i]))) for i in order]
    assert global_grad_norm_sq(LOGI, theta, shuffled) == pytest.approx(ref, rel=1e-12)


def test_quadratic_zero_target_objective_is_half_n_norm():
    n_dev = 5
    ds = Dataset(np.random.default_rng(0).normal(size=(20, 3)), np.zeros(20))
    shards = partition_equal(ds, n_dev, 0).shards
    theta = np.array([1.0, -2.0, 0.5])
    assert global_loss(QUAD, theta, shards) == pytest.approx(0.5 * n_dev * theta @ theta)


@given(st.sampled_from(["quadratic", "logistic"]), st.integers(0, 2**31 - 1))
def test_stacked_objective_matches_per_shard_sum(kind, seed):
    model = LossModel(kind)
    ds = synth_dataset(23, 3, seed=seed % 997)
    shards = partition_equal(ds, 4, seed % 13).shards
    theta = np.random.default_rng(seed).normal(size=3)
    obj = GlobalObjective(model, shards)
    np.testing.assert_allclose(obj.grad(theta), global_grad(model, theta, shards), rtol=1e-12, atol=1e-14)
    assert obj.loss(theta) == pytest.approx(global_loss(model, theta, shards), rel=1e-12)


def test_hessian_bound_dominates_numeric_curvature():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(30, 4))
    b = LOGI.hessian_bound(X)
    for _ in range(20):
        theta, u = rng.normal(size=4), rng.normal(size=4)
        u /= np.linalg.norm(u)
        i = rng.integers(30)
        s = Sample(X[i], 1.0)
        h = 1e-4
        curv = (eval_loss(LOGI, theta + h * u, s) - 2 * eval_loss(LOGI, theta, s) + eval_loss(LOGI, theta - h * u, s)) / h**2
        assert abs(curv) <= b + 1e-4


def test_lipschitz_bound_dominates_differences():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(40, 3))
    y = rng.choice([-1.0, 1.0], size=40)
    L = LOGI.lipschitz_bound(X, y)
    for _ in range(200):
        t, u = rng.normal(size=3) * 3, rng.normal(size=3)
        i = rng.integers(40)
        s = Sample(X[i], y[i])
        assert abs(eval_loss(LOGI, t + u, s) - eval_loss(LOGI, t - u, s)) <= 2 * L * np.linalg.norm(u) + 1e-12
    with pytest.raises(ValueError):
        QUAD.lipschitz_bound(X, y)


def test_check_finite():
    check_finite(np.ones(3))
    with pytest.raises(DivergenceError):
        check_finite(np.array([1.0, np.nan]))
    with pytest.raises(DivergenceError):
        check_finite(np.array([2e6]))


def test_loss_model_validation():
    with pytest.raises(ValueError):
        LossModel("hinge")
    with pytest.raises(ValueError):
        LossModel("logistic", lam=-1)
