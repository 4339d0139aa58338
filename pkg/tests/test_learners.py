import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from orthomom.errors import BadSpec, DimensionMismatch, NonFinite, RankDeficient, TooFewRows
from orthomom.learners import (LearnerSpec, cross_fit, fit, lambda_max, lasso_cd, lasso_objective, make_plan,
                               predict)


def _data(n=200, d=3, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, d))
    y = 1.0 + x @ np.arange(1, d + 1) + 0.1 * rng.normal(size=n)
    return x, y


def test_least_squares_exact_on_small_system():
    # y = 2 + 3 x solved by hand
    x = np.array([[0.0], [1.0], [2.0]])
    y = np.array([2.0, 5.0, 8.0])
    m = fit(LearnerSpec("least-squares"), x, y)
    np.testing.assert_allclose(predict(m, [[10.0]]), [32.0])


def test_least_squares_rank_errors():
    with pytest.raises(RankDeficient):
        fit(LearnerSpec("least-squares"), np.ones((5, 1)), np.arange(5.0))
    with pytest.raises(RankDeficient):
        fit(LearnerSpec("least-squares"), np.zeros((2, 3)), np.zeros(2))


def test_ridge_matches_closed_form():
    x, y = _data()
    lam = 3.0
    xc = x - x.mean(axis=0)
    beta = np.linalg.solve(xc.T @ xc + lam * np.eye(3), xc.T @ (y - y.mean()))
    m = fit(LearnerSpec("ridge", {"lam": lam}), x, y)
    np.testing.assert_allclose(m.state["coef"], beta, rtol=1e-10)


def test_lasso_orthogonal_design_is_soft_threshold():
    # standardized orthogonal columns: the solution is the soft-thresholded covariance
    n = 8
    x = np.array([[1, 1, 1], [1, 1, -1], [1, -1, 1], [1, -1, -1],
                  [-1, 1, 1], [-1, 1, -1], [-1, -1, 1], [-1, -1, -1]], dtype=float)
    y = x @ np.array([2.0, -0.5, 0.05])
    lam = 0.3
    m = fit(LearnerSpec("l1", {"lam": lam}), x, y)
    cov = x.T @ y / n
    expected = np.sign(cov) * np.maximum(np.abs(cov) - lam, 0.0)
    np.testing.assert_allclose(m.state["coef"], expected, atol=1e-9)


def test_lasso_kkt_conditions():
    x, y = _data(300, 6, seed=2)
    lam = 0.4
    m = fit(LearnerSpec("l1", {"lam": lam}), x, y)
    xs = (x - x.mean(axis=0)) / x.std(axis=0)
    b = m.state["coef"] * x.std(axis=0)
    grad = xs.T @ (y - y.mean() - xs @ b) / x.shape[0]
    active = np.abs(b) > 1e-10
    np.testing.assert_allclose(grad[active], lam * np.sign(b[active]), atol=1e-6)
    assert np.all(np.abs(grad[~active]) <= lam + 1e-6)


def test_lasso_lambda_max_zeroes_everything():
    x, y = _data(100, 4, seed=3)
    lmax = lambda_max(x, y)
    m = fit(LearnerSpec("l1", {"lam": lmax * 1.0001}), x, y)
    assert np.all(m.state["coef"] == 0)
    m = fit(LearnerSpec("l1", {"lam_ratio": 0.5}), x, y)
    assert m.state["lam"] == pytest.approx(0.5 * lmax)


def test_lasso_cv_selects_small_penalty_on_clean_signal():
    x, y = _data(300, 4, seed=4)
    m = fit(LearnerSpec("l1"), x, y)
    np.testing.assert_allclose(m.state["coef"], [1, 2, 3, 4], atol=0.05)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), lam=st.floats(0.0, 2.0))
def test_lasso_objective_decreases_per_sweep(seed, lam):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(30, 5))
    y = rng.normal(size=30)
    gram, cov = x.T @ x / 30, x.T @ y / 30
    hist = []
    beta = lasso_cd(gram, cov, lam, history=hist)
    start = lasso_objective(gram, cov, 0.0, np.zeros(5), lam)
    seq = [start] + hist
    assert all(b <= a + 1e-12 for a, b in zip(seq, seq[1:]))
    assert np.all(np.isfinite(beta))


def test_kernel_matches_direct_nadaraya_watson():
    x, y = _data(50, 2, seed=5)
    h = np.array([0.7, 1.1])
    m = fit(LearnerSpec("kernel", {"bandwidth": list(h)}), x, y)
    q = np.array([[0.1, -0.3], [2.0, 1.0]])
    expected = []
    for row in q:
        w = np.exp(-0.5 * np.sum(((row - x) / h) ** 2, axis=1))
        expected.append(np.sum(w * y) / np.sum(w))
    np.testing.assert_allclose(predict(m, q), expected, rtol=1e-12)


def test_knn_matches_brute_force():
    x, y = _data(40, 2, seed=6)
    m = fit(LearnerSpec("knn", {"k": 3}), x, y)
    q = np.array([[0.0, 0.0], [1.0, -1.0]])
    for row, got in zip(q, predict(m, q)):
        idx = np.argsort(np.sum((x - row) ** 2, axis=1))[:3]
        assert got == pytest.approx(y[idx].mean())


def test_boosted_stumps_fit_a_step():
    x = np.linspace(-1, 1, 200)[:, None]
    y = (x[:, 0] > 0.2).astype(float)
    m = fit(LearnerSpec("boosted-stumps", {"rounds": 200, "learning_rate": 0.3}), x, y)
    pred = predict(m, x)
    assert np.mean((pred - y) ** 2) < 1e-3
    m1 = fit(LearnerSpec("boosted-stumps", {"rounds": 5}), x, y)
    assert np.mean((predict(m1, x) - y) ** 2) > np.mean((pred - y) ** 2)


def test_spec_validation():
    with pytest.raises(BadSpec):
        LearnerSpec("forest")
    with pytest.raises(BadSpec):
        LearnerSpec("ridge", {"lam": -1})
    with pytest.raises(BadSpec):
        LearnerSpec("l1", {"lam_ratio": 2})
    with pytest.raises(BadSpec):
        LearnerSpec("knn", {"k": 0})
    with pytest.raises(BadSpec):
        LearnerSpec("ridge", {"alpha": 1})
    assert LearnerSpec.from_dict({"method": "ridge", "lam": 2.0}).params["lam"] == 2.0
    with pytest.raises(BadSpec):
        LearnerSpec.from_dict({"lam": 2.0})


def test_fit_input_errors():
    x, y = _data(20, 2)
    with pytest.raises(DimensionMismatch):
        fit(LearnerSpec("ridge"), x[:10], y)
    bad = x.copy()
    bad[0, 0] = np.inf
    with pytest.raises(NonFinite):
        fit(LearnerSpec("ridge"), bad, y)
    m = fit(LearnerSpec("ridge"), x, y)
    with pytest.raises(DimensionMismatch):
        predict(m, np.ones((3, 5)))


def test_cross_fit_plan_properties():
    plan = make_plan(23, 5, seed=1)
    sizes = np.bincount(plan.assignment)
    assert sizes.max() - sizes.min() <= 1
    np.testing.assert_array_equal(plan.assignment, make_plan(23, 5, seed=1).assignment)
    with pytest.raises(BadSpec):
        make_plan(10, 1, 0)
    with pytest.raises(TooFewRows):
        make_plan(3, 5, 0)


def test_cross_fit_is_out_of_fold():
    x, y = _data(60, 2, seed=8)
    spec = LearnerSpec("least-squares")
    base = cross_fit(spec, x, y, k=4, seed=3)
    fold0 = base.plan.assignment == 0
    y2 = y.copy()
    y2[fold0] += 100.0
    moved = cross_fit(spec, x, y2, k=4, seed=3)
    # predictions for fold 0 never see fold-0 targets
    np.testing.assert_allclose(moved.values[fold0], base.values[fold0])
    assert not np.allclose(moved.values[~fold0], base.values[~fold0])


@settings(max_examples=20, deadline=None)
@given(n=st.integers(10, 80), k=st.integers(2, 6), seed=st.integers(0, 1000))
def test_cross_fit_partition(n, k, seed):
    plan = make_plan(n, k, seed)
    seen = np.zeros(n, dtype=int)
    for train, test in plan.folds():
        assert not np.any(train & test)
        seen += test
    assert np.all(seen == 1)


def test_exact_linear_signal_recovered_by_every_linear_learner():
    x, _ = _data(100, 3, seed=9)
    y = 0.5 + x @ np.array([1.0, -1.0, 2.0])
    for spec in (LearnerSpec("least-squares"), LearnerSpec("ridge", {"lam": 0.0}),
                 LearnerSpec("l1", {"lam": 0.0})):
        m = fit(spec, x, y)
        np.testing.assert_allclose(predict(m, x), y, atol=1e-6)
    assert math.isfinite(lambda_max(x, y))


# -- worked examples ----------------------------------------------------------------

def test_noiseless_least_squares_slope():
    x = np.arange(10.0)[:, None]
    m = fit(LearnerSpec("least-squares"), x, 2 * x[:, 0])
    assert m.state["coef"][0] == pytest.approx(2.0, abs=1e-10)
    # interpolating fit reproduces training targets
    np.testing.assert_allclose(predict(m, x[3:4]), [6.0], atol=1e-10)


def test_ridge_shrinkage_limit():
    x, y = _data(50, 3, seed=10)
    m = fit(LearnerSpec("ridge", {"lam": 1e8}), x, y)
    assert np.all(np.abs(m.state["coef"]) < 1e-4)


def test_constant_limits():
    x, y = _data(40, 2, seed=11)
    # stumps that can never split (leaf size too large) predict the mean
    m = fit(LearnerSpec("boosted-stumps", {"min_leaf": 40}), x, y)
    np.testing.assert_allclose(predict(m, x[:5]), y.mean())
    # a flat kernel averages every training target
    m = fit(LearnerSpec("kernel", {"bandwidth": 1e6}), x, y)
    np.testing.assert_allclose(predict(m, x[:5]), y.mean(), atol=1e-6)


def test_leave_one_out_identity():
    rng = np.random.default_rng(12)
    y = rng.normal(size=9)
    oof = cross_fit(LearnerSpec("least-squares"), np.empty((9, 0)), y, k=9, seed=0)
    np.testing.assert_allclose(oof.values, (y.sum() - y) / 8)


def test_balanced_fold_sizes():
    sizes = sorted(np.bincount(make_plan(103, 5, seed=2).assignment).tolist())
    assert sizes == [20, 20, 21, 21, 21]


def test_noiseless_cross_fit_recovers_truth():
    x, _ = _data(100, 3, seed=13)
    y = 1.0 + x @ np.array([0.5, -2.0, 1.0])
    oof = cross_fit(LearnerSpec("least-squares"), x, y, k=5, seed=1)
    assert np.max(np.abs(oof.values - y)) < 1e-8


def test_leakage_single_row():
    x, y = _data(50, 2, seed=14)
    spec = LearnerSpec("ridge", {"lam": 0.1})
    base = cross_fit(spec, x, y, k=5, seed=0).values
    y2 = y.copy()
    y2[7] += 50.0
    moved = cross_fit(spec, x, y2, k=5, seed=0).values
    assert moved[7] == base[7]


def test_learner_spec_json_round_trip():
    spec = LearnerSpec("boosted-stumps", {"rounds": 7, "depth": 2})
    assert LearnerSpec.from_dict(spec.to_dict()) == spec
