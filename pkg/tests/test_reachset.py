import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.integrate import quad
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from holdreach.reachset import (SIGMA_MIN, InfeasibleFitError, RbfEstimate, RbfReachSet,
                                contains, count_support_scenarios, count_violations, fit_rbf,
                                initialize_rbf, kmeans_init, rbf_scores, score, support_scenarios,
                                volume_proxy)

R_BOUNDARY = math.sqrt(2 * math.log(4))


def ring(n=100, r=1.0, center=(0.0, 0.0)):
    a = np.linspace(0, 2 * np.pi, n, endpoint=False)
    return np.column_stack([r * np.cos(a), r * np.sin(a)]) + center


def single(center=(0.0, 0.0), width=1.0, gamma=0.25):
    return RbfEstimate(np.array([center]), np.array([width]), gamma)


class TestScore:
    def test_at_center(self):
        assert score(single(), [0.0, 0.0])[0] == 1.0

    def test_one_width_away(self):
        assert score(single(width=0.7), [0.0, 0.7])[0] == pytest.approx(math.exp(-0.5), rel=1e-15)

    def test_two_centers_equidistant(self):
        est = RbfEstimate(np.array([[-1.0, 0.0], [1.0, 0.0]]), np.array([1.0, 1.0]), 0.25)
        assert score(est, [0.0, 0.0])[0] == pytest.approx(2 * math.exp(-0.5), rel=1e-15)

    def test_matches_direct_sum(self):
        rng = np.random.default_rng(0)
        mu, sig, X = rng.normal(size=(3, 4)), rng.uniform(0.5, 2, 3), rng.normal(size=(50, 4))
        direct = [sum(math.exp(-np.sum((x - c) ** 2) / (2 * s * s)) for c, s in zip(mu, sig))
                  for x in X]
        np.testing.assert_allclose(rbf_scores(X, mu, sig), direct, rtol=1e-13)

    def test_chunked_evaluation_consistent(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(70_000, 2))
        est = single(width=0.5)
        full = est.score(X)
        np.testing.assert_array_equal(full[:10], est.score(X[:10]))
        np.testing.assert_array_equal(full[-10:], est.score(X[-10:]))

    def test_dimension_check(self):
        with pytest.raises(ValueError):
            single().score([[1.0, 2.0, 3.0]])


class TestContains:
    def test_center_inside(self):
        assert contains(single(), [0.0, 0.0])[0]

    def test_boundary(self):
        est = single(width=1.3)
        x = np.array([[1.3 * R_BOUNDARY, 0.0]])
        assert est.score(x)[0] == pytest.approx(0.25, abs=1e-15)
        assert est.contains(x)[0] == (est.score(x)[0] >= 0.25)
        at_level = RbfEstimate(est.centers, est.widths, float(est.score(x)[0]))
        assert at_level.contains(x)[0]

    def test_far_point(self):
        assert not contains(single(width=0.2), [2.0, 0.0])[0]

    @given(arrays(float, (20, 2), elements=st.floats(-3, 3)), st.floats(0.05, 0.95))
    def test_consistent_with_score(self, X, gamma):
        est = RbfEstimate(np.array([[0.0, 0.0], [1.0, -1.0]]), np.array([0.8, 0.4]), gamma)
        np.testing.assert_array_equal(est.contains(X), est.score(X) >= gamma)
        np.testing.assert_array_equal(est.level(X) <= 0, est.contains(X))


@settings(max_examples=80)
@given(arrays(float, (3, 2), elements=st.floats(-2, 2)),
       arrays(float, 3, elements=st.floats(0.01, 3)),
       arrays(float, (10, 2), elements=st.floats(-4, 4)),
       st.floats(1.0, 10.0))
def test_inflating_widths_never_removes_points(mu, sig, X, kappa):
    before = rbf_scores(X, mu, sig)
    after = rbf_scores(X, mu, sig * kappa)
    assert np.all(after >= before)
    assert np.all((after >= 0.25) | (before < 0.25))


def test_volume_proxy():
    est = RbfEstimate(np.zeros((3, 2)), np.array([1.0, SIGMA_MIN, SIGMA_MIN]), 0.25)
    assert volume_proxy(est) == pytest.approx(1.0, abs=1e-5)
    assert RbfEstimate(np.zeros((2, 1)), np.array([3.0, 4.0]), 0.25).volume_proxy == 5.0


class TestKmeans:
    def test_single_center_is_centroid(self):
        X = np.random.default_rng(2).normal(size=(40, 3))
        np.testing.assert_allclose(kmeans_init(X, 1), X.mean(axis=0)[None], atol=1e-14)

    def test_two_clusters(self):
        rng = np.random.default_rng(3)
        a = rng.uniform(0, 0.1, (30, 2))
        b = rng.uniform(5, 5.1, (30, 2))
        X = np.vstack([a, b])
        C = kmeans_init(X, 2, seed=0)

        best = ((a - a.mean(0)) ** 2).sum() + ((b - b.mean(0)) ** 2).sum()
        got = ((X[:, None] - C[None]) ** 2).sum(axis=2).min(axis=1).sum()
        assert got == pytest.approx(best, rel=1e-12)
        inside_a = np.all((C >= 0) & (C <= 0.1), axis=1)
        inside_b = np.all((C >= 5) & (C <= 5.1), axis=1)
        assert inside_a.sum() == 1 and inside_b.sum() == 1

    def test_brute_force_small(self):
        X = np.array([[0.0, 0.0], [0.2, 0.1], [0.1, 0.3], [4.0, 4.0], [4.2, 3.9], [3.8, 4.1]])

        def inertia(C):
            return ((X[:, None] - C[None]) ** 2).sum(axis=2).min(axis=1).sum()

        best = min(inertia(np.array([X[lab == 0].mean(0), X[lab == 1].mean(0)]))
                   for lab in map(np.array, itertools.product([0, 1], repeat=len(X)))
                   if 0 < lab.sum() < len(X))
        assert inertia(kmeans_init(X, 2, seed=5)) == pytest.approx(best, rel=1e-12)

    def test_deterministic(self):
        X = np.random.default_rng(4).normal(size=(100, 2))
        np.testing.assert_array_equal(kmeans_init(X, 3, seed=9), kmeans_init(X, 3, seed=9))

    def test_too_many_centers(self):
        with pytest.raises(ValueError):
            kmeans_init(np.zeros((2, 2)), 3)


class TestFit:
    def test_one_sample(self):
        est, rep = fit_rbf([[0.4, -1.0]], 1)
        np.testing.assert_allclose(est.centers, [[0.4, -1.0]], atol=1e-12)
        assert est.widths[0] == pytest.approx(SIGMA_MIN, rel=1e-9)
        assert rep.constraint_violation == 0.0

    def test_identical_samples(self):
        est, _ = fit_rbf(np.tile([[2.0, 3.0]], (25, 1)), 1)
        np.testing.assert_allclose(est.centers, [[2.0, 3.0]], atol=1e-12)
        assert est.widths[0] == pytest.approx(SIGMA_MIN, rel=1e-9)

    @pytest.mark.parametrize("r", [0.5, 1.0, 3.0])
    def test_ring_matches_analytic_cover(self, r):
        X = ring(100, r)
        est, rep = fit_rbf(X, 1, 0.25)
        sigma_star = r / R_BOUNDARY
        assert rep.objective == pytest.approx(sigma_star ** 2, rel=0.01)
        assert np.linalg.norm(est.centers[0]) < 0.01 * r
        assert est.score(X).min() >= 0.25 - 1e-6

    def test_feasible_and_no_worse_than_start(self):
        X = np.random.default_rng(6).normal(size=(200, 2)) * [1.0, 0.3]
        for m in (1, 2, 3):
            est, rep = fit_rbf(X, m, 0.25, seed=1)
            assert est.score(X).min() >= 0.25 - 1e-6
            _, w0 = initialize_rbf(X, m, 0.25, 1)
            assert rep.objective <= np.sum(w0 ** 2) + 1e-12
            assert np.all(est.widths >= SIGMA_MIN)

    @settings(max_examples=15, deadline=None)
    @given(st.floats(-50, 50), st.floats(-50, 50), st.integers(0, 3))
    def test_translation_equivariance(self, cx, cy, seed):
        X = np.random.default_rng(seed).normal(size=(40, 2)) * [0.5, 0.2]
        a, ra = fit_rbf(X, 2, seed=seed)
        b, rb = fit_rbf(X + [cx, cy], 2, seed=seed)
        np.testing.assert_allclose(b.centers, a.centers + [cx, cy], atol=1e-6)
        np.testing.assert_allclose(b.widths, a.widths, atol=1e-6)
        assert rb.objective == pytest.approx(ra.objective, rel=1e-6)

    def test_bad_gamma(self):
        with pytest.raises(ValueError):
            fit_rbf(ring(), 1, gamma=1.0)

    def test_non_finite(self):
        with pytest.raises(ValueError):
            fit_rbf([[0.0, np.nan]], 1)

    def test_infeasible_carries_report(self):
        err = InfeasibleFitError("x", None)
        assert err.report is None


class TestSupport:
    def test_single_sample(self):
        assert count_support_scenarios([[1.0, 1.0]], 1) == 1

    def test_outlier_is_support(self):
        X = np.vstack([ring(30, 1.0), [[3.0, 0.0]]])
        idx = support_scenarios(X, 1)
        assert 30 in idx
        # brute force: dropping the outlier shrinks the set measurably
        full, _ = fit_rbf(X, 1)
        without, _ = fit_rbf(X[:30], 1)
        assert without.widths[0] < 0.9 * full.widths[0]

    def test_duplicated_dataset_has_no_support(self):
        X = np.random.default_rng(7).normal(size=(20, 2))
        assert count_support_scenarios(np.vstack([X, X]), 1) == 0
        assert count_support_scenarios(np.vstack([X, X]), 2) == 0

    def test_bounded_by_n(self):
        X = np.random.default_rng(8).normal(size=(25, 2))
        s = count_support_scenarios(X, 2)
        assert 1 <= s <= 25


class TestViolations:
    def test_training_samples_inside(self):
        X = np.random.default_rng(9).normal(size=(150, 2))
        est, _ = fit_rbf(X, 2)
        assert count_violations(est, X) == 0

    def test_distant_point(self):
        est = single(width=SIGMA_MIN)
        assert count_violations(est, [[1.0, 1.0]]) == 1

    def test_against_radial_quadrature(self):
        sigma, gamma, half = 0.6, 0.25, 2.0
        est = single(width=sigma, gamma=gamma)
        # the inside region is a disc well within the box; integrate its area radially
        area, _ = quad(lambda r: 2 * np.pi * r * (math.exp(-r * r / (2 * sigma ** 2)) >= gamma),
                       0, half, points=[sigma * R_BOUNDARY], limit=200)
        p = area / (2 * half) ** 2
        n = 10_000
        X = np.random.default_rng(10).uniform(-half, half, (n, 2))
        inside = n - count_violations(est, X)
        assert abs(inside / n - p) <= 3 * math.sqrt(p * (1 - p) / n)

    def test_empty_holdout(self):
        with pytest.raises(ValueError):
            count_violations(single(), np.zeros((0, 2)))


def test_json_round_trip_is_exact():
    X = np.random.default_rng(11).normal(size=(60, 3))
    est, _ = fit_rbf(X, 2)
    back = RbfEstimate.from_json(est.to_json())
    assert back.centers.tobytes() == est.centers.tobytes()
    assert back.widths.tobytes() == est.widths.tobytes()
    assert back.threshold == est.threshold and back.metadata == est.metadata


class TestEstimator:
    def test_params_and_clone(self):
        m = RbfReachSet(n_basis=3, threshold=0.3, random_state=4)
        assert m.get_params()["n_basis"] == 3
        c = clone(m)
        assert c.get_params() == m.get_params()
        assert m.set_params(n_basis=1).n_basis == 1

    def test_not_fitted(self):
        with pytest.raises(NotFittedError):
            RbfReachSet().predict([[0.0, 0.0]])

    def test_fit_predict(self):
        X = np.random.default_rng(12).normal(size=(80, 2))
        model = RbfReachSet(n_basis=2).fit(X)
        assert np.all(model.predict(X) == 1)
        assert model.predict([[50.0, 50.0]])[0] == -1
        assert model.count_violations(X) == 0
        est, _ = fit_rbf(X, 2)
        np.testing.assert_array_equal(model.centers_, est.centers)
        assert model.volume_proxy_ == est.volume_proxy
        np.testing.assert_allclose(model.decision_function(X), model.score_samples(X) - 0.25)

    def test_feature_mismatch(self):
        model = RbfReachSet(n_basis=1).fit(np.zeros((3, 2)) + np.arange(3)[:, None])
        with pytest.raises(ValueError):
            model.predict(np.zeros((2, 3)))
