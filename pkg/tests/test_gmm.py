import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import multivariate_normal

from refinery import gmm
from refinery.core import Domain, RngStream
from refinery.gmm import GMMModel, bic, deploy_select, density, fit_em, sample, select_candidates, select_k


def naive_density(m, X):
    X = np.atleast_2d(X)
    return sum(w * multivariate_normal(mu, S).pdf(X) for w, mu, S in zip(m.weights, m.means, m.covariances))


def naive_bic(loglik, K, d, n):
    params = (K - 1) + K * d + K * d * (d + 1) / 2
    return -2 * loglik + params * np.log(n)


def two_clusters(seed=0, n=200, sigma=0.3):
    g = np.random.default_rng(seed)
    a = g.normal([-5, -5], sigma, (n, 2))
    b = g.normal([5, 5], sigma, (n, 2))
    return a, b


def random_model(seed, K=3, d=2):
    g = np.random.default_rng(seed)
    w = g.dirichlet(np.ones(K))
    mu = g.normal(0, 2, (K, d))
    A = g.normal(0, 0.6, (K, d, d))
    cov = A @ np.swapaxes(A, 1, 2) + 0.1 * np.eye(d)
    return GMMModel(w, mu, cov)


class TestModel:
    def test_standard_normal_peak(self):
        m = GMMModel(np.ones(1), np.zeros((1, 1)), np.ones((1, 1, 1)))
        assert density(m, [0.0]) == pytest.approx((2 * np.pi) ** -0.5, rel=1e-14)

    def test_midpoint_symmetry(self):
        m = GMMModel(np.array([0.5, 0.5]), np.array([[-1.0, 0.0], [1.0, 0.0]]), np.stack([np.eye(2)] * 2))
        c = np.exp(m.component_logpdf([[0.0, 0.0]]))[0]
        assert c[0] == pytest.approx(c[1], rel=1e-15)

    def test_naive_summation_oracle(self):
        m = random_model(0)
        Q = np.random.default_rng(1).normal(0, 2, (20, 2))
        got = density(m, Q)
        want = naive_density(m, Q)
        assert np.all(np.abs(got - want) <= 1e-10 * want)

    def test_integrates_to_one(self):
        m = random_model(2)
        sd = np.sqrt(np.stack([np.diag(S) for S in m.covariances]))
        lo = (m.means - 6 * sd).min(0)
        hi = (m.means + 6 * sd).max(0)
        U = lo + np.random.default_rng(3).random((1_000_000, 2)) * (hi - lo)
        integral = density(m, U).mean() * np.prod(hi - lo)
        assert 0.97 <= integral <= 1.03

    def test_validation(self):
        with pytest.raises(ValueError):
            GMMModel(np.array([0.5, 0.6]), np.zeros((2, 1)), np.ones((2, 1, 1)))
        with pytest.raises(ValueError):
            GMMModel(np.ones(1), np.zeros((1, 2)), np.array([[[1.0, 0.5], [0.0, 1.0]]]))

    def test_round_trip(self):
        m = random_model(4)
        m2 = GMMModel.from_json(m.to_json())
        assert np.array_equal(m.covariances, m2.covariances)
        assert np.array_equal(m.log_density([[0.1, 0.2]]), m2.log_density([[0.1, 0.2]]))
        # row-major covariance storage
        assert m.to_dict()["covariances"][0] == m.covariances[0].reshape(-1).tolist()

    @given(st.integers(0, 1000), st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=2))
    def test_density_positive_finite_near_data(self, seed, x):
        m = random_model(seed)
        q = np.clip(np.asarray(x), -30, 30)
        v = density(m, q)
        assert np.isfinite(v) and v >= 0
        assert np.isfinite(m.log_density(q)[0])


class TestFit:
    def test_two_cluster_means(self):
        a, b = two_clusters()
        X = np.vstack([a, b])
        m, _ = fit_em(X, 2, RngStream(0))
        got = m.means[np.argsort(m.means[:, 0])]
        assert np.all(np.abs(got[0] - a.mean(0)) < 0.1)
        assert np.all(np.abs(got[1] - b.mean(0)) < 0.1)
        assert np.allclose(m.weights, 0.5, atol=1e-6)

    def test_single_component_closed_form(self):
        X = np.random.default_rng(5).normal([1.0, -2.0, 0.5], [0.3, 1.0, 2.0], (150, 3))
        m, ll = fit_em(X, 1, RngStream(0))
        assert np.allclose(m.means[0], X.mean(0), rtol=0, atol=1e-12)
        want = np.cov(X.T, bias=True) + 1e-6 * np.eye(3)
        assert np.allclose(m.covariances[0], want, rtol=0, atol=1e-12)
        assert ll == pytest.approx(np.log(naive_density(m, X)).sum(), abs=1e-8)

    def test_duplicate_points(self):
        X = np.tile([[0.3, 0.7]], (20, 1))
        m, ll = fit_em(X, 1, RngStream(0))
        assert np.allclose(m.covariances[0], 1e-6 * np.eye(2), atol=1e-15)
        assert np.isfinite(ll)

    def test_too_few_points(self):
        with pytest.raises(ValueError):
            fit_em(np.zeros((2, 2)), 3, RngStream(0))

    def test_spherical_fallback_below_d_plus_one(self):
        X = np.array([[0.0, 0.0, 0.0], [1.0, 2.0, 0.0]])
        m, _ = fit_em(X, 2, RngStream(0))
        assert m.K == 1
        S = m.covariances[0]
        assert np.allclose(S, S[0, 0] * np.eye(3))

    def test_em_monotone(self):
        worst = 0.0
        for s in range(50):
            g = np.random.default_rng(s)
            k, n, d = g.integers(1, 5), g.integers(50, 400), g.integers(1, 4)
            centers = g.normal(scale=3, size=(k, d))
            X = centers[g.integers(k, size=n)] + g.normal(scale=g.uniform(0.1, 1), size=(n, d))
            init = gmm._kmeanspp(X, 3, RngStream(s).generator())
            m, trace = gmm.run_em(X, init)
            if len(trace) > 1:
                worst = min(worst, float(np.diff(trace).min()))
            assert trace[-1] == pytest.approx(m.log_density(X).sum(), abs=1e-6)
        assert worst >= -1e-9

    def test_weights_sum_to_one(self):
        m, _ = fit_em(np.vstack(two_clusters(1)), 3, RngStream(2))
        assert abs(m.weights.sum() - 1) <= 1e-9

    def test_deterministic(self):
        X = np.vstack(two_clusters(2))
        a, la = fit_em(X, 3, RngStream(9))
        b, lb = fit_em(X, 3, RngStream(9))
        assert la == lb and np.array_equal(a.means, b.means)


class TestSelectK:
    def test_one_cloud(self):
        X = np.random.default_rng(6).normal([0.4, 0.6], [0.05, 0.08], (300, 2))
        m = select_k(X, 8, RngStream(0))
        assert m.K == 1
        # oracle: K=1 closed-form MLE against the K=2 EM fit, both scored naively
        mu, S = X.mean(0), np.cov(X.T, bias=True) + 1e-6 * np.eye(2)
        b1 = naive_bic(multivariate_normal(mu, S).logpdf(X).sum(), 1, 2, 300)
        m2, _ = fit_em(X, 2, RngStream(0).child("K", 2))
        b2 = naive_bic(np.log(naive_density(m2, X)).sum(), 2, 2, 300)
        assert b1 < b2

    def test_two_clusters(self):
        a, b = two_clusters(3)
        X = np.vstack([a, b])
        m = select_k(X, 8, RngStream(0))
        assert m.K == 2
        mu, S = X.mean(0), np.cov(X.T, bias=True)
        b1 = naive_bic(multivariate_normal(mu, S).logpdf(X).sum(), 1, 2, len(X))
        # K=2 oracle from the known labels
        comps = [(0.5, c.mean(0), np.cov(c.T, bias=True)) for c in (a, b)]
        ll2 = np.log(sum(w * multivariate_normal(u, C).pdf(X) for w, u, C in comps)).sum()
        assert naive_bic(ll2, 2, 2, len(X)) < b1

    def test_bic_formula(self):
        m = random_model(0, K=3, d=2)
        assert bic(-100.0, m, 50) == pytest.approx(naive_bic(-100.0, 3, 2, 50))

    def test_forced_single_component(self):
        X = np.random.default_rng(0).random((5, 3))
        assert select_k(X, 8, RngStream(0)).K == 1

    def test_needs_two_points(self):
        with pytest.raises(ValueError):
            select_k(np.zeros((1, 2)), 8, RngStream(0))


class TestSample:
    def test_collapsed_covariance(self):
        m = GMMModel(np.ones(1), np.array([[0.3, -0.2]]), (1e-12 * np.eye(2))[None])
        X = sample(m, 1000, RngStream(0))
        assert np.max(np.abs(X - m.means[0])) < 1e-5

    def test_component_counts(self):
        m = GMMModel(np.array([0.5, 0.5]), np.array([[-100.0], [100.0]]), np.ones((2, 1, 1)))
        n = 10_000
        X = sample(m, n, RngStream(1))
        left = int((X[:, 0] < 0).sum())
        assert abs(left - 5000) <= 3 * np.sqrt(n * 0.25)

    def test_sample_mean(self):
        m = GMMModel(np.ones(1), np.array([[1.0, -1.0]]), np.array([[[4.0, 0.5], [0.5, 1.0]]]))
        n = 100_000
        X = sample(m, n, RngStream(2))
        assert np.all(np.abs(X.mean(0) - m.means[0]) <= 3 * np.sqrt(np.diag(m.covariances[0]) / n))

    def test_deterministic(self):
        m = random_model(3)
        assert np.array_equal(sample(m, 50, RngStream(4)), sample(m, 50, RngStream(4)))


class TestDeploySelect:
    dom = Domain((-10.0, -10.0), (10.0, 10.0))

    def test_unimodal_picks_min_mahalanobis(self):
        S = np.array([[1.0, 0.6], [0.6, 0.8]])
        m = GMMModel(np.ones(1), np.array([[0.5, -0.5]]), S[None])
        sel = select_candidates(m, 500, self.dom, RngStream(5))
        diff = sel.candidates - m.means[0]
        maha = np.einsum("ij,jk,ik->i", diff, np.linalg.inv(S), diff)
        assert np.array_equal(sel.point, sel.candidates[np.argmin(maha)])

    def test_single_candidate(self):
        m = random_model(6)
        sel = select_candidates(m, 1, self.dom, RngStream(7))
        assert len(sel.candidates) == 1
        assert np.array_equal(sel.point, sel.candidates[0])
        assert np.array_equal(deploy_select(m, 1, self.dom, RngStream(7)), sel.point)

    def test_exhaustive_scan(self):
        m = GMMModel(np.array([0.3, 0.7]), np.array([[-2.0, 1.0], [2.0, -1.0]]),
                     np.array([[[1.0, 0.3], [0.3, 0.5]], [[0.4, -0.2], [-0.2, 2.0]]]))
        sel = select_candidates(m, 1000, self.dom, RngStream(8))
        assert len(sel.candidates) == 1000
        dens = naive_density(m, sel.candidates)
        assert naive_density(m, sel.point) >= dens.max() * (1 - 1e-12)
        assert sel.density == pytest.approx(density(m, sel.point), rel=1e-12)

    def test_rejects_out_of_domain(self):
        dom = Domain((0.0, 0.0), (1.0, 1.0))
        m = GMMModel(np.ones(1), np.array([[1.0, 1.0]]), (0.25 * np.eye(2))[None])
        sel = select_candidates(m, 200, dom, RngStream(9))
        assert len(sel.candidates) == 200
        assert np.all(dom.contains(sel.candidates)) and not sel.fallback

    def test_fallback_when_nothing_lands_inside(self):
        dom = Domain((0.0, 0.0), (1.0, 1.0))
        m = GMMModel(np.array([0.2, 0.8]), np.array([[50.0, 50.0], [-40.0, 0.5]]), np.stack([np.eye(2)] * 2))
        sel = select_candidates(m, 10, dom, RngStream(0))
        assert sel.fallback and len(sel.candidates) == 0
        assert np.array_equal(sel.point, [0.0, 0.5])

    def test_deterministic(self):
        m = random_model(7)
        a = deploy_select(m, 300, self.dom, RngStream(1))
        assert np.array_equal(a, deploy_select(m, 300, self.dom, RngStream(1)))
