import numpy as np
import pytest
from scipy import integrate, stats

from feasible_brnn.data import Dataset
from feasible_brnn.dynamics import car_following_dynamics, toy_brnn_dynamics
from feasible_brnn.gmm import (
    ComponentCollapseError,
    GmmModel,
    GmmPolicy,
    condition,
    fit_em,
    fit_gmm_policy,
    gmm_rollout,
    joint_training_data,
)
from feasible_brnn.policy import FeatureNormalizer


def two_clusters(rng, n=2000):
    a = rng.multivariate_normal([-3.0, 0.0], [[0.3, 0.1], [0.1, 0.2]], n // 2)
    b = rng.multivariate_normal([3.0, 2.0], [[0.2, -0.05], [-0.05, 0.4]], n // 2)
    return np.vstack([a, b])


def random_model(rng, K=3, d=3):
    A = rng.standard_normal((K, d, d))
    covs = A @ A.transpose(0, 2, 1) + 0.5 * np.eye(d)
    w = rng.dirichlet(np.ones(K))
    return GmmModel(w, rng.standard_normal((K, d)) * 2, covs)


class TestEm:
    def test_single_component_is_sample_moments(self, rng):
        x = rng.standard_normal((500, 3)) @ rng.standard_normal((3, 3))
        m = fit_em(x, 1, rng=rng, reg=0.0)
        np.testing.assert_allclose(m.means[0], x.mean(0), atol=1e-12)
        np.testing.assert_allclose(m.covs[0], np.cov(x.T, bias=True), atol=1e-12)
        assert m.weights[0] == 1.0

    def test_recovers_separated_clusters(self, rng):
        m = fit_em(two_clusters(rng), 2, rng=rng)
        order = np.argsort(m.means[:, 0])
        np.testing.assert_allclose(m.means[order], [[-3.0, 0.0], [3.0, 2.0]], atol=0.05)
        np.testing.assert_allclose(m.weights[order], [0.5, 0.5], atol=1e-3)

    def test_log_likelihood_non_decreasing(self, rng):
        x = np.vstack([two_clusters(rng, 600), rng.standard_normal((300, 2)) * 3])
        m = fit_em(x, 4, rng=rng, tol=0.0, max_iter=60)
        assert len(m.log_likelihood_trace) > 5
        assert np.all(np.diff(m.log_likelihood_trace) >= -1e-9)

    def test_monotone_on_rank_deficient_data(self, rng):
        base = np.vstack([two_clusters(rng, 400), rng.standard_normal((200, 2)) * 3])
        x = np.column_stack([base, base @ [1.0, -2.0]])  # third column is an exact combination
        m = fit_em(x, 3, rng=rng, tol=0.0, max_iter=80)
        assert np.all(np.diff(m.log_likelihood_trace) >= -1e-9)
        ev = np.linalg.eigvalsh(m.covs)
        assert np.all(ev >= 1e-6 - 1e-12 * ev.max())  # reconstruction round-off

    def test_weights_on_simplex_and_eigen_floor(self, rng):
        x = np.repeat(rng.standard_normal((20, 2)), 5, axis=0)  # duplicated rows
        m = fit_em(x, 3, rng=rng)
        assert abs(m.weights.sum() - 1) < 1e-10
        assert np.all(np.linalg.eigvalsh(m.covs) >= 1e-6 * (1 - 1e-9))

    def test_too_few_samples(self, rng):
        with pytest.raises(ValueError):
            fit_em(np.zeros((2, 1)), 3, rng=rng)

    def test_collapse_error_type(self):
        assert issubclass(ComponentCollapseError, RuntimeError)

    def test_serialisation(self, rng, tmp_path):
        m = random_model(rng)
        m.save(tmp_path / "g.json")
        r = GmmModel.load(tmp_path / "g.json")
        np.testing.assert_array_equal(r.covs, m.covs)
        np.testing.assert_array_equal(r.weights, m.weights)

    def test_logpdf_matches_scipy(self, rng):
        m = random_model(rng)
        x = rng.standard_normal((5, 3))
        ref = np.log(sum(w * stats.multivariate_normal(mu, c).pdf(x) for w, mu, c in zip(m.weights, m.means, m.covs)))
        np.testing.assert_allclose(m.logpdf(x), ref, atol=1e-12)


class TestCondition:
    def test_block_diagonal_means_ignore_features(self, rng):
        covs = np.array([np.diag([1.0, 2.0, 0.5]), np.diag([0.3, 1.0, 2.0])])
        m = GmmModel([0.4, 0.6], [[0, 1, 2], [3, -1, 5]], covs)
        a = condition(m, [0.0, 0.0])
        b = condition(m, [5.0, -7.0])
        np.testing.assert_allclose(a.means, b.means)
        np.testing.assert_allclose(a.means, [[2.0], [5.0]])

    def test_single_gaussian_formula(self, rng):
        m = random_model(rng, K=1)
        f = np.array([0.3, -0.2])
        c = condition(m, f)
        S, mu = m.covs[0], m.means[0]
        mean = mu[2:] + S[2:, :2] @ np.linalg.solve(S[:2, :2], f - mu[:2])
        cov = S[2:, 2:] - S[2:, :2] @ np.linalg.solve(S[:2, :2], S[:2, 2:])
        np.testing.assert_allclose(c.means[0], mean, atol=1e-12)
        np.testing.assert_allclose(c.covs[0], cov, atol=1e-12)
        assert c.weights[0] == pytest.approx(1.0, abs=1e-15)

    def test_weights_follow_feature_likelihood(self, rng):
        m = random_model(rng, K=3)
        f = np.array([[0.1, 0.2], [2.0, -1.0]])
        c = condition(m, f)
        np.testing.assert_allclose(c.weights.sum(1), 1.0, atol=1e-12)
        for row in range(2):
            lik = np.array([w * stats.multivariate_normal(mu[:2], S[:2, :2]).pdf(f[row])
                            for w, mu, S in zip(m.weights, m.means, m.covs)])
            np.testing.assert_allclose(c.weights[row], lik / lik.sum(), atol=1e-12)

    def test_density_integrates_to_one_1d(self, rng):
        c = condition(random_model(rng, K=3, d=3), [0.4, -0.3])
        val, _ = integrate.quad(lambda a: np.exp(c.logpdf(np.array([a]))), -60, 60, limit=400)
        assert val == pytest.approx(1.0, abs=1e-6)

    def test_density_integrates_to_one_2d(self, rng):
        c = condition(random_model(rng, K=2, d=3), [0.4])
        val, _ = integrate.dblquad(lambda y, x: np.exp(c.logpdf(np.array([x, y]))), -25, 25, -25, 25,
                                   epsabs=1e-9)
        assert val == pytest.approx(1.0, abs=1e-5)

    def test_sampling_moments(self, rng):
        c = condition(random_model(rng, K=3, d=3), [0.1, 0.5])
        rows = 100_000
        big = type(c)(np.tile(c.weights, (rows, 1)), np.tile(c.means, (rows, 1, 1)), c.covs)
        a = big.sample(rng)[:, 0]
        mean = c.mean()[0]
        second = (c.weights * (c.covs[:, 0, 0] + c.means[:, 0] ** 2)).sum()
        var = second - mean**2
        assert abs(a.mean() - mean) < 0.01 * np.sqrt(var)
        assert a.var() == pytest.approx(var, rel=0.01)

    def test_feature_dim_check(self, rng):
        with pytest.raises(ValueError):
            condition(random_model(rng, d=2), [0.0, 1.0])


class TestRollout:
    def test_degenerate_mixture_is_deterministic(self, rng):
        dyn = toy_brnn_dynamics(sigma_omega=np.zeros((1, 1)))
        # action = -0.5 x exactly (features are raw x)
        cov = np.array([[1.0, -0.5], [-0.5, 0.25 + 1e-14]])
        model = GmmModel([1.0], [[0.0, 0.0]], [cov])
        pol = GmmPolicy(model, FeatureNormalizer.identity(1, 1))
        states, _ = gmm_rollout(pol, np.array([[[8.0]]]), np.zeros((1, 3, 0)), dyn, 4, rng)
        np.testing.assert_allclose(states[:, 0, :, 0], np.tile([4.0, 2.0, 1.0], (4, 1)), atol=1e-6)

    def test_rollout_likelihood_single_component(self, rng):
        dyn = car_following_dynamics()
        cov = np.eye(11) * 0.5
        model = GmmModel([1.0], [np.zeros(11)], [cov])
        norm = FeatureNormalizer(np.zeros(3), np.ones(3), np.array([0.5, 0.25]), 3)
        pol = GmmPolicy(model, norm)
        hist = np.array([[[20.0, 10.0, 10.0]] * 3])
        fut = np.array([[[20.1, 10.2, 10.0]]])
        _, lls = gmm_rollout(pol, hist, np.zeros((1, 1, 2)), dyn, 2, rng, future=fut)
        J = dyn.jac_ap()
        action_cov = 0.5 * np.diag([0.25, 0.0625])
        expected = stats.multivariate_normal(hist[0, -1], J @ action_cov @ J.T + dyn.sigma_omega).logpdf(fut[0, 0])
        np.testing.assert_allclose(lls[:, 0, 0], expected, atol=1e-10)

    def test_fit_policy_on_records(self, rng):
        dyn = toy_brnn_dynamics()
        hist = rng.uniform(95, 105, (300, 1, 1))
        fut = hist * rng.choice([0.5, 0.9], size=(300, 1, 1))
        ds = Dataset(hist, np.zeros((300, 1, 0)), fut, np.arange(300), "toy")
        norm = FeatureNormalizer.fit(ds.all_states(), ds.actions(dyn), 1)
        joint = joint_training_data(ds, dyn, norm)
        assert joint.shape == (300, 2)
        pol = fit_gmm_policy(ds, dyn, norm, 2, rng)
        cm = pol.action_distribution(np.array([[100.0]]))
        assert cm.means.shape == (1, 2, 1)
        np.testing.assert_allclose(np.sort(cm.means[0, :, 0]), [-50.0, -10.0], atol=3.0)
