import warnings

import numpy as np
import pytest

from vicoedit import conceptalign as ca
from vicoedit import oracle, toy
from vicoedit.flowmodel import Condition
from vicoedit.schedule import PathScheduler

P = Condition("p")


def test_mc_single_gaussian(rng):
    spec = oracle.mixture_spec(toy.gaussian_model(np.zeros(2)), P)
    est = oracle.mc_conditional(spec, np.array([1.0, 0.0]), 0.5, "z0_mean", 100_000, rng)
    assert est.within([1.0, 0.0])
    assert not est.low_ess


def test_mc_degenerate_time(rng, mixture3):
    z = np.array([0.3, -0.1])
    est = oracle.mc_conditional(oracle.mixture_spec(mixture3, P), z, 0.0, "z0_mean", 100, rng)
    np.testing.assert_array_equal(est.mean, z)
    np.testing.assert_array_equal(est.standard_error, 0.0)


def test_mc_mixture_posterior_mean(mixture3, rng):
    z, t = np.array([-0.4, 0.6]), 0.45
    est = oracle.mc_conditional(oracle.mixture_spec(mixture3, P), z, t, "z0_mean", 200_000, rng)
    assert est.within(mixture3.posterior_mean_z0(z, t, P))
    assert np.all(est.standard_error > 0)


def test_mc_warns_on_low_ess(mixture3, rng):
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        est = oracle.mc_conditional(oracle.mixture_spec(mixture3, P), np.array([40.0, 40.0]), 0.05, "z0_mean",
                                    1000, rng)
    assert est.low_ess
    assert any("effective sample size" in str(w.message) for w in caught)


def test_mc_rejects_bad_target(mixture3, rng):
    with pytest.raises(ValueError):
        oracle.mc_conditional(oracle.mixture_spec(mixture3, P), np.zeros(2), 0.5, "score", 1000, rng)


def test_posterior_uninformative_limit():
    m = np.array([0.5, -1.0])
    mean, _ = oracle.analytic_linear_gaussian_posterior(m, np.eye(2), np.eye(2), 1e6, np.array([3.0, 3.0]))
    np.testing.assert_allclose(mean, m, atol=1e-4)


def test_posterior_hand_example():
    mean, cov = oracle.analytic_linear_gaussian_posterior(np.zeros(2), np.eye(2), np.eye(2), 1.0, np.array([2.0, 0.0]))
    np.testing.assert_allclose(mean, [1.0, 0.0])
    np.testing.assert_allclose(cov, 0.5 * np.eye(2))
    # same answer from the information form
    prec = np.eye(2) + np.eye(2)
    np.testing.assert_allclose(mean, np.linalg.solve(prec, np.array([2.0, 0.0])))


def test_posterior_noiseless_inverts(rng):
    A = rng.normal(size=(3, 3)) + 3 * np.eye(3)
    y = rng.normal(size=3)
    mean, _ = oracle.analytic_linear_gaussian_posterior(np.zeros(3), np.eye(3), A, 0.0, y)
    np.testing.assert_allclose(mean, np.linalg.solve(A, y), atol=1e-10)


def test_guidance_oracle_matches_fd_of_log_likelihood(rng):
    m, P0 = np.array([0.2, -0.1]), np.array([[0.7, 0.2], [0.2, 0.5]])
    A, sy, y = np.array([[1.0, -0.5]]), 0.3, np.array([0.8])
    t = 0.4
    s = PathScheduler.rectified_flow()
    z = rng.normal(size=2)

    def loglik(v):
        alpha, sigma = s.alpha(t), s.sigma(t)
        C = alpha**2 * P0 + sigma**2 * np.eye(2)
        mean = m + alpha * P0 @ np.linalg.solve(C, v - alpha * m)
        cov = P0 - alpha**2 * P0 @ np.linalg.solve(C, P0)
        S = A @ cov @ A.T + sy**2
        r = y - A @ mean
        return float(-0.5 * r @ np.linalg.solve(S, r))

    b = -t / (1 - t)
    expected = b * oracle.fd_gradient(loglik, z)
    np.testing.assert_allclose(oracle.linear_gaussian_guidance(m, P0, A, sy, y, z, t), expected, rtol=1e-6)


def test_guidance_oracle_finite_at_one(rng):
    g = oracle.linear_gaussian_guidance(np.zeros(2), np.eye(2), np.eye(2), 0.5, np.ones(2), rng.normal(size=2), 1.0)
    assert np.all(np.isfinite(g))


def test_fd_gradient_examples():
    np.testing.assert_allclose(oracle.fd_gradient(lambda z: z @ z, np.array([1.0, 2.0])), [2.0, 4.0], atol=1e-6)
    np.testing.assert_array_equal(oracle.fd_gradient(lambda z: 3.0, np.array([1.0, 2.0])), 0.0)


def test_fd_gradient_matches_guidance(rng):
    model = toy.gaussian_model(np.zeros(3))
    x0 = rng.normal(size=3)
    mask = ca.ConceptMask(np.array([1.0, 0.0, 1.0]), 0.25, np.zeros(3))
    meas = ca.make_measurement(x0, mask, 0.0, rng)
    v, t, alpha = rng.normal(size=3), 0.6, 0.5
    z = rng.normal(size=3)
    got = ca.guidance_velocity(z, v, t, meas, model, alpha)
    fd = oracle.fd_gradient(lambda q: ca.guidance_loss(ca.tweedie_z0(q, v, t), meas, model), z)
    np.testing.assert_allclose(got / alpha, fd, rtol=1e-4)


def test_vp_tweedie_at_zero(rng):
    vp = PathScheduler.vp()
    x = rng.normal(size=2)
    np.testing.assert_array_equal(oracle.vp_tweedie(lambda v: v * 1e9, x, 0.0, vp), x)


def test_vp_tweedie_single_gaussian(rng):
    vp = PathScheduler.vp()
    m, P0 = np.array([1.0, -0.5]), np.array([[0.5, 0.1], [0.1, 0.3]])
    model = toy.gaussian_model(m, P0)
    t = 0.25
    x = rng.normal(size=2)
    got = oracle.vp_tweedie(lambda v: model.score(v, t, P, vp), x, t, vp)
    ref, _ = oracle.analytic_linear_gaussian_posterior(m, P0, vp.alpha(t) * np.eye(2), vp.sigma(t), x)
    np.testing.assert_allclose(got, ref, atol=1e-10)


def test_vp_tweedie_mixture_matches_mc(mixture3, rng):
    vp = PathScheduler.vp()
    t = 0.1
    x = vp.alpha(t) * np.array([0.5, 0.5]) + vp.sigma(t) * rng.standard_normal(2)
    est = oracle.mc_conditional(oracle.mixture_spec(mixture3, P), x, t, "z0_mean", 200_000, rng, vp)
    assert est.within(oracle.vp_tweedie(lambda v: mixture3.score(v, t, P, vp), x, t, vp))


def test_vp_tweedie_requires_vp(rng):
    with pytest.raises(ValueError):
        oracle.vp_tweedie(lambda v: v, rng.normal(size=2), 0.5, PathScheduler.rectified_flow())
