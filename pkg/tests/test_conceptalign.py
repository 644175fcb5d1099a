import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vicoedit import conceptalign as ca
from vicoedit import oracle, toy
from vicoedit.flowmodel import ConceptSet, Condition, ConstantVelocityModel

CONCEPTS = ConceptSet(("bg1", "bg2"), ("subj",))


def mask_of(values):
    values = np.asarray(values, dtype=float)
    return ca.ConceptMask(values, 0.25, values.copy())


def test_aggregate_examples(rng):
    v = np.array([0.2, 0.8])
    np.testing.assert_allclose(ca.aggregate_concepts([v, v]), v)
    np.testing.assert_allclose(ca.aggregate_concepts([[1.0, 0.0], [0.0, 1.0]]), [0.5, 0.5])
    draws = rng.dirichlet(np.ones(4), size=3)
    np.testing.assert_allclose(ca.aggregate_concepts(list(draws)), (draws[0] + draws[1] + draws[2]) / 3, atol=1e-15)


def test_aggregate_rejects_empty():
    with pytest.raises(ValueError):
        ca.aggregate_concepts([])


def test_mask_example():
    m = ca.compute_mask(np.array([[0.3, 0.1, 0.6]]), CONCEPTS, 0.25)
    np.testing.assert_array_equal(m.values, [1.0])
    np.testing.assert_allclose(m.pos_prob, [0.4])


def test_mask_boundary_inclusive():
    m = ca.compute_mask(np.array([[0.125, 0.125, 0.75]]), CONCEPTS, 0.25)
    assert m.pos_prob[0] == 0.25
    assert m.values[0] == 1.0


def test_mask_all_positive(rng):
    concepts = ConceptSet(("a", "b", "c"), ())
    d = rng.dirichlet(np.ones(3), size=6)
    assert np.all(ca.compute_mask(d, concepts, 0.99).values == 1.0)


@pytest.mark.parametrize("tau", [0.0, 1.0, 1.5, -0.1])
def test_mask_tau_range(tau):
    with pytest.raises(ValueError, match="tau"):
        ca.compute_mask(np.array([[0.3, 0.1, 0.6]]), CONCEPTS, tau)


@settings(max_examples=100, deadline=None)
@given(d=arrays(float, (5, 3), elements=st.floats(0, 1)), tau=st.floats(0.01, 0.99))
def test_mask_threshold_consistency(d, tau):
    m = ca.compute_mask(d, CONCEPTS, tau)
    np.testing.assert_array_equal(m.values == 1.0, m.pos_prob >= tau)


def test_measurement_noiseless_is_exact(rng):
    x0 = rng.normal(size=5)
    mask = mask_of([1, 0, 1, 1, 0])
    meas = ca.make_measurement(x0, mask, 0.0, None)
    np.testing.assert_array_equal(meas.y, mask.values * x0)


def test_measurement_zero_mask_is_noise(rng):
    meas = ca.make_measurement(rng.normal(size=4), mask_of(np.zeros(4)), 0.3, rng)
    np.testing.assert_array_equal(meas.y, meas.noise_s)


def test_measurement_noise_statistics():
    x0 = np.zeros(10_000)
    a = ca.make_measurement(x0, mask_of(np.ones(10_000)), 0.1, np.random.default_rng(3))
    b = ca.make_measurement(x0, mask_of(np.ones(10_000)), 0.1, np.random.default_rng(3))
    np.testing.assert_array_equal(a.y, b.y)
    assert np.mean(a.noise_s**2) == pytest.approx(0.01, rel=0.05)


def test_tweedie_at_zero(rng):
    z = rng.normal(size=3)
    np.testing.assert_array_equal(ca.tweedie_z0(z, rng.normal(size=3), 0.0), z)


def test_tweedie_exact_on_gaussian(rng):
    model = toy.gaussian_model([0.5, -1.0], [[0.4, 0.1], [0.1, 0.3]])
    cond = Condition("p")
    for t in (0.2, 0.5, 0.8):
        z = rng.normal(size=2)
        np.testing.assert_allclose(ca.tweedie_z0(z, model.velocity(z, t, cond), t),
                                   model.posterior_mean_z0(z, t, cond), atol=1e-8)


def test_tweedie_mixture_matches_mc(mixture3, rng):
    cond = Condition("p")
    t = 0.5
    z = np.array([0.2, 0.1])
    est = oracle.mc_conditional(oracle.mixture_spec(mixture3, cond), z, t, "z0_mean", 200_000, rng)
    assert est.within(ca.tweedie_z0(z, mixture3.velocity(z, t, cond), t))


def test_guidance_zero_mask_vanishes(rng):
    model = ConstantVelocityModel(np.zeros(3))
    meas = ca.make_measurement(rng.normal(size=3), mask_of(np.zeros(3)), 0.0, None)
    out = ca.guidance_velocity(rng.normal(size=3), rng.normal(size=3), 0.5, meas, model, 0.7)
    np.testing.assert_array_equal(out, 0.0)


def test_guidance_scalar_hand_example():
    model = ConstantVelocityModel(np.zeros(1))
    meas = ca.make_measurement(np.array([1.0]), mask_of([1.0]), 0.0, None)
    out = ca.guidance_velocity(np.array([0.5]), np.array([0.2]), 0.5, meas, model, 0.5)
    np.testing.assert_allclose(out, [-0.6])
    fd = oracle.fd_gradient(lambda z: ca.guidance_loss(ca.tweedie_z0(z, np.array([0.2]), 0.5), meas, model),
                            np.array([0.5]))
    np.testing.assert_allclose(0.5 * fd, [-0.6], atol=1e-6)


@pytest.mark.parametrize("mode", ca.GUIDANCE_MODES)
def test_guidance_matches_fd(mode, mixture3):
    rng = np.random.default_rng(99)
    cond = Condition("p")
    for _ in range(10):
        t = rng.uniform(0.1, 0.9)
        z = rng.normal(size=2)
        mask = mask_of((rng.random(2) < 0.7).astype(float))
        meas = ca.make_measurement(rng.normal(size=2), mask, 0.0, None)
        v = mixture3.velocity(z, t, cond)
        jac = mixture3.velocity_jacobian(z, t, cond)
        got = ca.guidance_velocity(z, v, t, meas, mixture3, 1.0, mode=mode, v_tilde_jacobian=jac)
        if mode == ca.DETACHED:
            loss = lambda q: ca.guidance_loss(ca.tweedie_z0(q, v, t), meas, mixture3)  # noqa: E731
        else:
            loss = lambda q: ca.guidance_loss(ca.tweedie_z0(q, mixture3.velocity(q, t, cond), t), meas, mixture3)  # noqa: E731
        fd = oracle.fd_gradient(loss, z)
        assert np.linalg.norm(got - fd) <= 1e-4 * max(np.linalg.norm(fd), 1e-12)


def test_modes_agree_for_constant_field(rng):
    model = ConstantVelocityModel(rng.normal(size=3))
    meas = ca.make_measurement(rng.normal(size=3), mask_of([1, 1, 0]), 0.0, None)
    z, v = rng.normal(size=3), model.value
    a = ca.guidance_velocity(z, v, 0.4, meas, model, 1.0, mode=ca.DETACHED)
    b = ca.guidance_velocity(z, v, 0.4, meas, model, 1.0, mode=ca.THROUGH_MODEL, v_tilde_jacobian=np.zeros((3, 3)))
    np.testing.assert_array_equal(a, b)


def test_through_model_needs_jacobian(rng):
    model = ConstantVelocityModel(np.zeros(2))
    meas = ca.make_measurement(np.ones(2), mask_of([1, 1]), 0.0, None)
    with pytest.raises(ca.GuidanceError):
        ca.guidance_velocity(np.zeros(2), np.zeros(2), 0.5, meas, model, 1.0, mode=ca.THROUGH_MODEL)


def test_unknown_mode(rng):
    model = ConstantVelocityModel(np.zeros(2))
    meas = ca.make_measurement(np.ones(2), mask_of([1, 1]), 0.0, None)
    with pytest.raises(ca.GuidanceError):
        ca.guidance_velocity(np.zeros(2), np.zeros(2), 0.5, meas, model, 1.0, mode="sideways")


def test_stochastic_guidance_draws_s_tilde():
    model = ConstantVelocityModel(np.zeros(2))
    meas = ca.make_measurement(np.ones(2), mask_of([1, 1]), 0.2, np.random.default_rng(0))
    a = ca.guidance_velocity(np.zeros(2), np.zeros(2), 0.5, meas, model, 1.0, rng=np.random.default_rng(1))
    b = ca.guidance_velocity(np.zeros(2), np.zeros(2), 0.5, meas, model, 1.0, rng=np.random.default_rng(2))
    assert not np.array_equal(a, b)
