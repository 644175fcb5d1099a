import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vicoedit.schedule import (
    PathScheduler,
    ScheduleError,
    TimeGrid,
    diffusion_coeffs,
    interpolate,
    make_uniform_grid,
    path_coeffs,
)

RF = PathScheduler.rectified_flow()
VP = PathScheduler.vp()


def test_default_edit_grid():
    g = make_uniform_grid(50, 1.0, 47)
    assert g.n_steps == 50
    assert g.times[0] == 0.0
    assert g.times[47] == pytest.approx(0.94, abs=1e-15)
    assert g.n_max == 47


def test_grid_rejects_start_at_one():
    with pytest.raises(ScheduleError):
        make_uniform_grid(1, 1.0, 1)


def test_shifted_grid():
    g = make_uniform_grid(4, 0.8, 4)
    np.testing.assert_allclose(g.times, [0, 0.2, 0.4, 0.6, 0.8], atol=1e-15)


@pytest.mark.parametrize("kwargs", [dict(t_start=0.0), dict(t_start=1.2), dict(n_max=0), dict(n_max=11)])
def test_grid_argument_errors(kwargs):
    with pytest.raises(ScheduleError):
        make_uniform_grid(10, **kwargs)


def test_grid_rejects_bad_times():
    with pytest.raises(ScheduleError):
        TimeGrid(np.array([0.0, 0.5, 0.4]), 1)
    with pytest.raises(ScheduleError):
        TimeGrid(np.array([0.1, 0.5]), 1)


def test_edit_steps_descend_from_n_max():
    g = make_uniform_grid(10, 1.0, 7)
    steps = list(g.edit_steps())
    assert [s[0] for s in steps] == list(range(7, 0, -1))
    for _, t, t_prev in steps:
        assert t_prev < t


def test_rf_path_coeffs_examples():
    assert path_coeffs(RF, 0.0) == pytest.approx((-1.0, 0.0))
    assert path_coeffs(RF, 0.5) == pytest.approx((-2.0, -1.0))


def test_rf_singular_at_one():
    with pytest.raises(ScheduleError):
        path_coeffs(RF, 1.0)


def test_vp_path_coeffs_match_finite_differences():
    t, h = 0.3, 1e-5
    a_dot = (VP.alpha(t + h) - VP.alpha(t - h)) / (2 * h)
    s_dot = (VP.sigma(t + h) - VP.sigma(t - h)) / (2 * h)
    alpha, sigma = VP.alpha(t), VP.sigma(t)
    a_fd = a_dot / alpha
    b_fd = (a_dot * sigma - alpha * s_dot) * sigma / alpha
    a, b = path_coeffs(VP, t)
    assert a == pytest.approx(a_fd, rel=1e-5)
    assert b == pytest.approx(b_fd, rel=1e-5)


def test_rf_diffusion_coeffs_examples():
    assert diffusion_coeffs(RF, 0.5) == pytest.approx((-2.0, 2.0))
    assert diffusion_coeffs(RF, 0.0) == pytest.approx((-1.0, 0.0))


def test_vp_endpoints():
    assert VP.alpha(0.0) == 1.0
    assert VP.sigma(0.0) == 0.0
    assert path_coeffs(VP, 0.0)[1] == pytest.approx(-0.5 * VP.beta(0.0))


@settings(max_examples=200, deadline=None)
@given(t=st.floats(0.0, 0.99), kind=st.sampled_from(["rf", "vp"]))
def test_drift_and_diffusion_identities(t, kind):
    s = RF if kind == "rf" else VP
    a, b = path_coeffs(s, t)
    f, g2 = diffusion_coeffs(s, t)
    assert abs(f - a) <= 1e-10 * max(1.0, abs(a))
    assert abs(-0.5 * g2 - b) <= 1e-10 * max(1.0, abs(b))


@settings(max_examples=50, deadline=None)
@given(t=st.floats(0.01, 0.99))
def test_vp_identities_against_finite_differences(t):
    h = 1e-6
    f_fd = (np.log(VP.alpha(t + h)) - np.log(VP.alpha(t - h))) / (2 * h)
    ds2 = (VP.sigma(t + h) ** 2 - VP.sigma(t - h) ** 2) / (2 * h)
    f, g2 = diffusion_coeffs(VP, t)
    assert f == pytest.approx(f_fd, rel=1e-5)
    assert g2 == pytest.approx(ds2 - 2 * f_fd * VP.sigma(t) ** 2, rel=1e-5, abs=1e-8)


def test_interpolation_endpoints(rng):
    z0, z1 = rng.normal(size=3), rng.normal(size=3)
    np.testing.assert_array_equal(interpolate(z0, z1, 0.0), z0)
    np.testing.assert_array_equal(interpolate(z0, z1, 1.0), z1)
    np.testing.assert_allclose(interpolate(z0, z1, 0.25), 0.75 * z0 + 0.25 * z1)


def test_unknown_kind():
    with pytest.raises((ScheduleError, ValueError)):
        PathScheduler(kind="cosine")
