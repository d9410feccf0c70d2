import jax.numpy as jnp
import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import interior_points, random_field
from gpot.divfree import LinearField
from gpot.flowode import (
    IntegrationEscape,
    OdeMap,
    export_trajectories_csv,
    integrate,
    integrate_trajectory,
    read_trajectories_csv,
    volume_residual,
)

ROTATION = LinearField(jnp.array([[0.0, 1.0], [-1.0, 0.0]]))  # v = (y, -x)
ZERO = LinearField(jnp.zeros((2, 2)))


def rotated(x, angle):
    # exact time-angle solution of v = (y, -x): clockwise rotation
    c, s = np.cos(angle), np.sin(angle)
    return np.stack([c * x[..., 0] + s * x[..., 1], -s * x[..., 0] + c * x[..., 1]], axis=-1)


def test_zero_field_leaves_points_fixed():
    x = np.array([[0.3, -0.2], [0.9, 0.1]])
    np.testing.assert_array_equal(np.asarray(integrate(OdeMap(ZERO), x)), x)
    traj = integrate_trajectory(OdeMap(ZERO), x[0])
    assert np.all(traj.states == x[0])


def test_rotation_field_matches_closed_form():
    rng = np.random.default_rng(0)
    x = rng.uniform(-0.7, 0.7, (50, 2))
    out = np.asarray(integrate(OdeMap(ROTATION, 15), x))
    assert np.max(np.abs(out - rotated(x, 1.0))) < 1e-6


def test_rk4_order_on_rotation():
    x = np.array([[0.6, -0.3]])
    errs = [np.max(np.abs(np.asarray(integrate(OdeMap(ROTATION, n), x)) - rotated(x, 1.0))) for n in (8, 16, 32)]
    for a, b in zip(errs, errs[1:]):
        assert 16 * 0.7 < a / b < 16 * 1.3


def test_trajectory_shape_and_arc():
    x0 = np.array([0.5, 0.2])
    traj = integrate_trajectory(OdeMap(ROTATION, 15), x0)
    assert traj.states.shape == (16, 2)
    assert len(traj.times) == 16 and traj.times[0] == 0.0 and traj.times[-1] == 1.0
    np.testing.assert_array_equal(traj.states[0], x0)
    radius = np.linalg.norm(traj.states, axis=1)
    assert np.max(np.abs(radius - np.linalg.norm(x0))) < 1e-6


def test_reverse_map_times_are_decreasing():
    traj = integrate_trajectory(OdeMap(ROTATION, 5).inverse_map(), np.array([0.1, 0.2]))
    assert np.all(np.diff(traj.times) < 0)


def test_forward_reverse_round_trip(trained_gp):
    rng = np.random.default_rng(1)
    ode = trained_gp.phi
    x = rng.uniform(-0.99, 0.99, (1000, 2))
    back = np.asarray(integrate(ode.inverse_map(), integrate(ode, x)))
    assert np.max(np.abs(back - x)) < 1e-8


@pytest.mark.parametrize("d", [2, 3, 6])
def test_volume_residual_of_random_cube_field(d):
    rng = np.random.default_rng(d)
    fld = random_field(d, (15, 15), seed=d, scale=1.0)
    x = interior_points(rng, 100, d, margin=1e-3)
    assert np.max(volume_residual(OdeMap(fld, 15), x)) < 1e-3


def test_volume_residual_trivial_fields():
    x = np.array([0.1, 0.4])
    assert volume_residual(OdeMap(ZERO), x) < 1e-9
    assert volume_residual(OdeMap(ROTATION), x) < 1e-6


def test_volume_residual_decreases_with_steps():
    fld = random_field(3, (15, 15), seed=7, scale=3.0)
    x = interior_points(np.random.default_rng(0), 20, 3)
    coarse = np.max(volume_residual(OdeMap(fld, 4), x))
    fine = np.max(volume_residual(OdeMap(fld, 8), x))
    assert fine < coarse / 8


@given(st.integers(2, 5), st.integers(0, 10_000))
def test_cube_fields_keep_points_inside(d, seed):
    fld = random_field(d, (8,), seed=seed, scale=2.0)
    x = np.random.default_rng(seed).uniform(-1, 1, (64, d))
    out = np.asarray(integrate(OdeMap(fld, 15), x))
    assert np.max(np.abs(out)) <= 1 + 1e-9


def test_escape_is_reported_with_step_and_point():
    outward = LinearField(5.0 * jnp.eye(2), boundary="cube")
    with pytest.raises(IntegrationEscape) as info:
        integrate(OdeMap(outward, 15), np.array([[0.0, 0.0], [0.5, 0.5]]))
    err = info.value
    assert err.particle == 1 and 1 <= err.step <= 15
    assert np.max(np.abs(err.point)) > 1.0


def test_trajectory_csv_round_trip(tmp_path):
    x = np.array([[0.1, 0.2], [0.3, -0.4], [-0.5, 0.6]])
    traj = integrate_trajectory(OdeMap(ROTATION, 6), x)
    path = export_trajectories_csv(traj, tmp_path / "traj.csv")
    header = path.read_text().splitlines()[0]
    assert header == "particle,t,x1,x2"
    back = read_trajectories_csv(path)
    np.testing.assert_array_equal(back.states, traj.states)
    np.testing.assert_array_equal(back.times, traj.times)


def test_invalid_map_arguments():
    with pytest.raises(ValueError):
        OdeMap(ROTATION, 0)
    with pytest.raises(ValueError):
        OdeMap(ROTATION, 5, direction="sideways")
