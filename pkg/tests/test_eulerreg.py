from dataclasses import dataclass

import jax
import jax.numpy as jnp
import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import random_field
from gpot import graddesk
from gpot.divfree import LinearField, flatten_unet
from gpot.eulerreg import (
    DEFAULT_DT,
    EulerPenaltyConfig,
    antisymmetry,
    asym_probe,
    euler_penalty,
    lagrangian_accel,
    lambda_at,
    path_energy,
)
from gpot.optim import adam_init, adam_step

ROTATION = LinearField(jnp.array([[0.0, 1.0], [-1.0, 0.0]]))
ZERO = LinearField(jnp.zeros((2, 2)))


@jax.tree_util.register_dataclass
@dataclass(frozen=True)
class ConstantField:
    value: jax.Array

    def __call__(self, x, t):
        return self.value + 0.0 * x


def test_dt_is_twice_root_eps():
    assert DEFAULT_DT == pytest.approx(2 * np.sqrt(np.finfo(np.float64).eps), rel=1e-15)
    assert DEFAULT_DT == pytest.approx(2.98e-8, rel=1e-3)


def test_zero_field_acceleration():
    np.testing.assert_array_equal(np.asarray(lagrangian_accel(ZERO, jnp.array([0.3, 0.1]), 0.2)), [0.0, 0.0])


@pytest.mark.parametrize("r", [0.2, 0.7])
def test_rotation_acceleration_is_centripetal(r):
    # (v . grad) v for v = (y, -x) is (-x, -y)
    acc = np.asarray(lagrangian_accel(ROTATION, jnp.array([r, 0.0]), 0.0))
    np.testing.assert_allclose(acc, [-r, 0.0], atol=10 * DEFAULT_DT)


def test_batched_acceleration_matches_pointwise():
    x = jnp.asarray(np.random.default_rng(0).uniform(-1, 1, (5, 2)))
    batch = np.asarray(lagrangian_accel(ROTATION, x, 0.0))
    for xi, ai in zip(x, batch):
        np.testing.assert_array_equal(np.asarray(lagrangian_accel(ROTATION, xi, 0.0)), ai)


def test_time_linear_field_gives_constant_acceleration():
    c = jnp.array([0.4, -1.3])
    fld = LinearField(jnp.zeros((2, 2)), drift=c)
    acc = np.asarray(lagrangian_accel(fld, jnp.array([0.1, 0.2]), 0.5))
    assert np.max(np.abs(acc - np.asarray(c))) < 10 * DEFAULT_DT


def test_antisymmetry_on_symmetric_and_rotation_maps():
    x = jnp.array([0.3, -0.4])
    y, z = jnp.array([1.0, 0.0]), jnp.array([0.0, 1.0])
    assert float(antisymmetry(lambda p: p, x, y, z)) < 1e-8
    rot = lambda p: jnp.array([-p[1], p[0]])
    assert float(antisymmetry(rot, x, y, z)) == pytest.approx(4.0, abs=1e-12)


def test_probe_on_fields():
    x = jnp.array([0.2, 0.1])
    y, z = jnp.array([1.0, 0.0]), jnp.array([0.0, 1.0])
    # steady v = A x has acceleration A^2 x; A = R(pi/4) gives A^2 = [[0, -1], [1, 0]]
    c = np.cos(np.pi / 4)
    r45 = LinearField(jnp.array([[c, -c], [c, c]]))
    assert float(asym_probe(r45, x, 0.0, y, z)) == pytest.approx(4.0, abs=1e-6)
    sym = LinearField(jnp.array([[0.5, 0.3], [0.3, -0.5]]))
    rng = np.random.default_rng(1)
    for _ in range(5):
        yy, zz = rng.normal(size=2), rng.normal(size=2)
        assert float(asym_probe(sym, x, 0.0, yy, zz)) < 1e-8


@given(st.integers(0, 10_000))
def test_probe_vanishes_on_diagonal_and_is_swap_symmetric(seed):
    rng = np.random.default_rng(seed)
    fld = random_field(3, (6,), seed=seed % 50, scale=1.0)
    x = rng.uniform(-0.9, 0.9, 3)
    y, z = rng.normal(size=3), rng.normal(size=3)
    assert float(asym_probe(fld, x, 0.4, y, y)) == 0.0
    assert float(asym_probe(fld, x, 0.4, y, z)) == float(asym_probe(fld, x, 0.4, z, y))


def test_penalty_of_zero_field_and_potential_flow():
    batch = np.random.default_rng(2).uniform(-0.5, 0.5, (64, 2))
    assert euler_penalty(ZERO, batch) == 0.0
    # v = grad(x^T A x / 2) with A symmetric traceless: steady Euler solution, w = A^2 x = grad p
    potential = LinearField(jnp.array([[0.8, 0.3], [0.3, -0.8]]))
    assert euler_penalty(potential, batch) < 1e-6


def test_penalty_is_reproducible_per_seed():
    fld = random_field(2, (8,), seed=3, scale=1.0)
    batch = np.random.default_rng(3).uniform(-0.9, 0.9, (32, 2))
    assert euler_penalty(fld, batch, seed=5) == euler_penalty(fld, batch, seed=5)
    assert euler_penalty(fld, batch, seed=5) != euler_penalty(fld, batch, seed=6)


def test_penalty_decreases_under_optimization():
    fld = random_field(2, (8,), seed=4, scale=1.0)
    z = np.random.default_rng(4).normal(size=(32, 2))
    dims = fld.unet.dims
    objective = jax.jit(graddesk.make_objective("euler", dims, None, z, n_steps=5, seed=0))
    g = jax.jit(jax.grad(objective))
    theta = jnp.asarray(flatten_unet(fld.unet))
    start = float(objective(theta))
    state = adam_init(theta)
    for _ in range(50):
        theta, state = adam_step(theta, g(theta), state, 1e-2)
    assert float(objective(theta)) < start


def test_scaling_field_scales_steady_acceleration_quadratically():
    a = jnp.array([[0.1, 0.7], [-0.4, -0.1]])
    x = jnp.array([0.3, -0.6])
    base = np.asarray(lagrangian_accel(LinearField(a), x, 0.0))
    for c in (2.0, 3.0):
        scaled = np.asarray(lagrangian_accel(LinearField(c * a), x, 0.0))
        np.testing.assert_allclose(scaled, c**2 * base, rtol=1e-6)


def test_path_energy_closed_forms():
    batch = np.random.default_rng(5).uniform(-0.5, 0.5, (16, 2))
    assert path_energy(ZERO, batch) == 0.0
    assert path_energy(ConstantField(jnp.array([1.0, 0.0])), batch) == pytest.approx(0.5, abs=1e-12)
    ring = np.stack([0.5 * np.cos(np.linspace(0, 6, 16)), 0.5 * np.sin(np.linspace(0, 6, 16))], 1)
    assert path_energy(ROTATION, ring) == pytest.approx(0.5 * 0.25, abs=1e-3)


def test_lambda_schedule():
    cfg = EulerPenaltyConfig(lambda0=5e-4, decay_period=100, n_decays=5)
    assert lambda_at(cfg, 0) == 5e-4
    assert lambda_at(cfg, 99) == 5e-4
    assert lambda_at(cfg, 100) == 2.5e-4
    assert lambda_at(cfg, 10_000) == 5e-4 / 32
    with pytest.raises(ValueError):
        lambda_at(cfg, -1)


@given(st.floats(1e-6, 1.0), st.integers(1, 50), st.integers(0, 12), st.integers(0, 2000))
def test_lambda_schedule_property(lam0, period, n_decays, epoch):
    cfg = EulerPenaltyConfig(lambda0=lam0, decay_period=period, n_decays=n_decays)
    assert lambda_at(cfg, epoch) == lam0 * 2.0 ** -min(epoch // period, n_decays)
    assert lambda_at(cfg, epoch + 1) <= lambda_at(cfg, epoch)


def test_config_validation():
    with pytest.raises(ValueError):
        EulerPenaltyConfig(dt=0.0)
    with pytest.raises(ValueError):
        EulerPenaltyConfig(lambda0=-1.0)
    with pytest.raises(ValueError):
        EulerPenaltyConfig(probes_per_point=0)
    assert not EulerPenaltyConfig().active and EulerPenaltyConfig(lambda0=1e-4).active
