"""Euler-equation penalty and path-energy diagnostics for velocity fields.

A velocity field solves Euler's equations iff its Lagrangian acceleration
``w = dv/dt + (v . grad) v`` is a gradient, i.e. has a symmetric spatial Jacobian.
The penalty probes ``(y^T J_w z - z^T J_w y)^2`` with Gaussian ``y, z`` along the
RK4 trajectory nodes, using forward-mode Jacobian-vector products of ``w``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import partial

import jax
import jax.numpy as jnp
import numpy as np

from gpot.flowode import rk4_states

DEFAULT_DT = 2.0 * float(np.sqrt(np.finfo(np.float64).eps))


@dataclass(frozen=True)
class EulerPenaltyConfig:
    lambda0: float = 0.0
    dt: float = DEFAULT_DT
    probes_per_point: int = 1
    decay_factor: float = 2.0
    decay_period: int = 200
    n_decays: int = 5

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.lambda0 < 0:
            raise ValueError("lambda0 must be non-negative")
        if self.probes_per_point < 1:
            raise ValueError("probes_per_point must be >= 1")
        if self.decay_period < 1:
            raise ValueError("decay_period must be >= 1")

    @property
    def active(self) -> bool:
        return self.lambda0 > 0


def accel_point(fld, x, t, dt=DEFAULT_DT):
    """Lagrangian acceleration at position ``x`` and time ``t`` (one explicit Euler sub-step)."""
    v0 = fld(x, t)
    v1 = fld(x + dt * v0, t + dt)
    return (v1 - v0) / dt


def lagrangian_accel(fld, x, t, dt=DEFAULT_DT):
    """``[v(t+dt, X + dt v) - v(t, X)] / dt`` for one point ``(d,)`` or a batch ``(n, d)``."""
    x = jnp.asarray(x, dtype=jnp.float64)
    if x.ndim == 1:
        return accel_point(fld, x, t, dt)
    return jax.vmap(accel_point, in_axes=(None, 0, None, None))(fld, x, t, dt)


def antisymmetry(w, x, y, z):
    """``(y^T J z - z^T J y)^2`` where ``J`` is the Jacobian of ``w`` at ``x``; never forms ``J``."""
    _, jz = jax.jvp(w, (x,), (z,))
    _, jy = jax.jvp(w, (x,), (y,))
    return (jnp.dot(y, jz) - jnp.dot(z, jy)) ** 2


def asym_probe(fld, x, t, y, z, dt=DEFAULT_DT):
    x, y, z = (jnp.asarray(a, dtype=jnp.float64) for a in (x, y, z))
    return antisymmetry(lambda p: accel_point(fld, p, t, dt), x, y, z)


def _node_times(n_steps, t_final):
    return jnp.linspace(0.0, t_final, n_steps + 1)


def penalty_from_states(fld, states, key, dt=DEFAULT_DT, t_final=1.0, probes_per_point=1):
    """Mean probe over particles, RK4 nodes and probe pairs; ``states`` is ``(n, N+1, d)``."""
    n, n_nodes, d = states.shape
    times = _node_times(n_nodes - 1, t_final)
    ky, kz = jax.random.split(key)
    ys = jax.random.normal(ky, (probes_per_point, n, n_nodes, d), dtype=states.dtype)
    zs = jax.random.normal(kz, (probes_per_point, n, n_nodes, d), dtype=states.dtype)

    def one(x, t, y, z):
        return antisymmetry(lambda p: accel_point(fld, p, t, dt), x, y, z)

    per_node = jax.vmap(one, in_axes=(0, 0, 0, 0))
    per_particle = jax.vmap(per_node, in_axes=(0, None, 0, 0))
    per_probe = jax.vmap(per_particle, in_axes=(None, None, 0, 0))
    return jnp.mean(per_probe(states, times, ys, zs))


def energy_from_states(fld, states, t_final=1.0):
    """Trapezoidal time integral of the mean kinetic energy ``|v|^2 / 2`` along trajectories."""
    n_nodes = states.shape[1]
    times = _node_times(n_nodes - 1, t_final)
    speeds = jax.vmap(jax.vmap(lambda x, t: fld(x, t), in_axes=(0, 0)), in_axes=(0, None))(states, times)
    ke = 0.5 * jnp.mean(jnp.sum(speeds**2, axis=-1), axis=0)  # (N+1,)
    h = t_final / (n_nodes - 1)
    return h * (jnp.sum(ke) - 0.5 * (ke[0] + ke[-1]))


def _trajectories(fld, batch, n_steps, t_final):
    return jax.vmap(lambda x: rk4_states(fld, x, n_steps, t_final))(batch)


@partial(jax.jit, static_argnames=("n_steps", "t_final", "probes_per_point"))
def _penalty(fld, batch, key, dt, n_steps, t_final, probes_per_point):
    states = _trajectories(fld, batch, n_steps, t_final)
    return penalty_from_states(fld, states, key, dt, t_final, probes_per_point)


@partial(jax.jit, static_argnames=("n_steps", "t_final"))
def _energy(fld, batch, n_steps, t_final):
    return energy_from_states(fld, _trajectories(fld, batch, n_steps, t_final), t_final)


def euler_penalty(fld, batch, n_steps=15, t_final=1.0, dt=DEFAULT_DT, seed=0, probes_per_point=1) -> float:
    """Probe pairs come from ``seed`` only, so repeated calls are reproducible."""
    batch = jnp.atleast_2d(jnp.asarray(batch, dtype=jnp.float64))
    key = jax.random.PRNGKey(seed)
    return float(_penalty(fld, batch, key, dt, n_steps, float(t_final), probes_per_point))


def path_energy(fld, batch, n_steps=15, t_final=1.0) -> float:
    batch = jnp.atleast_2d(jnp.asarray(batch, dtype=jnp.float64))
    return float(_energy(fld, batch, n_steps, float(t_final)))


def lambda_at(cfg: EulerPenaltyConfig, epoch: int) -> float:
    """``lambda0 / factor ** min(epoch // period, n_decays)``."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    k = min(epoch // cfg.decay_period, cfg.n_decays)
    return cfg.lambda0 / cfg.decay_factor**k
