"""Fixed-step RK4 integration of ``dX/dt = v(t, X)`` realizing a volume-preserving map of the cube."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Any

import jax
import jax.numpy as jnp
import numpy as np

ESCAPE_TOL = 1e-9
FD_STEP = 1e-5


class IntegrationEscape(RuntimeError):
    """A particle left the closed cube by more than ``ESCAPE_TOL``."""

    def __init__(self, step: int, point, particle: int | None = None):
        self.step = int(step)
        self.point = np.asarray(point)
        self.particle = particle
        where = f" (particle {particle})" if particle is not None else ""
        super().__init__(f"integration escaped the cube at step {self.step}{where}: {self.point.tolist()}")


def rk4_states(fld, x0, n_steps: int, t_final: float = 1.0, reverse: bool = False):
    """All RK4 states for one particle, shape ``(n_steps + 1, d)``; differentiable."""
    h = t_final / n_steps
    sign = -1.0 if reverse else 1.0

    def step(x, k):
        t = t_final - k * h if reverse else k * h
        dt = sign * h
        k1 = fld(x, t)
        k2 = fld(x + 0.5 * dt * k1, t + 0.5 * dt)
        k3 = fld(x + 0.5 * dt * k2, t + 0.5 * dt)
        k4 = fld(x + dt * k3, t + dt)
        x_next = x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        return x_next, x_next

    _, xs = jax.lax.scan(step, x0, jnp.arange(n_steps))
    return jnp.concatenate([x0[None], xs], axis=0)


@partial(jax.jit, static_argnames=("n_steps", "t_final", "reverse"))
def _batch_states(fld, x0, n_steps, t_final, reverse):
    return jax.vmap(lambda x: rk4_states(fld, x, n_steps, t_final, reverse))(x0)


@jax.tree_util.register_dataclass
@dataclass(frozen=True)
class OdeMap:
    """Time-``t_final`` flow map of ``field``; ``direction="reverse"`` gives its inverse."""

    field: Any
    n_steps: int = field(default=15, metadata=dict(static=True))
    t_final: float = field(default=1.0, metadata=dict(static=True))
    direction: str = field(default="forward", metadata=dict(static=True))

    def __post_init__(self):
        if isinstance(self.n_steps, int) and self.n_steps < 1:
            raise ValueError("n_steps must be positive")
        if self.direction not in ("forward", "reverse"):
            raise ValueError(f"direction must be 'forward' or 'reverse', got {self.direction!r}")

    @property
    def dim(self) -> int:
        return self.field.dim

    @property
    def reversed(self) -> bool:
        return self.direction == "reverse"

    @property
    def checks_domain(self) -> bool:
        return getattr(self.field, "boundary", "free") == "cube"

    def inverse_map(self) -> "OdeMap":
        flip = "forward" if self.reversed else "reverse"
        return OdeMap(self.field, self.n_steps, self.t_final, flip)

    def times(self) -> np.ndarray:
        t = np.linspace(0.0, self.t_final, self.n_steps + 1)
        return t[::-1].copy() if self.reversed else t

    def __call__(self, x):
        """Traceable single-point evaluation (no escape check)."""
        return rk4_states(self.field, x, self.n_steps, self.t_final, self.reversed)[-1]

    def inverse(self, x):
        return self.inverse_map()(x)


@dataclass
class Trajectory:
    times: np.ndarray  # (N+1,)
    states: np.ndarray  # (N+1, d) or (n, N+1, d)


def _as_batch(x0):
    x0 = jnp.asarray(x0, dtype=jnp.float64)
    single = x0.ndim == 1
    return (x0[None] if single else x0), single


def check_escape(states) -> None:
    """Raise ``IntegrationEscape`` for the earliest out-of-cube state in a ``(n, N+1, d)`` stack."""
    states = np.asarray(states)
    bad = np.max(np.abs(states), axis=-1) > 1.0 + ESCAPE_TOL  # (n, N+1)
    if bad.any():
        particle, step = min(zip(*np.nonzero(bad)), key=lambda ps: (ps[1], ps[0]))
        raise IntegrationEscape(step, states[particle, step], particle=int(particle))


def _states(ode: OdeMap, x0):
    states = _batch_states(ode.field, x0, ode.n_steps, ode.t_final, ode.reversed)
    if ode.checks_domain:
        check_escape(states)
    return states


def integrate(ode: OdeMap, x0):
    """Classic RK4 with uniform steps; accepts one point ``(d,)`` or a batch ``(n, d)``."""
    xb, single = _as_batch(x0)
    out = _states(ode, xb)[:, -1]
    return out[0] if single else out


def integrate_trajectory(ode: OdeMap, x0) -> Trajectory:
    xb, single = _as_batch(x0)
    states = np.asarray(_states(ode, xb))
    return Trajectory(ode.times(), states[0] if single else states)


def flow_jacobian_fd(fn, x, h: float = FD_STEP):
    """Central-difference Jacobians of a batched map ``fn`` at points ``x`` of shape ``(n, d)``."""
    x = jnp.asarray(x, dtype=jnp.float64)
    n, d = x.shape
    hs = h if np.ndim(h) == 0 else jnp.asarray(h)[:, None, None]
    eye = jnp.eye(d)
    pts = jnp.concatenate([(x[:, None, :] + hs * eye), (x[:, None, :] - hs * eye)], axis=1)
    vals = jnp.asarray(fn(pts.reshape(-1, d))).reshape(n, 2 * d, -1)
    diff = (vals[:, :d] - vals[:, d:]) / (2 * hs)  # (n, d_in, d_out)
    return jnp.swapaxes(diff, 1, 2)


def volume_residual(ode: OdeMap, x, h: float = FD_STEP):
    """``|det grad(phi)(x) - 1|`` by central differences; scalar for one point, array for a batch."""
    xb, single = _as_batch(x)
    jac = flow_jacobian_fd(lambda p: integrate(ode, p), xb, h)
    res = np.abs(np.linalg.det(np.asarray(jac)) - 1.0)
    return float(res[0]) if single else res


def export_trajectories_csv(traj: Trajectory, path) -> Path:
    """Columns ``particle, t, x1..xd``; one block of rows per particle."""
    states = traj.states if traj.states.ndim == 3 else traj.states[None]
    d = states.shape[-1]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["particle", "t", *[f"x{i + 1}" for i in range(d)]])
        for p, path_states in enumerate(states):
            for t, s in zip(traj.times, path_states):
                w.writerow([p, repr(float(t)), *[repr(float(v)) for v in s]])
    return path


def read_trajectories_csv(path) -> Trajectory:
    with open(path) as fh:
        lines = fh.read().splitlines()[1:]
    if not any(line.strip() for line in lines):
        return Trajectory(np.zeros(0), np.zeros((0, 0, 0)))
    rows = np.loadtxt(lines, delimiter=",", ndmin=2)
    ids = rows[:, 0].astype(int)
    n = ids.max() + 1
    per = len(rows) // n
    states = rows[:, 2:].reshape(n, per, -1)
    return Trajectory(rows[:per, 1], states)
