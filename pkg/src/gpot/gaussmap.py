"""Gaussian-preserving maps ``s = sqrt(2) erfinv o phi o erf(. / sqrt(2))``.

``phi`` is any volume-preserving map of the open cube (normally an :class:`OdeMap`);
the componentwise error function carries N(0, I) onto the uniform law on (-1, 1)^d
and back, so ``s`` pushes N(0, I) onto itself.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import jax
import jax.numpy as jnp
import jax.scipy.special as jsp
import numpy as np

from gpot.divfree import field_from_header, field_header, flatten_unet
from gpot.flowode import OdeMap, flow_jacobian_fd, integrate
from gpot.io import load_checkpoint, save_checkpoint

EPS_CLIP = 1e-12
SQRT2 = float(np.sqrt(2.0))
_TWO_OVER_SQRT_PI = 2.0 / float(np.sqrt(np.pi))


class DomainError(ValueError):
    """An erf-space coordinate reached the guard band around +-1."""

    def __init__(self, index, value):
        self.index = tuple(int(i) for i in np.atleast_1d(index))
        self.value = float(value)
        super().__init__(f"component {self.index} = {self.value!r} is outside (-1 + {EPS_CLIP}, 1 - {EPS_CLIP})")


class DegenerateJacobian(ArithmeticError):
    pass


def _require_finite(x):
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(arr))[0]
        raise ValueError(f"non-finite input at index {tuple(bad)}")
    return arr


def erf_vec(x):
    """Componentwise error function."""
    return jsp.erf(jnp.asarray(_require_finite(x)))


def erfinv_traced(y):
    # library erfinv is ~1e-12 near the ends; one Newton step on erf brings it to round-off
    x = jsp.erfinv(y)
    return x - (jsp.erf(x) - y) / (_TWO_OVER_SQRT_PI * jnp.exp(-x * x))


def check_cube_domain(y) -> None:
    arr = np.asarray(y)
    bad = np.abs(arr) >= 1.0 - EPS_CLIP
    if bad.any():
        idx = np.argwhere(bad)[0]
        raise DomainError(idx, arr[tuple(idx)])


def erfinv_vec(y):
    """Inverse error function; inputs within ``EPS_CLIP`` of +-1 raise :class:`DomainError`."""
    arr = _require_finite(y)
    check_cube_domain(arr)
    return erfinv_traced(jnp.asarray(arr))


@jax.tree_util.register_dataclass
@dataclass(frozen=True)
class IdentityMap:
    dim: int = field(default=0, metadata=dict(static=True))

    def __call__(self, u):
        return u

    def inverse(self, u):
        return u


@jax.tree_util.register_dataclass
@dataclass(frozen=True)
class SignedPermutation:
    """``u -> P u`` with ``(P u)_i = signs[i] * u[perm[i]]``."""

    perm: tuple = field(metadata=dict(static=True))
    signs: tuple = field(metadata=dict(static=True))

    @property
    def dim(self) -> int:
        return len(self.perm)

    def __call__(self, u):
        return jnp.asarray(self.signs, dtype=u.dtype) * u[jnp.asarray(self.perm)]

    def inverse(self, u):
        inv = np.argsort(self.perm)
        return (u * jnp.asarray(self.signs, dtype=u.dtype))[jnp.asarray(inv)]


@jax.tree_util.register_dataclass
@dataclass(frozen=True)
class Composed:
    """``maps[-1] o ... o maps[0]``."""

    maps: tuple

    @property
    def dim(self) -> int:
        return self.maps[0].dim

    def __call__(self, u):
        for m in self.maps:
            u = m(u)
        return u

    def inverse(self, u):
        for m in reversed(self.maps):
            u = m.inverse(u)
        return u


def reflect_first(u):
    """``h(x) = (-x_1, x_2, ..., x_d)``; an involution with determinant -1."""
    return u.at[..., 0].multiply(-1.0)


@jax.tree_util.register_dataclass
@dataclass(frozen=True)
class GpFlow:
    phi: Any
    orientation: int = field(default=1, metadata=dict(static=True))

    def __post_init__(self):
        if self.orientation not in (1, -1):
            raise ValueError("orientation must be +1 or -1")

    @property
    def dim(self) -> int:
        return self.phi.dim

    def __call__(self, x):
        """Traceable single-point version of :func:`gp_apply` (no domain checks)."""
        u = jsp.erf(x / SQRT2)
        if self.orientation == -1:
            u = reflect_first(u)
        return SQRT2 * erfinv_traced(self.phi(u))

    def inverse(self, y):
        u = self.phi.inverse(jsp.erf(y / SQRT2))
        if self.orientation == -1:
            u = reflect_first(u)
        return SQRT2 * erfinv_traced(u)


_vmapped_call = jax.jit(jax.vmap(lambda m, u: m(u), in_axes=(None, 0)))
_vmapped_inv = jax.jit(jax.vmap(lambda m, u: m.inverse(u), in_axes=(None, 0)))


def _phi_forward(phi, u):
    if isinstance(phi, OdeMap):
        return integrate(phi, u)
    return _vmapped_call(phi, u)


def _phi_inverse(phi, u):
    if isinstance(phi, OdeMap):
        return integrate(phi.inverse_map(), u)
    return _vmapped_inv(phi, u)


def _batch(x):
    arr = _require_finite(x)
    single = arr.ndim == 1
    return jnp.asarray(arr[None] if single else arr), single


def gp_apply(s: GpFlow, x):
    """``sqrt(2) erfinv(phi(erf(x / sqrt(2))))`` for one point or a batch."""
    xb, single = _batch(x)
    u = jsp.erf(xb / SQRT2)
    if s.orientation == -1:
        u = reflect_first(u)
    check_cube_domain(u)
    out = SQRT2 * erfinv_vec(_phi_forward(s.phi, u))
    return out[0] if single else out


def gp_inverse(s: GpFlow, y):
    yb, single = _batch(y)
    u = jsp.erf(yb / SQRT2)
    check_cube_domain(u)
    u = _phi_inverse(s.phi, u)
    if s.orientation == -1:
        u = reflect_first(u)
    out = SQRT2 * erfinv_vec(u)
    return out[0] if single else out


def preservation_residual(s: GpFlow, x):
    """``| log|det grad s(x)| - (|s(x)|^2 - |x|^2) / 2 |`` with a central-difference Jacobian."""
    xb, single = _batch(x)
    h = 1e-5 * np.maximum(1.0, np.linalg.norm(np.asarray(xb), axis=1))
    jac = np.asarray(flow_jacobian_fd(lambda p: gp_apply(s, p), xb, h))
    det = np.linalg.det(jac)
    if np.any(det * s.orientation <= 0):
        i = int(np.argmax(det * s.orientation <= 0))
        raise DegenerateJacobian(f"finite-difference determinant {det[i]!r} at point {i} has the wrong sign")
    sx = np.asarray(gp_apply(s, xb))
    xn = np.asarray(xb)
    res = np.abs(np.log(np.abs(det)) - 0.5 * (np.sum(sx**2, 1) - np.sum(xn**2, 1)))
    return float(res[0]) if single else res


def save_gp(path, s: GpFlow, extra: dict | None = None):
    """Checkpoint a GP flow whose ``phi`` is an :class:`OdeMap` of a network field."""
    if not isinstance(s.phi, OdeMap):
        raise TypeError("only ODE-based GP flows can be checkpointed")
    header = field_header(s.phi.field)
    header.update(kind="gp_flow", n_steps=s.phi.n_steps, t_final=s.phi.t_final, orientation=s.orientation)
    if extra:
        header.update(extra)
    return save_checkpoint(path, header, flatten_unet(s.phi.field.unet))


def gp_from_header(header: dict, payload) -> GpFlow:
    if header.get("kind") != "gp_flow":
        raise ValueError(f"not a GP flow checkpoint: kind={header.get('kind')!r}")
    phi = OdeMap(field_from_header(header, payload), int(header["n_steps"]), float(header["t_final"]))
    return GpFlow(phi, int(header["orientation"]))


def load_gp(path) -> GpFlow:
    return gp_from_header(*load_checkpoint(path))
