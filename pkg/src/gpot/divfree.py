"""Divergence-free, time-dependent velocity fields on the cube (-1, 1)^d.

A single tanh network ``u(x, t)`` produces ``d - 1`` rows ``u^0 .. u^{d-2}`` in R^d.
Block ``n`` uses the antisymmetric potentials ``psi_ij = u^n_i - u^n_j`` restricted
to indices ``i, j >= n`` (0-based), which makes it divergence free by construction.
With ``boundary="cube"`` each potential is multiplied by ``(x_i^2 - 1)(x_j^2 - 1)``
so that ``v_i`` vanishes on the faces ``x_i = +-1``.

Jacobians below always follow the convention ``J[i, j] = d u_i / d x_j``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import jax
import jax.numpy as jnp
import numpy as np

from gpot.io import load_checkpoint, save_checkpoint

BOUNDARY_MODES = ("free", "cube")


@jax.tree_util.register_dataclass
@dataclass(frozen=True)
class UNet:
    """Plain tanh MLP ``(x, t) -> u`` with layer widths ``[d+1, w_1, ..., w_L, (d-1)*d]``."""

    weights: tuple
    biases: tuple

    def __post_init__(self):
        ws, bs = self.weights, self.biases
        if not all(hasattr(a, "shape") for a in (*ws, *bs)):
            return  # placeholder leaves during pytree manipulation
        if len(ws) != len(bs) or not ws:
            raise ValueError("UNet needs matching, non-empty weight and bias lists")
        for i, (w, b) in enumerate(zip(ws, bs)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {i}: weight {w.shape} incompatible with bias {b.shape}")
            if i and w.shape[1] != ws[i - 1].shape[0]:
                raise ValueError(f"layer {i}: expects {w.shape[1]} inputs, previous layer gives {ws[i - 1].shape[0]}")
        d = ws[0].shape[1] - 1
        if d < 2:
            raise ValueError("spatial dimension must be at least 2")
        if ws[-1].shape[0] != (d - 1) * d:
            raise ValueError(f"output width {ws[-1].shape[0]} != (d-1)*d = {(d - 1) * d}")

    @property
    def dims(self) -> list[int]:
        return [int(self.weights[0].shape[1])] + [int(w.shape[0]) for w in self.weights]

    @property
    def dim(self) -> int:
        return self.dims[0] - 1

    @property
    def n_params(self) -> int:
        return sum(int(w.size) + int(b.size) for w, b in zip(self.weights, self.biases))


def init_unet(dim: int, hidden=(15, 15), seed: int = 0, final_scale: float = 0.01) -> UNet:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init; last layer shrunk so the flow starts near identity."""
    rng = np.random.default_rng(seed)
    dims = [dim + 1, *hidden, (dim - 1) * dim]
    ws, bs = [], []
    for k, (n_in, n_out) in enumerate(zip(dims[:-1], dims[1:])):
        a = 1.0 / np.sqrt(n_in)
        w = rng.uniform(-a, a, size=(n_out, n_in))
        b = rng.uniform(-a, a, size=n_out)
        if k == len(dims) - 2:
            w, b = w * final_scale, b * final_scale
        ws.append(jnp.asarray(w))
        bs.append(jnp.asarray(b))
    return UNet(tuple(ws), tuple(bs))


def _inputs(x, t):
    return jnp.concatenate([x, jnp.reshape(jnp.asarray(t, dtype=x.dtype), (1,))])


def unet_eval(net: UNet, x, t):
    """Rows ``u^0 .. u^{d-2}`` of the network output at ``(x, t)``, shape ``(d-1, d)``."""
    x = jnp.asarray(x)
    h = _inputs(x, t)
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = w @ h + b
        if i < last:
            h = jnp.tanh(h)
    d = x.shape[0]
    return h.reshape(d - 1, d)


def _eval_with_jacobian(net: UNet, x, t):
    d = x.shape[0]
    h = _inputs(x, t)
    # time is an input but not a differentiation variable
    jac = jnp.eye(d + 1, d, dtype=x.dtype)
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = w @ h + b
        jac = w @ jac
        if i < last:
            h = jnp.tanh(h)
            jac = (1.0 - h**2)[:, None] * jac
    return h.reshape(d - 1, d), jac.reshape(d - 1, d, d)


def unet_jacobian(net: UNet, x, t):
    """Spatial Jacobian of the flattened output, shape ``((d-1)*d, d)``."""
    x = jnp.asarray(x)
    d = x.shape[0]
    _, jac = _eval_with_jacobian(net, x, t)
    return jac.reshape((d - 1) * d, d)


def _masks(d, dtype):
    idx = jnp.arange(d)
    return (idx[None, :] >= jnp.arange(d - 1)[:, None]).astype(dtype)  # (d-1, d)


def _free_blocks(u, jac, m):
    jm = jac * m[:, :, None] * m[:, None, :]
    tr = jnp.trace(jm, axis1=1, axis2=2)
    return jnp.einsum("nij,nj->ni", jm, m) - tr[:, None] * m


def _cube_blocks(u, jac, m, x):
    q = x**2 - 1.0
    jm = jac * m[:, :, None] * m[:, None, :]
    um = u * m
    # M^n_ij = u_i - u_j on the active index block
    mx = (um * jnp.sum(m * x, axis=1, keepdims=True)) - (m * jnp.sum(um * x, axis=1, keepdims=True))
    jq = jnp.einsum("nij,j->ni", jm, q)
    qd = jnp.einsum("nii,i->n", jm, q)
    return q * (2.0 * mx + jq - qd[:, None] * m)


def _check_block(n, d):
    if not 0 <= n <= d - 2:
        raise ValueError(f"block index {n} outside 0..{d - 2}")


def block_field(net: UNet, n: int, x, t):
    """Divergence-free block ``v^n = J^n 1^n - tr(J^n) 1^n`` without boundary factors."""
    x = jnp.asarray(x)
    d = x.shape[0]
    _check_block(n, d)
    u, jac = _eval_with_jacobian(net, x, t)
    return _free_blocks(u, jac, _masks(d, x.dtype))[n]


def boundary_block_field(net: UNet, n: int, x, t):
    """Block ``n`` with potentials scaled by ``(x_i^2-1)(x_j^2-1)``; tangential on the faces."""
    x = jnp.asarray(x)
    d = x.shape[0]
    _check_block(n, d)
    u, jac = _eval_with_jacobian(net, x, t)
    return _cube_blocks(u, jac, _masks(d, x.dtype), x)[n]


@jax.tree_util.register_dataclass
@dataclass(frozen=True)
class VelocityField:
    unet: UNet
    boundary: str = field(default="cube", metadata=dict(static=True))

    def __post_init__(self):
        if self.boundary not in BOUNDARY_MODES:
            raise ValueError(f"boundary must be one of {BOUNDARY_MODES}, got {self.boundary!r}")

    @property
    def dim(self) -> int:
        return self.unet.dim

    def __call__(self, x, t):
        return velocity(self, x, t)


def velocity(fld: VelocityField, x, t):
    """Sum of all ``d - 1`` blocks from a single network pass."""
    x = jnp.asarray(x)
    u, jac = _eval_with_jacobian(fld.unet, x, t)
    m = _masks(x.shape[0], x.dtype)
    if fld.boundary == "cube":
        return jnp.sum(_cube_blocks(u, jac, m, x), axis=0)
    return jnp.sum(_free_blocks(u, jac, m), axis=0)


@jax.tree_util.register_dataclass
@dataclass(frozen=True)
class LinearField:
    """Analytic field ``v(x, t) = A x + t c``; handy for closed-form checks."""

    matrix: jax.Array
    drift: jax.Array | None = None
    boundary: str = field(default="free", metadata=dict(static=True))

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[0])

    def __call__(self, x, t):
        v = self.matrix @ x
        if self.drift is not None:
            v = v + t * self.drift
        return v


def flatten_unet(net: UNet) -> np.ndarray:
    """Parameters in declaration order: W_0 (row-major), b_0, W_1, b_1, ..."""
    parts = []
    for w, b in zip(net.weights, net.biases):
        parts.append(np.asarray(w).ravel())
        parts.append(np.asarray(b).ravel())
    return np.concatenate(parts)


def unflatten_unet(dims, flat) -> UNet:
    flat = jnp.asarray(flat)
    expected = sum(o * i + o for i, o in zip(dims[:-1], dims[1:]))
    if flat.shape != (expected,):
        raise ValueError(f"parameter vector has length {flat.shape}, layer dims {list(dims)} need {expected}")
    ws, bs, k = [], [], 0
    for n_in, n_out in zip(dims[:-1], dims[1:]):
        ws.append(flat[k : k + n_in * n_out].reshape(n_out, n_in))
        k += n_in * n_out
        bs.append(flat[k : k + n_out])
        k += n_out
    return UNet(tuple(ws), tuple(bs))


def field_header(fld: VelocityField) -> dict:
    return {
        "kind": "velocity_field",
        "dims": fld.unet.dims,
        "dim": fld.dim,
        "boundary": fld.boundary,
        "activation": "tanh",
    }


def save_field(path, fld: VelocityField, extra: dict | None = None):
    header = field_header(fld)
    if extra:
        header.update(extra)
    return save_checkpoint(path, header, flatten_unet(fld.unet))


def field_from_header(header: dict, payload) -> VelocityField:
    if header.get("kind") not in ("velocity_field", "gp_flow"):
        raise ValueError(f"not a velocity field checkpoint: kind={header.get('kind')!r}")
    return VelocityField(unflatten_unet(header["dims"], payload), boundary=header["boundary"])


def load_field(path) -> VelocityField:
    header, payload = load_checkpoint(path)
    return field_from_header(header, payload)
