"""Invertible base maps ``f`` (data -> N(0, I)) with exact inverse and log-determinant.

Layers are small frozen dataclasses carrying static structure; their trainable
parameters live in ``BaseFlow.params`` (one dict per layer) so the whole flow is a
JAX pytree and can be differentiated and jitted directly.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import partial

import jax
import jax.numpy as jnp
import numpy as np

from gpot.optim import AdamState, adam_init, adam_step
from gpot.io import load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

LOG_2PI = math.log(2 * math.pi)
MIN_SCALE = 1e-12


class NumericalAbort(RuntimeError):
    pass


@dataclass(frozen=True)
class DiagonalAffine:
    dim: int

    def init(self, rng, scale=None, shift=None):
        scale = np.ones(self.dim) if scale is None else np.asarray(scale, dtype=float)
        shift = np.zeros(self.dim) if shift is None else np.asarray(shift, dtype=float)
        if np.any(np.abs(scale) < MIN_SCALE):
            raise ValueError(f"diagonal scale {scale.tolist()} is not invertible")
        return {"scale": jnp.asarray(scale), "shift": jnp.asarray(shift)}

    def forward(self, p, x):
        return p["scale"] * x + p["shift"], jnp.sum(jnp.log(jnp.abs(p["scale"])))

    def inverse(self, p, y):
        return (y - p["shift"]) / p["scale"]


@dataclass(frozen=True)
class PlanarRotation:
    dim: int
    i: int = 0
    j: int = 1

    def init(self, rng, angle=None):
        angle = rng.uniform(-np.pi, np.pi) if angle is None else float(angle)
        return {"angle": jnp.asarray(angle)}

    def _rotate(self, x, angle):
        c, s = jnp.cos(angle), jnp.sin(angle)
        xi, xj = x[self.i], x[self.j]
        return x.at[self.i].set(c * xi - s * xj).at[self.j].set(s * xi + c * xj)

    def forward(self, p, x):
        return self._rotate(x, p["angle"]), jnp.zeros((), x.dtype)

    def inverse(self, p, y):
        return self._rotate(y, -p["angle"])


@dataclass(frozen=True)
class Permutation:
    perm: tuple

    @property
    def dim(self):
        return len(self.perm)

    def init(self, rng):
        return {}

    def forward(self, p, x):
        return x[jnp.asarray(self.perm)], jnp.zeros((), x.dtype)

    def inverse(self, p, y):
        return y[jnp.asarray(np.argsort(self.perm))]


@dataclass(frozen=True)
class AffineCoupling:
    """``y = m*x + (1-m)*(x*exp(s) + t)`` with ``(s, t)`` from a tanh MLP of ``m*x``."""

    mask: tuple
    hidden: int = 64
    depth: int = 2
    additive: bool = False
    scale_bound: float = 3.0

    @property
    def dim(self):
        return len(self.mask)

    def init(self, rng, out_scale=0.0):
        d = self.dim
        dims = [d] + [self.hidden] * self.depth + [2 * d]
        ws, bs = [], []
        for k, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            lim = 1.0 / np.sqrt(a)
            w = rng.uniform(-lim, lim, size=(b, a))
            if k == len(dims) - 2:
                w = w * out_scale
            ws.append(jnp.asarray(w))
            bs.append(jnp.zeros(b))
        return {"w": tuple(ws), "b": tuple(bs)}

    def _st(self, p, xm):
        h = xm
        for k, (w, b) in enumerate(zip(p["w"], p["b"])):
            h = w @ h + b
            if k < len(p["w"]) - 1:
                h = jnp.tanh(h)
        d = self.dim
        s = self.scale_bound * jnp.tanh(h[:d] / self.scale_bound)
        if self.additive:
            s = jnp.zeros_like(s)
        return s, h[d:]

    def forward(self, p, x):
        m = jnp.asarray(self.mask, dtype=x.dtype)
        s, t = self._st(p, m * x)
        s = (1 - m) * s
        y = m * x + (1 - m) * (x * jnp.exp(s) + t)
        return y, jnp.sum(s)

    def inverse(self, p, y):
        m = jnp.asarray(self.mask, dtype=y.dtype)
        s, t = self._st(p, m * y)
        s = (1 - m) * s
        return m * y + (1 - m) * (y - t) * jnp.exp(-s)


@jax.tree_util.register_dataclass
@dataclass(frozen=True)
class BaseFlow:
    layers: tuple = field(metadata=dict(static=True))
    params: tuple
    inverse_available: bool = field(default=True, metadata=dict(static=True))

    @property
    def dim(self) -> int:
        return self.layers[0].dim

    def forward_point(self, x):
        logdet = jnp.zeros((), x.dtype)
        for layer, p in zip(self.layers, self.params):
            x, ld = layer.forward(p, x)
            logdet = logdet + ld
        return x, logdet

    def inverse_point(self, y):
        for layer, p in zip(reversed(self.layers), reversed(self.params)):
            y = layer.inverse(p, y)
        return y

    def __call__(self, x):
        return self.forward_point(x)[0]


@jax.jit
def _forward_batch(flow, x):
    return jax.vmap(flow.forward_point)(x)


@jax.jit
def _inverse_batch(flow, y):
    return jax.vmap(flow.inverse_point)(y)


def _batch(x, dim):
    x = jnp.asarray(x, dtype=jnp.float64)
    single = x.ndim == 1
    xb = x[None] if single else x
    if xb.shape[-1] != dim:
        raise ValueError(f"expected points of dimension {dim}, got shape {x.shape}")
    return xb, single


def forward(flow: BaseFlow, x):
    """``(f(x), log|det grad f(x)|)`` for one point or a batch."""
    xb, single = _batch(x, flow.dim)
    y, ld = _forward_batch(flow, xb)
    return (y[0], ld[0]) if single else (y, ld)


def inverse(flow: BaseFlow, y):
    if not flow.inverse_available:
        raise ValueError("this base flow does not expose an inverse")
    yb, single = _batch(y, flow.dim)
    x = _inverse_batch(flow, yb)
    return x[0] if single else x


def log_normal(z):
    return -0.5 * jnp.sum(z**2, axis=-1) - 0.5 * z.shape[-1] * LOG_2PI


def nll_traced(flow: BaseFlow, x):
    z, ld = jax.vmap(flow.forward_point)(x)
    return -jnp.mean(log_normal(z) + ld)


_nll_jit = jax.jit(nll_traced)


def nll(flow: BaseFlow, batch) -> float:
    """Mean negative log-likelihood under the change-of-variables formula."""
    xb, _ = _batch(batch, flow.dim)
    if xb.shape[0] == 0:
        raise ValueError("empty batch")
    return float(_nll_jit(flow, xb))


def build(layers, rng=None, **init_kwargs) -> BaseFlow:
    rng = np.random.default_rng(0) if rng is None else rng
    return BaseFlow(tuple(layers), tuple(layer.init(rng) for layer in layers))


def identity_flow(dim: int) -> BaseFlow:
    layer = DiagonalAffine(dim)
    return BaseFlow((layer,), (layer.init(None),))


def scale_flow(dim: int, scale) -> BaseFlow:
    layer = DiagonalAffine(dim)
    return BaseFlow((layer,), (layer.init(None, scale=np.full(dim, scale, dtype=float)),))


def rotation_flow(angle: float) -> BaseFlow:
    layer = PlanarRotation(2)
    return BaseFlow((layer,), (layer.init(None, angle=angle),))


def coupling_flow(dim: int, n_layers: int = 8, hidden: int = 64, seed: int = 0, affine_head: bool = True) -> BaseFlow:
    """Alternating checkerboard affine couplings, optionally followed by a diagonal affine layer."""
    rng = np.random.default_rng(seed)
    layers, params = [], []
    for k in range(n_layers):
        mask = tuple(int((i + k) % 2 == 0) for i in range(dim))
        layer = AffineCoupling(mask, hidden=hidden)
        layers.append(layer)
        params.append(layer.init(rng))
    if affine_head:
        head = DiagonalAffine(dim)
        layers.append(head)
        params.append(head.init(rng))
    return BaseFlow(tuple(layers), tuple(params))


def synthetic_flow(dim: int, n_layers: int = 4, seed: int = 0, inverse_available: bool = True) -> BaseFlow:
    """Frozen random diffeomorphism: scalings, rotations and couplings with random weights."""
    rng = np.random.default_rng(seed)
    layers, params = [], []
    for k in range(n_layers):
        kind = k % 3
        if kind == 0:
            layer = DiagonalAffine(dim)
            p = layer.init(rng, scale=rng.uniform(0.6, 1.6, dim) * rng.choice([-1, 1], dim), shift=rng.normal(0, 0.3, dim))
        elif kind == 1 and dim >= 2:
            i, j = sorted(rng.choice(dim, 2, replace=False).tolist())
            layer = PlanarRotation(dim, i, j)
            p = layer.init(rng)
        else:
            mask = tuple(int((i + k) % 2 == 0) for i in range(dim))
            layer = AffineCoupling(mask, hidden=16, scale_bound=1.0)
            p = layer.init(rng, out_scale=0.5)
        layers.append(layer)
        params.append(p)
    return BaseFlow(tuple(layers), tuple(params), inverse_available)


@dataclass
class NfTrainConfig:
    epochs: int = 200
    batch_size: int = 512
    lr: float = 1e-3
    seed: int = 0
    holdout_fraction: float = 0.2


@dataclass
class NfTrainResult:
    flow: BaseFlow
    train_nll: list
    heldout_nll: list


@partial(jax.jit, static_argnames=("lr",))
def _nf_step(flow, state: AdamState, batch, lr):
    loss, g = jax.value_and_grad(lambda fl: nll_traced(fl, batch))(flow)
    flow, state = adam_step(flow, g, state, lr)
    return flow, state, loss


def train_nf(flow: BaseFlow, data, config: NfTrainConfig | None = None) -> NfTrainResult:
    """Maximum likelihood with Adam; one epoch is one shuffled pass over the training split."""
    config = config or NfTrainConfig()
    data = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise ValueError("training data contains non-finite values")
    rng = np.random.default_rng(config.seed)
    idx = rng.permutation(len(data))
    n_hold = int(round(config.holdout_fraction * len(data)))
    held, train = data[idx[:n_hold]], data[idx[n_hold:]]
    held_j = jnp.asarray(held) if n_hold else None
    state = adam_init(flow)
    train_curve, held_curve = [], []
    n_batches = max(1, len(train) // config.batch_size)
    for epoch in range(config.epochs):
        order = rng.permutation(len(train))
        losses = []
        for b in range(n_batches):
            batch = jnp.asarray(train[order[b * config.batch_size : (b + 1) * config.batch_size]])
            flow, state, loss = _nf_step(flow, state, batch, config.lr)
            losses.append(loss)
        epoch_loss = float(np.mean(np.asarray(losses)))
        if not math.isfinite(epoch_loss):
            raise NumericalAbort(f"NLL became non-finite at epoch {epoch}")
        train_curve.append(epoch_loss)
        if held_j is not None:
            held_curve.append(float(_nll_jit(flow, held_j)))
        if epoch % 50 == 0:
            log.info("nf epoch %d train nll %.4f", epoch, epoch_loss)
    return NfTrainResult(flow, train_curve, held_curve)


# -- checkpoints -------------------------------------------------------------


def _layer_header(layer) -> dict:
    if isinstance(layer, DiagonalAffine):
        return {"type": "diagonal_affine", "dim": layer.dim}
    if isinstance(layer, PlanarRotation):
        return {"type": "planar_rotation", "dim": layer.dim, "i": layer.i, "j": layer.j}
    if isinstance(layer, Permutation):
        return {"type": "permutation", "perm": list(layer.perm)}
    if isinstance(layer, AffineCoupling):
        return {
            "type": "affine_coupling",
            "mask": list(layer.mask),
            "hidden": layer.hidden,
            "depth": layer.depth,
            "additive": layer.additive,
            "scale_bound": layer.scale_bound,
        }
    raise TypeError(f"unknown layer {layer!r}")


def _layer_from_header(h: dict):
    kind = h["type"]
    if kind == "diagonal_affine":
        return DiagonalAffine(h["dim"])
    if kind == "planar_rotation":
        return PlanarRotation(h["dim"], h["i"], h["j"])
    if kind == "permutation":
        return Permutation(tuple(h["perm"]))
    if kind == "affine_coupling":
        return AffineCoupling(tuple(h["mask"]), h["hidden"], h["depth"], h["additive"], h["scale_bound"])
    raise ValueError(f"unknown layer type {kind!r}")


def save_flow(path, flow: BaseFlow, extra: dict | None = None):
    leaves = jax.tree_util.tree_leaves(flow.params)
    flat = np.concatenate([np.asarray(a).ravel() for a in leaves]) if leaves else np.zeros(0)
    header = {
        "kind": "base_flow",
        "dim": flow.dim,
        "inverse_available": flow.inverse_available,
        "layers": [_layer_header(layer) for layer in flow.layers],
    }
    if extra:
        header.update(extra)
    return save_checkpoint(path, header, flat)


def flow_from_header(header: dict, payload) -> BaseFlow:
    if header.get("kind") != "base_flow":
        raise ValueError(f"not a base flow checkpoint: kind={header.get('kind')!r}")
    layers = tuple(_layer_from_header(h) for h in header["layers"])
    rng = np.random.default_rng(0)
    template = tuple(layer.init(rng) for layer in layers)
    leaves, treedef = jax.tree_util.tree_flatten(template)
    sizes = [int(np.size(a)) for a in leaves]
    if sum(sizes) != len(payload):
        raise ValueError(f"payload has {len(payload)} values, layers need {sum(sizes)}")
    out, k = [], 0
    for a, n in zip(leaves, sizes):
        out.append(jnp.asarray(payload[k : k + n]).reshape(np.shape(a)))
        k += n
    return BaseFlow(layers, jax.tree_util.tree_unflatten(treedef, out), header.get("inverse_available", True))


def load_flow(path) -> BaseFlow:
    header, payload = load_checkpoint(path)
    return flow_from_header(header, payload)
