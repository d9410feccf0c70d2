"""Gradient engine and the two GP-flow training loops.

Gradients are exact derivatives of the discrete pipeline (tanh net, block fields,
fixed-step RK4, erf conjugation, squared displacement, Euler probes), obtained by
reverse-mode differentiation of that computational graph.

``fit_gp_forward`` minimizes ``E_data |x - s(f(x))|^2 + lambda R`` over training data;
``fit_gp_backward`` minimizes ``E_normal |z - g(s(z))|^2 + lambda R`` over fresh normal
draws, which needs the base inverse ``g`` but no data.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace
from functools import partial
from pathlib import Path
from typing import NamedTuple

import jax
import jax.numpy as jnp
import jax.scipy.special as jsp
import numpy as np

from gpot import baseflow
from gpot.divfree import BOUNDARY_MODES, VelocityField, flatten_unet, init_unet, unflatten_unet
from gpot.eulerreg import DEFAULT_DT, EulerPenaltyConfig, energy_from_states, lambda_at, penalty_from_states
from gpot.flowode import ESCAPE_TOL, IntegrationEscape, OdeMap, rk4_states
from gpot.gaussmap import EPS_CLIP, SQRT2, GpFlow, erfinv_traced, reflect_first
from gpot.optim import AdamState, adam_init
from gpot.optim import adam_step as _adam

log = logging.getLogger(__name__)

CURVE_COLUMNS = ("epoch", "ot_cost", "nll", "euler_penalty", "energy", "lambda")
NORMAL_TRUNCATION = 7.0


class NumericalAbort(RuntimeError):
    pass


# -- flat parameters and the generic gradient --------------------------------


@dataclass(frozen=True)
class ParamVector:
    """All UNet weights and biases, flattened in declaration order."""

    values: np.ndarray
    dims: tuple

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "dims", tuple(int(k) for k in self.dims))
        expected = sum(o * i + o for i, o in zip(self.dims[:-1], self.dims[1:]))
        if values.shape != (expected,):
            raise ValueError(f"{values.shape} values do not fit layer dims {list(self.dims)} ({expected} parameters)")
        if not np.all(np.isfinite(values)):
            raise ValueError("parameter vector contains non-finite values")

    @classmethod
    def from_unet(cls, net) -> "ParamVector":
        return cls(flatten_unet(net), tuple(net.dims))

    def to_unet(self):
        return unflatten_unet(self.dims, self.values)

    def __len__(self):
        return len(self.values)


def grad(objective, params):
    """Reverse-mode gradient of a scalar ``objective`` at ``params``.

    ``params`` may be a :class:`ParamVector` (the objective then receives the flat
    array and the result is a ParamVector), a flat array, or any pytree.
    """
    if isinstance(params, ParamVector):
        g = grad(objective, jnp.asarray(params.values))
        return ParamVector(np.asarray(g), params.dims)
    value = objective(params)
    if np.ndim(value) != 0:
        raise ValueError(f"objective must return a scalar, got shape {np.shape(value)}")
    if not math.isfinite(float(value)):
        raise ValueError(f"objective is not finite at the given parameters ({float(value)!r})")
    return jax.grad(objective)(params)


# -- Adam on flat vectors -----------------------------------------------------


@dataclass(frozen=True)
class TrainState:
    params: ParamVector
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lam: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.m.shape != self.params.values.shape or self.v.shape != self.params.values.shape:
            raise ValueError("moment accumulators must match the parameter vector")


def train_state(params: ParamVector, lam: float = 0.0, seed: int = 0) -> TrainState:
    z = np.zeros_like(params.values)
    return TrainState(params, z, z.copy(), 0, lam, seed)


def adam_step(state: TrainState, g, lr: float) -> TrainState:
    """``beta1=0.9, beta2=0.999, eps=1e-8`` with bias correction."""
    g = g.values if isinstance(g, ParamVector) else np.asarray(g, dtype=np.float64)
    inner = AdamState(jnp.asarray(state.m), jnp.asarray(state.v), jnp.asarray(state.step, jnp.int32))
    p, inner = _adam(jnp.asarray(state.params.values), jnp.asarray(g), inner, lr)
    return TrainState(
        ParamVector(np.asarray(p), state.params.dims),
        np.asarray(inner.m),
        np.asarray(inner.v),
        state.step + 1,
        state.lam,
        state.seed,
    )


def lambda_schedule(euler: EulerPenaltyConfig, epoch: int) -> float:
    """``lambda0 * 2^-min(epoch // period, n_decays)`` (factor configurable)."""
    return lambda_at(euler, epoch)


# -- objectives --------------------------------------------------------------


class _Static(NamedTuple):
    mode: str
    boundary: str
    n_steps: int
    t_final: float
    orientation: int
    use_penalty: bool
    probes: int


def _rollout(unet, z, st: _Static):
    """Cube-space RK4 states ``(n, N+1, d)`` starting from ``erf(z / sqrt 2)``."""
    fld = VelocityField(unet, st.boundary)
    u0 = jsp.erf(z / SQRT2)
    if st.orientation == -1:
        u0 = reflect_first(u0)
    return fld, jax.vmap(lambda u: rk4_states(fld, u, st.n_steps, st.t_final))(u0)


def _images(base, states, st: _Static):
    u = jnp.clip(states[:, -1], -1.0 + EPS_CLIP, 1.0 - EPS_CLIP)
    y = SQRT2 * erfinv_traced(u)
    if st.mode == "backward":
        y = jax.vmap(base.inverse_point)(y)
    return y


def _terms(unet, base, src, tgt, key, lam, dt, st: _Static):
    fld, states = _rollout(unet, src, st)
    y = _images(base, states, st)
    cost = jnp.mean(jnp.sum((tgt - y) ** 2, axis=-1))
    if st.use_penalty:
        pen = penalty_from_states(fld, states, key, dt, st.t_final, st.probes)
    else:
        pen = jnp.zeros((), cost.dtype)
    return cost + lam * pen, (cost, pen, jnp.max(jnp.abs(states)))


@partial(jax.jit, static_argnames=("st",))
def _train_step(unet, opt, base, src, tgt, key, lam, lr, dt, st):
    (loss, aux), g = jax.value_and_grad(_terms, has_aux=True)(unet, base, src, tgt, key, lam, dt, st)
    unet, opt = _adam(unet, g, opt, lr)
    return unet, opt, loss, aux


OBJECTIVES = ("forward", "backward", "euler", "energy")


def make_objective(
    kind: str,
    dims,
    base,
    points,
    boundary: str = "cube",
    n_steps: int = 15,
    t_final: float = 1.0,
    lam: float = 0.0,
    dt: float = DEFAULT_DT,
    seed: int = 0,
    orientation: int = 1,
):
    """Scalar objective of the flat UNet parameters, for gradient checks and custom loops.

    ``forward``: ``mean |x - s(f(x))|^2 + lam R`` with ``points`` the data ``x``.
    ``backward``: ``mean |z - g(s(z))|^2 + lam R`` with ``points`` normal draws ``z``.
    ``euler`` / ``energy``: the penalty ``R`` or path energy along trajectories of ``points``
    (Gaussian-space points, mapped to the cube by erf).
    """
    if kind not in OBJECTIVES:
        raise ValueError(f"unknown objective {kind!r}; choose from {OBJECTIVES}")
    dims = tuple(dims)
    pts = jnp.asarray(points, dtype=jnp.float64)
    key = jax.random.PRNGKey(seed)
    use_penalty = kind == "euler" or (lam > 0 and kind in ("forward", "backward"))
    st = _Static("backward" if kind == "backward" else "forward", boundary, n_steps, float(t_final), orientation, use_penalty, 1)
    if kind == "forward":
        src, tgt = jnp.asarray(baseflow.forward(base, pts)[0]), pts
    else:
        src, tgt = pts, pts

    def objective(flat):
        unet = unflatten_unet(dims, flat)
        if kind == "euler":
            fld, states = _rollout(unet, src, st)
            return penalty_from_states(fld, states, key, dt, st.t_final, 1)
        if kind == "energy":
            fld, states = _rollout(unet, src, st)
            return energy_from_states(fld, states, st.t_final)
        return _terms(unet, base, src, tgt, key, lam, dt, st)[0]

    return objective


def fd_gradient(objective, flat, rel_step: float = 1e-6):
    """Central differences with ``h_i = rel_step * (1 + |theta_i|)``; the test oracle for :func:`grad`."""
    flat = np.asarray(flat, dtype=np.float64)
    out = np.empty_like(flat)
    for i in range(len(flat)):
        h = rel_step * (1.0 + abs(flat[i]))
        e = np.zeros_like(flat)
        e[i] = h
        out[i] = (float(objective(jnp.asarray(flat + e))) - float(objective(jnp.asarray(flat - e)))) / (2 * h)
    return out


# -- composed model diagnostics ----------------------------------------------


def gp_logdet(gp: GpFlow, z, inverse: bool = False):
    """``log|det grad s|`` (or of ``s^-1``) at each row of ``z`` via forward-mode Jacobians."""
    fn = gp.inverse if inverse else gp
    jac = jax.vmap(jax.jacfwd(fn))(z)
    return jnp.linalg.slogdet(jac)[1]


def _composed_nll(base, gp, x, mode):
    z, ldf = jax.vmap(base.forward_point)(x)
    if mode == "backward":
        w = jax.vmap(gp.inverse)(z)
        lds = gp_logdet(gp, z, inverse=True)
    else:
        w = jax.vmap(gp)(z)
        lds = gp_logdet(gp, z)
    return -jnp.mean(baseflow.log_normal(w) + ldf + lds)


composed_nll_traced = _composed_nll
_composed_nll_jit = jax.jit(_composed_nll, static_argnames=("mode",))


def composed_nll(base, gp: GpFlow, x, mode: str = "forward") -> float:
    """Held-out NLL of the model whose data-to-normal map is ``s o f`` (forward) or ``s^-1 o f`` (backward)."""
    return float(_composed_nll_jit(base, gp, jnp.asarray(x, dtype=jnp.float64), mode))


@partial(jax.jit, static_argnames=("st",))
def _monitor(unet, base, src, tgt, nll_x, key, dt, st):
    fld, states = _rollout(unet, src, st)
    y = _images(base, states, st)
    cost = jnp.mean(jnp.sum((tgt - y) ** 2, axis=-1))
    pen = penalty_from_states(fld, states, key, dt, st.t_final, st.probes) if st.use_penalty else jnp.nan
    energy = energy_from_states(fld, states, st.t_final)
    gp = GpFlow(OdeMap(fld, st.n_steps, st.t_final), st.orientation)
    return cost, _composed_nll(base, gp, nll_x, st.mode), pen, energy


# -- training loops ----------------------------------------------------------


@dataclass
class FitConfig:
    mode: str = "forward"
    hidden: tuple = (15, 15)
    n_steps: int = 15
    t_final: float = 1.0
    boundary: str = "cube"
    epochs: int = 100
    batch_size: int = 1000
    buffer_size: int = 2000
    lr: float = 1e-2
    euler: EulerPenaltyConfig = field(default_factory=EulerPenaltyConfig)
    seed: int = 0
    init_scale: float = 0.01
    monitor_size: int = 1000
    monitor_every: int = 1
    orientation: int = 0  # 0: match the sign of det grad f

    def __post_init__(self):
        if self.mode not in ("forward", "backward"):
            raise ValueError(f"mode must be 'forward' or 'backward', got {self.mode!r}")
        if self.boundary not in BOUNDARY_MODES:
            raise ValueError(f"boundary must be one of {BOUNDARY_MODES}")
        if self.orientation not in (-1, 0, 1):
            raise ValueError("orientation must be -1, 0 or 1")
        for name in ("n_steps", "batch_size", "buffer_size", "monitor_size", "monitor_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        self.hidden = tuple(int(h) for h in self.hidden)
        if isinstance(self.euler, dict):
            self.euler = EulerPenaltyConfig(**self.euler)


@dataclass
class GpFit:
    gp: GpFlow
    curve: list
    mode: str
    epochs_completed: int
    euler_evaluations: int = 0
    train_loss: list = field(default_factory=list)
    seconds: float = 0.0

    def write_curve(self, path) -> Path:
        return write_curve(self.curve, path)


class FitAborted(RuntimeError):
    """Training stopped early; ``partial`` holds the fit up to the failing step."""

    def __init__(self, message, partial: GpFit, cause: Exception):
        super().__init__(message)
        self.partial = partial
        self.cause = cause


def write_curve(rows, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CURVE_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({k: (row[k] if k == "epoch" else repr(float(row[k]))) for k in CURVE_COLUMNS})
    return path


def read_curve(path) -> list:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


def base_orientation(base, x) -> int:
    """Sign of ``det grad f`` at ``x`` (constant on a connected domain)."""
    jac = jax.jacfwd(lambda p: base.forward_point(p)[0])(jnp.asarray(x, dtype=jnp.float64))
    return 1 if float(jnp.linalg.det(jac)) > 0 else -1


def truncated_normal(rng, n, d, bound=NORMAL_TRUNCATION):
    """Standard normal draws with rows redrawn while any ``|z_i| >= bound`` (keeps erf away from +-1)."""
    z = rng.standard_normal((n, d))
    while True:
        bad = np.any(np.abs(z) >= bound, axis=1)
        if not bad.any():
            return z
        z[bad] = rng.standard_normal((int(bad.sum()), d))


def _gp_from(unet, cfg: FitConfig, orientation: int) -> GpFlow:
    return GpFlow(OdeMap(VelocityField(unet, cfg.boundary), cfg.n_steps, cfg.t_final), orientation)


def _fit(base, cfg: FitConfig, next_buffer, monitor, orientation: int, callback=None) -> GpFit:
    d = base.dim
    st = _Static(cfg.mode, cfg.boundary, cfg.n_steps, float(cfg.t_final), orientation, cfg.euler.active, cfg.euler.probes_per_point)
    unet = init_unet(d, cfg.hidden, seed=cfg.seed, final_scale=cfg.init_scale)
    opt = adam_init(unet)
    key = jax.random.PRNGKey(cfg.seed)
    mon_key = jax.random.PRNGKey(cfg.seed + 1)
    m_src, m_tgt, m_nll = (jnp.asarray(a) for a in monitor)
    dt = cfg.euler.dt
    curve, losses = [], []
    evaluations = 0
    t0 = time.perf_counter()

    def record(epoch, lam):
        nonlocal evaluations
        cost, nll_val, pen, energy = _monitor(unet, base, m_src, m_tgt, m_nll, mon_key, dt, st)
        evaluations += int(st.use_penalty)
        row = dict(epoch=epoch, ot_cost=float(cost), nll=float(nll_val), euler_penalty=float(pen), energy=float(energy), lambda_=lam)
        row["lambda"] = row.pop("lambda_")
        curve.append(row)
        if callback is not None:
            callback(row, _gp_from(unet, cfg, orientation))
        return row

    def partial_fit(epoch):
        return GpFit(_gp_from(unet, cfg, orientation), curve, cfg.mode, epoch, evaluations, losses, time.perf_counter() - t0)

    record(0, lambda_at(cfg.euler, 0))
    for epoch in range(cfg.epochs):
        lam = lambda_at(cfg.euler, epoch)
        src, tgt = next_buffer(epoch)
        n = len(src)
        n_batches = max(1, n // cfg.batch_size)
        epoch_loss = 0.0
        for b in range(n_batches):
            sl = slice(b * cfg.batch_size, (b + 1) * cfg.batch_size if b < n_batches - 1 else n)
            key, sub = jax.random.split(key)
            new_unet, new_opt, loss, (cost, pen, max_abs) = _train_step(
                unet, opt, base, jnp.asarray(src[sl]), jnp.asarray(tgt[sl]), sub, lam, cfg.lr, dt, st
            )
            evaluations += int(st.use_penalty)
            if cfg.boundary == "cube" and float(max_abs) > 1.0 + ESCAPE_TOL:
                err = IntegrationEscape(cfg.n_steps, [float(max_abs)])
                msg = f"particles left the cube during epoch {epoch}, batch {b} (max |u| = {float(max_abs)!r})"
                raise FitAborted(msg, partial_fit(epoch), err)
            if not math.isfinite(float(loss)):
                msg = f"training loss became non-finite during epoch {epoch}, batch {b}"
                raise FitAborted(msg, partial_fit(epoch), NumericalAbort(msg))
            unet, opt = new_unet, new_opt
            epoch_loss += float(loss) / n_batches
        losses.append(epoch_loss)
        done = epoch + 1
        if done % cfg.monitor_every == 0 or done == cfg.epochs:
            row = record(done, lambda_at(cfg.euler, done))
            if done % max(1, cfg.epochs // 10) == 0:
                log.info("epoch %d ot_cost %.5f penalty %.3g energy %.4f", done, row["ot_cost"], row["euler_penalty"], row["energy"])
    return partial_fit(cfg.epochs)


def _split_points(rng, data, first, second):
    idx = rng.permutation(len(data))
    a = data[idx[:first]]
    rest = idx[first:]
    b = data[rest[:second]] if len(rest) >= second else data[idx[:second]]
    return a, b


def _drop_guard_band(x, z):
    keep = np.all(np.abs(np.asarray(jsp.erf(z / SQRT2))) < 1.0 - EPS_CLIP, axis=1)
    if not keep.all():
        log.warning("dropping %d points whose base image is too far out for erf", int((~keep).sum()))
    return x[keep], z[keep]


def fit_gp_forward(base, data, config: FitConfig | None = None, callback=None) -> GpFit:
    """Fit ``s`` so that ``s o f`` moves data as little as possible; epochs pass over a fixed buffer."""
    cfg = replace(config or FitConfig(), mode="forward")
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] != base.dim:
        raise ValueError(f"data must have shape (n, {base.dim}), got {data.shape}")
    if not np.all(np.isfinite(data)):
        raise ValueError("training data contains non-finite values")
    rng = np.random.default_rng(cfg.seed)
    buf, mon = _split_points(rng, data, cfg.buffer_size, cfg.monitor_size)
    buf, zbuf = _drop_guard_band(buf, np.asarray(baseflow.forward(base, buf)[0]))
    mon, zmon = _drop_guard_band(mon, np.asarray(baseflow.forward(base, mon)[0]))
    orientation = cfg.orientation or base_orientation(base, buf[0])

    def next_buffer(epoch):
        order = rng.permutation(len(buf))
        return zbuf[order], buf[order]

    return _fit(base, cfg, next_buffer, (zmon, mon, mon), orientation, callback)


def fit_gp_backward(base, config: FitConfig | None = None, callback=None) -> GpFit:
    """Fit ``s`` so that ``g o s`` moves normal samples as little as possible; no data needed."""
    cfg = replace(config or FitConfig(), mode="backward")
    if not base.inverse_available:
        raise ValueError("backward fitting needs a base flow with an inverse")
    rng = np.random.default_rng(cfg.seed)
    d = base.dim
    zmon = truncated_normal(rng, cfg.monitor_size, d)
    xmon = np.asarray(baseflow.inverse(base, zmon))
    orientation = cfg.orientation or base_orientation(base, xmon[0])

    def next_buffer(epoch):
        z = truncated_normal(rng, cfg.buffer_size, d)
        return z, z

    return _fit(base, cfg, next_buffer, (zmon, zmon, xmon), orientation, callback)


def fit_gp(base, config: FitConfig, data=None, callback=None) -> GpFit:
    if config.mode == "backward":
        return fit_gp_backward(base, config, callback)
    if data is None:
        raise ValueError("forward fitting needs training data")
    return fit_gp_forward(base, data, config, callback)
