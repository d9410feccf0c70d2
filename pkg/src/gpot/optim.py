"""Adam on arbitrary JAX pytrees."""
from __future__ import annotations

from dataclasses import dataclass

import jax
import jax.numpy as jnp

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@jax.tree_util.register_dataclass
@dataclass(frozen=True)
class AdamState:
    m: object
    v: object
    step: jax.Array


def adam_init(params) -> AdamState:
    zeros = jax.tree_util.tree_map(jnp.zeros_like, params)
    return AdamState(zeros, zeros, jnp.zeros((), jnp.int32))


def adam_step(params, grads, state: AdamState, lr, b1=BETA1, b2=BETA2, eps=EPS):
    """One bias-corrected Adam update; returns ``(params, state)``."""
    step = state.step + 1
    m = jax.tree_util.tree_map(lambda m, g: b1 * m + (1 - b1) * g, state.m, grads)
    v = jax.tree_util.tree_map(lambda v, g: b2 * v + (1 - b2) * g * g, state.v, grads)
    c1 = 1 - b1 ** step.astype(jnp.float64)
    c2 = 1 - b2 ** step.astype(jnp.float64)
    params = jax.tree_util.tree_map(lambda p, m, v: p - lr * (m / c1) / (jnp.sqrt(v / c2) + eps), params, m, v)
    return params, AdamState(m, v, step)
