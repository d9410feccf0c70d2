"""Side-by-side transport reports for a base flow and the base flow composed with a GP flow.

Forward mode transports data to the normal law (``f`` vs ``s o f``); backward mode
transports normal draws to data space (``g`` vs ``g o s``). For each map ``T`` on the
evaluation sources ``x_i``:

* ``ot_cost`` is ``mean |x_i - T(x_i)|^2`` with its Monte-Carlo standard error;
* ``discrete_ot_cost`` is the exact assignment cost between ``{x_i}`` and ``{T(x_i)}``,
  a lower bound for ``ot_cost`` on those sets;
* ``agreement`` uses the base images as the common target set, so both maps are scored
  against the same optimal matching.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import jax.numpy as jnp
import numpy as np

from gpot import baseflow
from gpot.eulerreg import path_energy
from gpot.flowode import OdeMap, integrate_trajectory
from gpot.gaussmap import EPS_CLIP, SQRT2, GpFlow, erf_vec, gp_apply, gp_inverse
from gpot.graddesk import composed_nll, truncated_normal
from gpot.otlab import (
    TransportReport,
    displacement_cost,
    displacement_stderr,
    exact_discrete_ot,
    matching_agreement,
)


@dataclass
class Evaluation:
    base: TransportReport
    composed: TransportReport

    @property
    def relative_reduction(self) -> float:
        return (self.base.ot_cost - self.composed.ot_cost) / self.base.ot_cost

    @property
    def gap_closure(self) -> float:
        """Share of ``base ot_cost - base discrete_ot_cost`` removed by the GP flow."""
        gap = self.base.ot_cost - self.base.discrete_ot_cost
        return (self.base.ot_cost - self.composed.ot_cost) / gap if gap > 0 else math.nan

    def to_dict(self) -> dict:
        return {
            "base": self.base.to_dict(),
            "composed": self.composed.to_dict(),
            "relative_reduction": self.relative_reduction,
            "gap_closure": self.gap_closure,
        }


def inside_guard_band(z):
    """Rows of Gaussian-space ``z`` whose erf image stays strictly inside the clipping band."""
    return np.all(np.abs(np.asarray(erf_vec(np.asarray(z) / SQRT2))) < 1.0 - EPS_CLIP, axis=1)


def transport_maps(base, gp: GpFlow, mode: str):
    """``(T_base, T_composed)`` as batched numpy callables."""
    if mode == "forward":
        t_base = lambda x: np.asarray(baseflow.forward(base, x)[0])
        t_comp = lambda x: np.asarray(gp_apply(gp, t_base(x)))
    elif mode == "backward":
        t_base = lambda z: np.asarray(baseflow.inverse(base, z))
        t_comp = lambda z: t_base(np.asarray(gp_apply(gp, z)))
    else:
        raise ValueError(f"mode must be 'forward' or 'backward', got {mode!r}")
    return t_base, t_comp


def evaluate(base, gp: GpFlow, data, mode: str = "forward", n_eval: int = 2000, seed: int = 0) -> Evaluation:
    """Reports for ``base`` alone and ``base + gp`` on ``n_eval`` held-out points.

    ``data`` supplies the NLL points, and in forward mode also the transport sources.
    Points whose base image lies beyond the erf guard band are left out of both.
    """
    if gp.dim != base.dim:
        raise ValueError(f"dimension mismatch: base flow has d={base.dim}, GP flow has d={gp.dim}")
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] != base.dim:
        raise ValueError(f"data must have shape (n, {base.dim})")
    rng = np.random.default_rng(seed)
    if mode == "forward":
        src = data[rng.permutation(len(data))[:n_eval]]
        src = src[inside_guard_band(baseflow.forward(base, src)[0])]
        z_cube = np.asarray(baseflow.forward(base, src)[0])
    else:
        src = truncated_normal(rng, n_eval, base.dim)
        z_cube = src
    t_base, t_comp = transport_maps(base, gp, mode)
    targets = t_base(src)
    _, perm = exact_discrete_ot(src, targets)
    nll_pts = data[: max(n_eval, 1)]
    # a point whose base image is past the erf guard band has no finite GP log-density
    nll_pts = nll_pts[inside_guard_band(baseflow.forward(base, nll_pts)[0])]
    nll_base = baseflow.nll(base, nll_pts)
    nll_comp = composed_nll(base, gp, nll_pts, mode)
    u0 = np.array(erf_vec(z_cube / SQRT2))
    if gp.orientation == -1:
        u0[:, 0] *= -1
    if isinstance(gp.phi, OdeMap):
        energy = path_energy(gp.phi.field, u0, gp.phi.n_steps, gp.phi.t_final)
    else:
        energy = 0.0  # fixed rearrangements (permutations, identity) have no velocity field

    def report(t, nll_value, energy_value):
        images = t(src)
        return TransportReport(
            ot_cost=displacement_cost(lambda _: images, src),
            nll=float(nll_value),
            energy=float(energy_value),
            discrete_ot_cost=exact_discrete_ot(src, images)[0],
            agreement=matching_agreement(lambda _: images, src, targets, perm),
            sample_count=len(src),
            seed=seed,
            ot_cost_stderr=displacement_stderr(lambda _: images, src),
        )

    return Evaluation(report(t_base, nll_base, 0.0), report(t_comp, nll_comp, energy))


def roundtrip_error(gp: GpFlow, z) -> float:
    z = np.asarray(z, dtype=np.float64)
    back = np.asarray(gp_inverse(gp, gp_apply(gp, z)))
    return float(np.max(np.abs(back - z)))


def trajectories_for(base, gp: GpFlow, x, mode: str = "forward"):
    """Cube-space particle paths ``(n, N+1, d)`` for sources ``x`` (data in forward mode, normal draws otherwise)."""
    z = np.asarray(baseflow.forward(base, x)[0]) if mode == "forward" else np.asarray(x)
    z = z[inside_guard_band(z)]
    u0 = np.array(erf_vec(z / SQRT2))
    if gp.orientation == -1:
        u0[:, 0] *= -1
    return integrate_trajectory(gp.phi, jnp.asarray(u0))
