"""Seeded generators for the 2D toy densities (eight Gaussians, two moons, pinwheel).

Constants follow the widely used ``toy_data.py`` script from the FFJORD code base,
except the pinwheel tangential spread which is fixed at 0.05.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

NAMES = ("eight_gaussians", "two_moons", "pinwheel")


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    n: int
    seed: int = 0


def _eight_gaussians(rng, n):
    scale = 4.0
    k = rng.integers(0, 8, size=n)
    angles = k * np.pi / 4
    centers = scale * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    pts = centers + 0.5 * rng.standard_normal((n, 2))
    return pts / 1.414


def _two_moons(rng, n, noise=0.1):
    n_out = n // 2
    n_in = n - n_out
    t_out = np.linspace(0, np.pi, n_out)
    t_in = np.linspace(0, np.pi, n_in)
    outer = np.stack([np.cos(t_out), np.sin(t_out)], axis=1)
    inner = np.stack([1 - np.cos(t_in), 1 - np.sin(t_in) - 0.5], axis=1)
    pts = np.concatenate([outer, inner]) + noise * rng.standard_normal((n, 2))
    pts = pts[rng.permutation(n)]
    return 2 * pts + np.array([-1.0, -0.2])


def _pinwheel(rng, n, radial_std=0.3, tangential_std=0.05, num_classes=5, rate=0.25):
    rads = np.linspace(0, 2 * np.pi, num_classes, endpoint=False)
    feats = rng.standard_normal((n, 2)) * np.array([radial_std, tangential_std])
    feats[:, 0] += 1.0
    labels = np.arange(n) % num_classes
    angles = rads[labels] + rate * np.exp(feats[:, 0])
    c, s = np.cos(angles), np.sin(angles)
    rot = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)
    pts = np.einsum("ti,tij->tj", feats, rot)
    return 2 * pts[rng.permutation(n)]


_GENERATORS = {
    "eight_gaussians": _eight_gaussians,
    "two_moons": _two_moons,
    "pinwheel": _pinwheel,
}


def sample(spec: DatasetSpec) -> np.ndarray:
    """Draw ``spec.n`` points as an ``(n, 2)`` float64 array; pure in (name, n, seed)."""
    if spec.name not in _GENERATORS:
        raise ValueError(f"unknown dataset {spec.name!r}; expected one of {NAMES}")
    if spec.n <= 0:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(spec.seed)
    return np.asarray(_GENERATORS[spec.name](rng, spec.n), dtype=np.float64)


def export_csv(points, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i + 1}" for i in range(points.shape[1])])
        w.writerows(np.asarray(points).tolist())
    return path
