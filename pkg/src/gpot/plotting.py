"""Static figures: OT-colored scatter, trajectory fan, training curves.

SVG output is byte-for-byte reproducible: the hash salt is pinned and the date
metadata is dropped.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from gpot.otlab import exact_discrete_ot  # noqa: E402

_RC = {"svg.hashsalt": "gpot", "svg.fonttype": "none", "path.simplify": False}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fmt = path.suffix.lstrip(".") or "svg"
    meta = {"Date": None} if fmt == "svg" else {}
    fig.savefig(path, format=fmt, metadata=meta)
    plt.close(fig)
    return path


def matching_hues(source, target):
    """Hue in [0, 1) for each source point: the angle of its exact-OT partner in ``target``."""
    _, perm = exact_discrete_ot(source, target)
    partner = np.asarray(target)[perm]
    angle = np.arctan2(partner[:, 1], partner[:, 0])
    return (angle / (2 * np.pi)) % 1.0, perm


def plot_matching(source, images, path, title="") -> Path:
    """Source points colored by the angle of their OT partner among the map's images, next to the images."""
    source = np.asarray(source)
    images = np.asarray(images)
    hues, perm = matching_hues(source, images)
    with plt.rc_context(_RC):
        fig, axes = plt.subplots(1, 2, figsize=(8, 4))
        cmap = plt.get_cmap("hsv")
        axes[0].scatter(source[:, 0], source[:, 1], c=cmap(hues), s=3, linewidths=0)
        axes[0].set_title("source, colored by OT partner")
        img_hue = np.empty_like(hues)
        img_hue[perm] = hues
        axes[1].scatter(images[:, 0], images[:, 1], c=cmap(img_hue), s=3, linewidths=0)
        axes[1].set_title("images")
        for ax in axes:
            ax.set_aspect("equal")
        if title:
            fig.suptitle(title)
        return _save(fig, path)


def plot_trajectories(states, path, max_paths: int = 200) -> Path:
    """Particle paths ``(n, N+1, 2)`` in the cube, start marked with dots."""
    states = np.asarray(states)[:max_paths]
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5, 5))
        for path_xy in states:
            ax.plot(path_xy[:, 0], path_xy[:, 1], lw=0.6, color="tab:blue", alpha=0.6)
        ax.scatter(states[:, 0, 0], states[:, 0, 1], s=2, color="black")
        ax.set_xlim(-1, 1)
        ax.set_ylim(-1, 1)
        ax.set_aspect("equal")
        ax.set_title("trajectories")
        return _save(fig, path)


def plot_curves(rows, path) -> Path:
    epochs = np.array([r["epoch"] for r in rows], dtype=float)
    keys = [k for k in ("ot_cost", "nll", "euler_penalty", "energy") if np.any(np.isfinite([r[k] for r in rows]))]
    with plt.rc_context(_RC):
        fig, axes = plt.subplots(1, len(keys), figsize=(3.2 * len(keys), 3), squeeze=False)
        for ax, k in zip(axes[0], keys):
            ax.plot(epochs, [r[k] for r in rows], lw=1.0)
            ax.set_xlabel("epoch")
            ax.set_title(k)
        fig.tight_layout()
        return _save(fig, path)
