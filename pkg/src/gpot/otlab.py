"""Transport-cost metrology: empirical displacement cost, exact discrete OT, matching agreement."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

MAX_ASSIGNMENT = 4096


def _points(a, name):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2 or len(a) == 0:
        raise ValueError(f"{name} must be a non-empty (n, d) array")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    return a


def displacement_cost(transport, samples) -> float:
    """Mean squared displacement ``E |x - T(x)|^2`` over ``samples``."""
    x = _points(samples, "samples")
    tx = np.asarray(transport(x), dtype=np.float64).reshape(x.shape)
    return float(np.mean(np.sum((x - tx) ** 2, axis=1)))


def displacement_stderr(transport, samples) -> float:
    x = _points(samples, "samples")
    tx = np.asarray(transport(x), dtype=np.float64).reshape(x.shape)
    c = np.sum((x - tx) ** 2, axis=1)
    return float(np.std(c, ddof=1) / math.sqrt(len(c))) if len(c) > 1 else 0.0


def exact_discrete_ot(source, target) -> tuple[float, np.ndarray]:
    """Minimum of ``mean_i |x_i - y_perm[i]|^2`` over permutations, solved as an assignment problem."""
    x = _points(source, "source")
    y = _points(target, "target")
    if len(x) != len(y):
        raise ValueError(f"uniform-weight assignment needs equal counts, got {len(x)} and {len(y)}")
    if len(x) > MAX_ASSIGNMENT:
        raise ValueError(f"at most {MAX_ASSIGNMENT} points per side, got {len(x)}")
    cost = cdist(x, y, "sqeuclidean")
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(len(x), dtype=np.int64)
    perm[rows] = cols
    return float(cost[rows, cols].mean()), perm


def matching_agreement(transport, source, target, perm=None) -> float:
    """Fraction of ``i`` whose image ``T(x_i)`` has ``y_perm[i]`` as its nearest target point."""
    x = _points(source, "source")
    y = _points(target, "target")
    if perm is None:
        _, perm = exact_discrete_ot(x, y)
    tx = np.asarray(transport(x), dtype=np.float64).reshape(len(x), -1)
    dist, nearest = cKDTree(y).query(tx, k=2)
    # strict nearness: a tie with another target does not count as a win
    own = np.sum((tx - y[perm]) ** 2, axis=1)
    second = np.where(nearest[:, 0] == perm, dist[:, 1], dist[:, 0]) ** 2
    return float(np.mean(own < second))


@dataclass
class TransportReport:
    ot_cost: float
    nll: float
    energy: float
    discrete_ot_cost: float
    agreement: float
    sample_count: int
    seed: int
    ot_cost_stderr: float = float("nan")

    def __post_init__(self):
        if self.ot_cost < 0:
            raise ValueError("ot_cost must be non-negative")
        if not (0.0 <= self.agreement <= 1.0 or math.isnan(self.agreement)):
            raise ValueError("agreement must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TransportReport":
        names = {f.name for f in fields(cls)}
        missing = names - set(data) - {"ot_cost_stderr"}
        if missing:
            raise ValueError(f"report is missing fields {sorted(missing)}")
        extra = set(data) - names
        if extra:
            raise ValueError(f"unknown report fields {sorted(extra)}")
        return cls(**{k: (None if v is None else v) for k, v in data.items()})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TransportReport":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_json() + "\n")
        return path
