"""End-to-end toy runs shared by ``scripts/`` and the acceptance suite.

A run trains a coupling base flow on a toy dataset, fits a GP flow on top of it
in forward mode, and evaluates both on held-out samples.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from gpot import baseflow, graddesk, toydata
from gpot.eulerreg import EulerPenaltyConfig
from gpot.evaluate import Evaluation, evaluate
from gpot.gaussmap import save_gp

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ToyRun:
    dataset: str
    gp_epochs: int = 2000
    gp_lr: float = 1e-2
    lambda0: float = 0.0
    n_decays: int = 5
    n_train: int = 12000
    n_test: int = 4000
    base_layers: int = 8
    base_epochs: int = 60
    n_eval: int = 2000
    seed: int = 0

    def fit_config(self) -> graddesk.FitConfig:
        euler = EulerPenaltyConfig(
            lambda0=self.lambda0,
            decay_period=max(1, self.gp_epochs // self.n_decays),
            n_decays=self.n_decays,
        )
        return graddesk.FitConfig(
            epochs=self.gp_epochs,
            lr=self.gp_lr,
            euler=euler,
            seed=self.seed,
            monitor_every=max(1, self.gp_epochs // 40),
        )


@dataclass
class ToyResult:
    run: ToyRun
    base: baseflow.BaseFlow
    fit: graddesk.GpFit
    evaluation: Evaluation
    base_seconds: float = 0.0
    extra: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "run": asdict(self.run),
            "evaluation": self.evaluation.to_dict(),
            "gp_seconds": self.fit.seconds,
            "base_seconds": self.base_seconds,
            "euler_evaluations": self.fit.euler_evaluations,
            "final_curve_row": self.fit.curve[-1],
        }


# GP settings per dataset: epochs, lr, Euler weight halved ``n_decays`` times over the run.
# Two moons also has an unregularized twin for the path-energy comparison.
TOY_RUNS = {
    "eight_gaussians": ToyRun("eight_gaussians", gp_epochs=2000, gp_lr=1e-2, lambda0=5e-4, n_decays=5),
    "two_moons": ToyRun("two_moons", gp_epochs=1000, gp_lr=2e-3),
    "two_moons_euler": ToyRun("two_moons", gp_epochs=1000, gp_lr=2e-3, lambda0=5e-4, n_decays=5),
    "pinwheel_euler": ToyRun("pinwheel", gp_epochs=800, gp_lr=2e-3, lambda0=5e-4, n_decays=4),
}


def train_base(run: ToyRun, train) -> tuple[baseflow.BaseFlow, float]:
    t0 = time.perf_counter()
    flow = baseflow.coupling_flow(2, n_layers=run.base_layers, hidden=64, seed=run.seed)
    cfg = baseflow.NfTrainConfig(epochs=run.base_epochs, batch_size=500, seed=run.seed)
    return baseflow.train_nf(flow, train, cfg).flow, time.perf_counter() - t0


def run_toy(run: ToyRun, base: baseflow.BaseFlow | None = None) -> ToyResult:
    """Train (or reuse) the base flow, fit the GP flow, evaluate on the test split."""
    train = toydata.sample(toydata.DatasetSpec(run.dataset, run.n_train, run.seed))
    test = toydata.sample(toydata.DatasetSpec(run.dataset, run.n_test, run.seed + 1))
    seconds = 0.0
    if base is None:
        base, seconds = train_base(run, train)
    log.info("%s: base flow ready, fitting GP for %d epochs (lambda0 %g)", run.dataset, run.gp_epochs, run.lambda0)
    fit = graddesk.fit_gp_forward(base, train, run.fit_config())
    result = evaluate(base, fit.gp, test, "forward", run.n_eval, run.seed)
    return ToyResult(run, base, fit, result, seconds)


def save_result(result: ToyResult, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    baseflow.save_flow(directory / "base_flow.ckpt", result.base)
    save_gp(directory / "gp_flow.ckpt", result.fit.gp)
    result.fit.write_curve(directory / "gp_curve.csv")
    path = directory / "summary.json"
    path.write_text(json.dumps(result.summary(), indent=2, sort_keys=True, default=float) + "\n")
    return path


def matched_energy_ratio(plain: ToyResult, regularized: ToyResult) -> tuple[float, float]:
    """``(E_reg / E_plain, |C_reg - C_plain| / C_plain)`` from the held-out composed reports."""
    e0, e1 = plain.evaluation.composed.energy, regularized.evaluation.composed.energy
    c0, c1 = plain.evaluation.composed.ot_cost, regularized.evaluation.composed.ot_cost
    return e1 / e0, abs(c1 - c0) / c0
