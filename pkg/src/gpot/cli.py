"""Command-line entry point: ``gpot {train-nf, fit-gp, eval, plot, export-traj}``.

Every command works on a run directory holding ``config.json`` and ``manifest.json``;
the manifest records seeds and sha256 digests of everything the run produced.
Exit codes: 0 ok, 2 configuration error, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from gpot import baseflow, config as cfgmod, evaluate, graddesk, plotting, toydata
from gpot.config import ConfigError, RunConfig
from gpot.flowode import IntegrationEscape, export_trajectories_csv, read_trajectories_csv
from gpot.gaussmap import DomainError, load_gp, save_gp
from gpot.io import file_digest

log = logging.getLogger("gpot")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3

BASE_CKPT = "base_flow.ckpt"
GP_CKPT = "gp_flow.ckpt"
GP_PARTIAL = "gp_flow.partial.ckpt"
NF_CURVE = "nf_curve.csv"
GP_CURVE = "gp_curve.csv"
REPORT = "report.json"
SAMPLES = "samples.csv"
TRAJ = "trajectories.csv"


# -- run directory bookkeeping -----------------------------------------------


def resolve_config(args) -> tuple[RunConfig, Path]:
    run = Path(args.run) if args.run else None
    if args.config:
        cfg = cfgmod.load(args.config)
    elif run is not None and (run / "config.json").exists():
        cfg = cfgmod.load(run / "config.json")
    else:
        cfg = RunConfig()
    cfg = cfgmod.apply_overrides(cfg, args.set)
    if run is not None:
        cfg = cfgmod.with_output(cfg, run)
    return cfg, Path(cfg.output_dir)


def update_manifest(run: Path, cfg: RunConfig, command: str) -> Path:
    path = run / "manifest.json"
    manifest = json.loads(path.read_text()) if path.exists() else {"commands": []}
    manifest["schema_version"] = cfgmod.SCHEMA_VERSION
    manifest["config_sha256"] = file_digest(run / "config.json")
    manifest["seeds"] = {
        "data": cfg.data.seed,
        "base": cfg.base.seed,
        "optim": cfg.optim.seed,
        "eval": cfg.eval.seed,
    }
    manifest["files"] = {
        p.name: file_digest(p)
        for p in sorted(run.iterdir())
        if p.is_file() and p.name not in ("manifest.json",) and p.suffix in (".ckpt", ".csv", ".json")
    }
    manifest["commands"].append(command)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def datasets(cfg: RunConfig):
    train = toydata.sample(toydata.DatasetSpec(cfg.data.name, cfg.data.n_train, cfg.data.seed))
    test = toydata.sample(toydata.DatasetSpec(cfg.data.name, cfg.data.n_test, cfg.data.seed + 1))
    return train, test


def build_base(cfg: RunConfig, dim: int):
    b = cfg.base
    if b.kind == "coupling":
        return baseflow.coupling_flow(dim, b.n_layers, b.hidden, b.seed)
    if b.kind == "synthetic":
        return baseflow.synthetic_flow(dim, b.n_layers, b.seed, b.inverse_available)
    return baseflow.identity_flow(dim)


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise ConfigError(f"{what} {path} does not exist")
    return path


# -- commands ----------------------------------------------------------------


def cmd_train_nf(cfg: RunConfig, run: Path) -> int:
    train, _ = datasets(cfg)
    flow = build_base(cfg, train.shape[1])
    train_curve, held_curve = [], []
    if cfg.base.kind == "coupling" and cfg.base.epochs > 0:
        nf_cfg = baseflow.NfTrainConfig(cfg.base.epochs, cfg.base.batch_size, cfg.base.lr, cfg.base.seed)
        result = baseflow.train_nf(flow, train, nf_cfg)
        flow, train_curve, held_curve = result.flow, result.train_nll, result.heldout_nll
    run.mkdir(parents=True, exist_ok=True)
    cfg.save(run / "config.json")
    baseflow.save_flow(run / BASE_CKPT, flow, {"base_kind": cfg.base.kind})
    with open(run / NF_CURVE, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_nll", "heldout_nll"])
        for k, tr in enumerate(train_curve):
            w.writerow([k + 1, repr(tr), repr(held_curve[k]) if k < len(held_curve) else "nan"])
    toydata.export_csv(train, run / "dataset.csv")
    update_manifest(run, cfg, "train-nf")
    print(f"wrote {run / BASE_CKPT} and {run / NF_CURVE}")
    return EXIT_OK


def cmd_fit_gp(cfg: RunConfig, run: Path, nf_path=None) -> int:
    base = baseflow.load_flow(_require(Path(nf_path) if nf_path else run / BASE_CKPT, "base flow checkpoint"))
    if cfg.gp.mode == "backward" and not base.inverse_available:
        raise ConfigError("backward mode refused: the base flow has no inverse")
    fit_cfg = cfgmod.fit_config(cfg)
    train, _ = datasets(cfg)
    if train.shape[1] != base.dim:
        raise ConfigError(f"dataset dimension {train.shape[1]} does not match base flow dimension {base.dim}")
    run.mkdir(parents=True, exist_ok=True)
    cfg.save(run / "config.json")
    every = cfg.optim.checkpoint_every

    def checkpoint(row, gp):
        if every and row["epoch"] and row["epoch"] % every == 0:
            save_gp(run / f"gp_flow.epoch{row['epoch']:05d}.ckpt", gp, {"epoch": row["epoch"], "mode": cfg.gp.mode})

    started = time.perf_counter()
    try:
        fit = graddesk.fit_gp(base, fit_cfg, data=train, callback=checkpoint)
    except graddesk.FitAborted as exc:
        part = exc.partial
        save_gp(run / GP_PARTIAL, part.gp, {"mode": cfg.gp.mode, "epoch": part.epochs_completed, "aborted": str(exc)})
        graddesk.write_curve(part.curve, run / GP_CURVE)
        _write_summary(run, part, time.perf_counter() - started, aborted=str(exc))
        update_manifest(run, cfg, "fit-gp (aborted)")
        raise
    save_gp(run / GP_CKPT, fit.gp, {"mode": cfg.gp.mode, "epoch": fit.epochs_completed})
    fit.write_curve(run / GP_CURVE)
    _write_summary(run, fit, time.perf_counter() - started)
    update_manifest(run, cfg, "fit-gp")
    first, last = fit.curve[0], fit.curve[-1]
    print(f"ot_cost {first['ot_cost']:.5f} -> {last['ot_cost']:.5f}; euler evaluations {fit.euler_evaluations}")
    return EXIT_OK


def _write_summary(run: Path, fit, seconds: float, aborted: str | None = None):
    summary = {
        "mode": fit.mode,
        "epochs_completed": fit.epochs_completed,
        "euler_evaluations": fit.euler_evaluations,
        "seconds": seconds,
        "aborted": aborted,
    }
    (run / "fit_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def cmd_eval(cfg: RunConfig, run: Path, base_path=None, gp_path=None) -> int:
    base = baseflow.load_flow(_require(Path(base_path) if base_path else run / BASE_CKPT, "base flow checkpoint"))
    gp = load_gp(_require(Path(gp_path) if gp_path else run / GP_CKPT, "GP flow checkpoint"))
    if gp.dim != base.dim:
        raise ConfigError(f"dimension mismatch: base flow d={base.dim}, GP flow d={gp.dim}")
    _, test = datasets(cfg)
    result = evaluate.evaluate(base, gp, test, cfg.gp.mode, cfg.eval.n_eval, cfg.eval.seed)
    run.mkdir(parents=True, exist_ok=True)
    if not (run / "config.json").exists():
        cfg.save(run / "config.json")
    report = dict(result.to_dict(), mode=cfg.gp.mode)
    (run / REPORT).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    _write_samples(run / SAMPLES, base, gp, test, cfg)
    update_manifest(run, cfg, "eval")
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


def _write_samples(path: Path, base, gp, test, cfg: RunConfig):
    rng = np.random.default_rng(cfg.eval.seed)
    if cfg.gp.mode == "forward":
        src = test[rng.permutation(len(test))[: cfg.eval.n_eval]]
    else:
        src = graddesk.truncated_normal(rng, cfg.eval.n_eval, base.dim)
    t_base, t_comp = evaluate.transport_maps(base, gp, cfg.gp.mode)
    if cfg.gp.mode == "forward":
        src = src[evaluate.inside_guard_band(t_base(src))]
    cols = np.hstack([src, t_base(src), t_comp(src)])
    d = src.shape[1]
    header = [f"x{i + 1}" for i in range(d)] + [f"base{i + 1}" for i in range(d)] + [f"gp{i + 1}" for i in range(d)]
    np.savetxt(path, cols, delimiter=",", header=",".join(header), comments="", fmt="%.17g")


def cmd_export_traj(cfg: RunConfig, run: Path, n=None) -> int:
    base = baseflow.load_flow(_require(run / BASE_CKPT, "base flow checkpoint"))
    gp = load_gp(_require(run / GP_CKPT, "GP flow checkpoint"))
    n = n or cfg.eval.n_trajectories
    rng = np.random.default_rng(cfg.eval.seed)
    if cfg.gp.mode == "forward":
        _, test = datasets(cfg)
        src = test[rng.permutation(len(test))[:n]]
    else:
        src = graddesk.truncated_normal(rng, n, base.dim)
    traj = evaluate.trajectories_for(base, gp, src, cfg.gp.mode)
    export_trajectories_csv(traj, run / TRAJ)
    update_manifest(run, cfg, "export-traj")
    print(f"wrote {len(traj.states)} trajectories to {run / TRAJ}")
    return EXIT_OK


def cmd_plot(run: Path) -> int:
    missing = [name for name in (GP_CURVE, SAMPLES, TRAJ) if not (run / name).exists()]
    if GP_CURVE in missing:
        raise ConfigError(f"missing exports in {run}: {', '.join(missing)}")
    if missing:
        log.warning("missing exports in %s: %s; skipping the matching plots", run, ", ".join(missing))
    out = run / "plots"
    written = [plotting.plot_curves(graddesk.read_curve(run / GP_CURVE), out / "curves.svg")]
    traj_empty = (run / TRAJ).exists() and read_trajectories_csv(run / TRAJ).states.size == 0
    if traj_empty:
        log.warning("trajectory file %s is empty; writing curve plots only", run / TRAJ)
    elif not missing:
        samples = np.loadtxt(run / SAMPLES, delimiter=",", skiprows=1, ndmin=2)
        d = samples.shape[1] // 3
        src, base_img, gp_img = samples[:, :d], samples[:, d : 2 * d], samples[:, 2 * d :]
        if d == 2:
            written.append(plotting.plot_matching(src, base_img, out / "matching_base.svg", "base flow"))
            written.append(plotting.plot_matching(src, gp_img, out / "matching_gp.svg", "base flow + GP"))
            written.append(plotting.plot_trajectories(read_trajectories_csv(run / TRAJ).states, out / "trajectories.svg"))
        else:
            log.warning("scatter and trajectory plots need d = 2; got d = %d", d)
    for p in written:
        print(p)
    return EXIT_OK


# -- argument parsing --------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gpot", description="Gaussian-preserving flows for optimal transport.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--run", help="run directory (overrides output_dir)")
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override, e.g. optim.lr=0.002")
        return p

    common(sub.add_parser("train-nf", help="train (or build) the base flow"))
    p = common(sub.add_parser("fit-gp", help="fit a GP flow on top of the base flow"))
    p.add_argument("--nf", help="base flow checkpoint (default: RUN/base_flow.ckpt)")
    p = common(sub.add_parser("eval", help="write a transport report"))
    p.add_argument("--base", help="base flow checkpoint")
    p.add_argument("--gp", help="GP flow checkpoint")
    p.add_argument("--n-eval", type=int)
    p.add_argument("--seed", type=int)
    p = sub.add_parser("plot", help="render SVG figures from a run directory")
    p.add_argument("--run", required=True)
    p = common(sub.add_parser("export-traj", help="export particle trajectories as CSV"))
    p.add_argument("--n", type=int, help="number of particles")
    return parser


def run_command(args) -> int:
    if args.command == "plot":
        return cmd_plot(Path(args.run))
    cfg, run = resolve_config(args)
    if args.command == "train-nf":
        return cmd_train_nf(cfg, run)
    if args.command == "fit-gp":
        return cmd_fit_gp(cfg, run, args.nf)
    if args.command == "eval":
        overrides = []
        if args.n_eval is not None:
            overrides.append(f"eval.n_eval={args.n_eval}")
        if args.seed is not None:
            overrides.append(f"eval.seed={args.seed}")
        cfg = cfgmod.apply_overrides(cfg, overrides)
        return cmd_eval(cfg, run, args.base, args.gp)
    return cmd_export_traj(cfg, run, args.n)


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return run_command(args)
    except (graddesk.FitAborted, IntegrationEscape, DomainError, baseflow.NumericalAbort, graddesk.NumericalAbort) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
