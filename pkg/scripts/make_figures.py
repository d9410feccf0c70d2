"""Render OT-colored matchings, trajectory fans and curves for every run under a directory.

    python scripts/make_figures.py runs/toys
"""
import argparse
import json
from pathlib import Path

from gpot import baseflow, graddesk, plotting, toydata
from gpot.evaluate import inside_guard_band, trajectories_for, transport_maps
from gpot.gaussmap import load_gp


def render(run_dir: Path, n: int):
    summary = json.loads((run_dir / "summary.json").read_text())
    spec = summary["run"]
    base = baseflow.load_flow(run_dir / "base_flow.ckpt")
    gp = load_gp(run_dir / "gp_flow.ckpt")
    x = toydata.sample(toydata.DatasetSpec(spec["dataset"], n, spec["seed"] + 1))
    t_base, t_comp = transport_maps(base, gp, "forward")
    x = x[inside_guard_band(t_base(x))]
    out = run_dir / "plots"
    plotting.plot_matching(x, t_base(x), out / "matching_base.svg", "base flow")
    plotting.plot_matching(x, t_comp(x), out / "matching_gp.svg", "base flow + GP")
    plotting.plot_trajectories(trajectories_for(base, gp, x[:200]).states, out / "trajectories.svg")
    plotting.plot_curves(graddesk.read_curve(run_dir / "gp_curve.csv"), out / "curves.svg")
    return out


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("root", type=Path)
    parser.add_argument("--n", type=int, default=1000, help="points per scatter plot")
    args = parser.parse_args()
    for summary in sorted(args.root.glob("*/summary.json")):
        print(render(summary.parent, args.n))


if __name__ == "__main__":
    main()
