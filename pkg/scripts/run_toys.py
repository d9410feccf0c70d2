"""Run the 2D toy experiments and write checkpoints, curves and summaries.

    python scripts/run_toys.py --out runs/toys            # all runs
    python scripts/run_toys.py --only two_moons_euler     # a single run
"""
import argparse
import json
import logging

from gpot.experiments import TOY_RUNS as RUNS, matched_energy_ratio, run_toy, save_result



def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--out", default="runs/toys")
    parser.add_argument("--only", action="append", choices=sorted(RUNS))
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")
    results = {}
    for name in args.only or RUNS:
        results[name] = run_toy(RUNS[name])
        path = save_result(results[name], f"{args.out}/{name}")
        ev = results[name].evaluation
        print(f"{name}: ot_cost {ev.base.ot_cost:.4f} -> {ev.composed.ot_cost:.4f}, "
              f"agreement {ev.base.agreement:.3f} -> {ev.composed.agreement:.3f}, "
              f"energy {ev.composed.energy:.4f}, gap closure {ev.gap_closure:.3f} ({path})")
    if {"two_moons", "two_moons_euler"} <= results.keys():
        ratio, mismatch = matched_energy_ratio(results["two_moons"], results["two_moons_euler"])
        print(json.dumps({"energy_ratio": ratio, "ot_cost_mismatch": mismatch}))


if __name__ == "__main__":
    main()
