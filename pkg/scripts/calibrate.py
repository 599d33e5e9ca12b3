"""Sweep ABM parameters and report the cancer trends over the six scenarios.

Usage:
    python3 scripts/calibrate.py --replications 5 \
        --set cancer_division_prob=0.2,0.3 --set division_age=5,10

Every combination of the ``--set`` values is run on the scenario grid. For
each one the script prints the final mean cancer density per scenario and
whether the orderings used by the acceptance suite hold: C(20) > 0.5,
decreasing in the immune fraction at each competition value, and decreasing
in the competition value at the largest immune fraction.
"""

from __future__ import annotations

import argparse
import itertools
import time
from dataclasses import fields, replace

from tumorsurrogate.abm import AbmParams, run_ensemble
from tumorsurrogate.pipeline import ExperimentPlan


def parse_set(text: str) -> tuple[str, list]:
    name, _, values = text.partition("=")
    types = {f.name: f.type for f in fields(AbmParams)}
    if name not in types:
        raise argparse.ArgumentTypeError(f"unknown parameter {name!r}")
    cast = int if types[name] in (int, "int") else float
    return name, [cast(v) for v in values.split(",")]


def finals(plan: ExperimentPlan, workers: int) -> dict[tuple[float, float], float]:
    out = {}
    for (i0, ci), sc in zip(plan.grid_points(), plan.scenarios()):
        out[(i0, ci)] = float(run_ensemble(sc, workers=workers).values[-1, 0])
    return out


def orderings(plan: ExperimentPlan, c: dict) -> dict[str, bool]:
    fracs = sorted(plan.immune_fractions)
    comps = sorted(plan.immune_competitions)
    checks = {"C(20)>0.5": all(v > 0.5 for v in c.values())}
    for ci in comps:
        vals = [c[(i0, ci)] for i0 in fracs]
        checks[f"dec I0 @C_I={ci:g}"] = all(a > b for a, b in zip(vals, vals[1:]))
    vals = [c[(fracs[-1], ci)] for ci in comps]
    checks[f"dec C_I @I0={fracs[-1]:g}"] = all(a > b for a, b in zip(vals, vals[1:]))
    return checks


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--set", dest="sets", action="append", type=parse_set, default=[],
                    help="name=v1,v2,... (repeatable)")
    ap.add_argument("--replications", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args(argv)

    names = [n for n, _ in args.sets]
    for combo in itertools.product(*(v for _, v in args.sets)):
        params = replace(AbmParams(), **dict(zip(names, combo)))
        plan = ExperimentPlan(params=params, replications=args.replications, master_seed=args.seed)
        t0 = time.perf_counter()
        c = finals(plan, args.workers)
        label = ", ".join(f"{n}={v}" for n, v in zip(names, combo)) or "defaults"
        print(f"{label}  ({time.perf_counter() - t0:.0f}s)")
        for (i0, ci), v in c.items():
            print(f"  I0={i0:<5g} C_I={ci:<5g} C(20)={v:.3f}")
        print("  " + "  ".join(f"{k}: {'ok' if ok else 'NO'}" for k, ok in orderings(plan, c).items()))


if __name__ == "__main__":
    main()
