"""Rewrite the bundled suite seeds so every perturbed IEEE-30 case is operable.

    python scripts/pick_suite_seeds.py [--write]

A row keeps its nominal seed if the perturbed case has an AC-feasible point
(the DC-OPF dispatch or one of 40 seeded random dispatches passes the default
feasibility checks); otherwise the seed is bumped until one does.  Without a
feasible point the reference oracle has nothing to compare against and the row
could only report ``no_reference``.  Many single-line outages of the bundled
case fail this way: without line charging or shunts, bus voltages sag below
0.95 p.u. once a supporting line is gone.
"""
import argparse
import json

import numpy as np

from gridflow.dc_opf import solve_dcopf
from gridflow.environment import DEFAULT_FEASIBILITY_CHECKS
from gridflow.evaluation import bundled_suite_path, load_suite
from gridflow.grid_model import PERTURBATIONS, load_bundled
from gridflow.power_flow import check_feasibility, solve_pf

PROBES = 40
MAX_BUMP = 200


def operable(case) -> bool:
    lo = np.array([g.pmin for g in case.dispatchable])
    hi = np.array([g.pmax for g in case.dispatchable])
    tries = []
    dc = solve_dcopf(case, 20)
    if dc.status == "optimal":
        tries.append(dc.p[case.arrays.dispatchable])
    rng = np.random.default_rng(0)
    tries += list(lo + rng.random((PROBES, len(lo))) * (hi - lo))
    return any(check_feasibility(solve_pf(case, d), case, DEFAULT_FEASIBILITY_CHECKS).feasible for d in tries)


def pick(base, row) -> int:
    for seed in range(row["nominal_seed"], row["nominal_seed"] + MAX_BUMP):
        try:
            case = PERTURBATIONS[row["family"]](base, **row["params"], seed=seed)
        except RuntimeError:
            continue
        if operable(case):
            return seed
    # nothing operable: keep the nominal seed and let the row report no_reference
    print(f"{row['name']}: no operable seed in {MAX_BUMP} tries, keeping the nominal one")
    return row["nominal_seed"]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--write", action="store_true", help="update the bundled suite files in place")
    args = ap.parse_args()
    base = load_bundled("ieee30")
    for table, first in (("table1", 100), ("table2", 201), ("table3", 301)):
        rows = load_suite(bundled_suite_path(table))
        for i, row in enumerate(rows):
            # nominal seeds count up from the table's first seed in row order
            row["nominal_seed"] = first + i if table == "table1" else first + row["params"]["n"] - 1
            row["seed"] = pick(base, row)
            print(f"{table} {row['name']}: nominal {row.pop('nominal_seed')} -> {row['seed']}", flush=True)
        if args.write:
            bundled_suite_path(table).write_text(json.dumps(rows, indent=1) + "\n")


if __name__ == "__main__":
    main()
