"""Desk-scale IEEE-30 run: train 150 episodes at T=60, score two suite rows.

    python scripts/scaled_check.py --out runs/scaled [--seed 0] [--random-control]

--random-control also scores the untrained (uniform) policy on the same rows,
which shows how much of the result comes from best-of-100 search alone.
"""
import argparse
import time
from pathlib import Path

from gridflow.evaluation import bundled_suite_path, load_suite, reports_to_csv, run_suite
from gridflow.gnn import GnnConfig, init_params
from gridflow.grid_model import load_bundled
from gridflow.ppo import PpoConfig, train

ROWS = (("table1", "load_inf0.1_sup0.1"), ("table3", "edge_1"))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--episodes", type=int, default=150)
    ap.add_argument("--horizon", type=int, default=60)
    ap.add_argument("--random-control", action="store_true")
    args = ap.parse_args()

    out = Path(args.out)
    case = load_bundled("ieee30")
    suite = []
    for table, name in ROWS:
        suite += [r for r in load_suite(bundled_suite_path(table)) if r["name"] == name]

    t0 = time.perf_counter()
    res = train(case, PpoConfig(episodes=args.episodes, horizon=args.horizon, seed=args.seed), out_dir=out,
                progress=lambda row: print(f"ep {row['episode']:4d} reward {row['mean_reward']:+.4f} "
                                           f"cost {row['final_cost']:.2f}", flush=True)
                if row["episode"] % 10 == 0 else None)
    print(f"trained in {time.perf_counter() - t0:.0f}s")
    params = res.best_params or res.params
    text = reports_to_csv(run_suite(params, case, suite, seed=args.seed, rollouts=100, T=125))
    (out / "scaled_report.csv").write_text(text)
    print(text)
    if args.random_control:
        text = reports_to_csv(run_suite(init_params(GnnConfig(), args.seed), case, suite, seed=args.seed,
                                        rollouts=100, T=125))
        (out / "random_control.csv").write_text(text)
        print("untrained policy:\n" + text)
    print(f"total {time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
