"""Test-time methods (none, tent, plclf, t3a, tpd) from one GRT checkpoint per seed.

    python3 scripts/run_comparison.py --seeds 5 --out results
"""

import argparse
import logging

from gtta.config import ExperimentConfig, load_config
from gtta.harness import run_comparison, write_report
from gtta.synthdata import default_benchmark


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="TOML config")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", default="results")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = load_config(args.config) if args.config else ExperimentConfig()
    grid = run_comparison(default_benchmark(args.seed), range(args.seed, args.seed + args.seeds), cfg,
                          jobs=args.jobs)
    write_report(grid, args.out)
    for method in grid.rows:
        wins = sum(all(grid.avg_acc(method, s) > grid.avg_acc(m, s) for m in grid.rows if m != method)
                   for s in grid.seeds)
        print(f"{method:6s} mean {grid.mean_avg_acc(method):6.2f}  best in {wins}/{len(grid.seeds)} seeds")


if __name__ == "__main__":
    main()
