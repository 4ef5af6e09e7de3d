"""Run every workload of a scenario under every strategy and print the tables.

    python scripts/run_bench.py [scenarios/bench.yaml] [--seed N]
"""

import argparse
from pathlib import Path

from vmimon import Scenario, Strategy, compare_strategies

ROOT = Path(__file__).resolve().parent.parent


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("scenario", nargs="?", default=str(ROOT / "scenarios" / "bench.yaml"))
    ap.add_argument("--seed", type=int)
    args = ap.parse_args()
    scn = Scenario.load(args.scenario)
    for name in scn.workloads:
        print(compare_strategies(scn, name, list(Strategy), args.seed).table())


if __name__ == "__main__":
    main()
