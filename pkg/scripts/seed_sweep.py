"""How sensitive the file-IO overheads are to the scenario seed.

The seed picks which files the warm-up caches, and so how many watched dentries
end up sharing default slab pages with workload files.

    python scripts/seed_sweep.py --seeds 2024 1 2 3 [--sample watched=25 other=450]
"""

import argparse
import dataclasses
from pathlib import Path

from vmimon import Scenario, Strategy, compare_strategies

ROOT = Path(__file__).resolve().parent.parent


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scenario", default=str(ROOT / "scenarios" / "bench.yaml"))
    ap.add_argument("--seeds", type=int, nargs="+", default=[2024, 1, 2, 3])
    ap.add_argument("--sample", nargs="*", default=[], metavar="FILESET=N", help="override warm-up sample sizes")
    args = ap.parse_args()
    scn = Scenario.load(args.scenario)
    if args.sample:
        sample = dict(scn.warmup.sample)
        for item in args.sample:
            k, _, v = item.partition("=")
            sample[k] = int(v)
        scn = dataclasses.replace(scn, warmup=dataclasses.replace(scn.warmup, sample=sample))
    strategies = [Strategy.INTERCEPT, Strategy.SHARED, Strategy.ISOLATED]
    print(f"{'seed':>6}" + "".join(f"{s.label:>22}" for s in strategies) + f"{'false traps':>13}")
    for seed in args.seeds:
        rep = compare_strategies(scn, "fileio", strategies, seed)
        cells = "".join(f"{rep.row(s).overhead_pct:>21.3f}%" for s in strategies)
        print(f"{seed:>6}{cells}{rep.row(Strategy.SHARED).false_traps:>13}")


if __name__ == "__main__":
    main()
