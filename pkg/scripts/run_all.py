"""Run every experiment and print a one-line verdict for each.

    python scripts/run_all.py --out results [--config cfg.json]
"""

import argparse
import sys
import time
from pathlib import Path

from homoscale.config import Config
from homoscale.experiments import run_experiment
from homoscale.pipeline import EXPERIMENTS


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results")
    ap.add_argument("--config", default=None)
    ap.add_argument("--only", nargs="*", choices=EXPERIMENTS, default=None)
    args = ap.parse_args(argv)
    config = Config.load(args.config)
    worst = 0
    for name in args.only or EXPERIMENTS:
        t0 = time.perf_counter()
        rep = run_experiment(name, config, Path(args.out) / name)
        status = "PARTIAL" if rep.partial else ("PASS" if rep.passed else "FAIL")
        print(f"{status:8s}{name:32s}{time.perf_counter() - t0:7.1f} s")
        for c in rep.criteria:
            if not c["passed"]:
                print(f"          failed: {c['name']} ({c['value']}, needs {c['threshold']})")
        worst = max(worst, 3 if rep.partial else (0 if rep.passed else 2))
    return worst


if __name__ == "__main__":
    sys.exit(main())
