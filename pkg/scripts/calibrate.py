"""Sweep gamma and c_tau against the supercell oracle and print the table.

    python scripts/calibrate.py --out results/calibrate
"""

import argparse
import json

from homoscale.config import Config
from homoscale.experiments import calibrate


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results/calibrate")
    ap.add_argument("--config", default=None)
    ap.add_argument("--gammas", type=float, nargs="+", default=[0.25, 0.5, 1.0])
    ap.add_argument("--c-taus", type=float, nargs="+", default=[0.25, 0.5, 1.0])
    ap.add_argument("--qs", type=int, nargs="+", default=[8, 16])
    args = ap.parse_args(argv)
    summary = calibrate(Config.load(args.config), args.out, tuple(args.gammas), tuple(args.c_taus), tuple(args.qs))
    print(open(f"{args.out}/calibration.csv").read())
    print("recommended:", json.dumps(summary["recommended"]))


if __name__ == "__main__":
    main()
