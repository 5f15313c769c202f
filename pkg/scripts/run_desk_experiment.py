#!/usr/bin/env python3
"""One-command desk experiment: simulate, train, and score against persistence.

Thin wrapper over the `e2e` pipeline with the same defaults; handy when you
want the artifacts (checkpoint, training report, summary CSV) in one place.
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from stlgt.cli import run_e2e


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/desk", help="artifact directory")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--windows", type=int, default=2000)
    ap.add_argument("--delta-s", type=int, default=30)
    ap.add_argument("--rho", type=float, default=None,
                    help="override pre-mixing strength")
    ap.add_argument("--decoder", choices=("timesnet", "linear"), default=None)
    ap.add_argument("--config", default=None, help="key = value config file")
    args = ap.parse_args()

    res = run_e2e(Path(args.out), seed=args.seed, windows=args.windows,
                  delta_s=args.delta_s, rho=args.rho, decoder=args.decoder,
                  config_path=args.config)
    print(f"test mean pinball  model {res.model.mean_pinball:.4f}  "
          f"persistence {res.persistence.mean_pinball:.4f}")
    print(f"test mae (ms)      model {res.model.mean_mae:.4f}  "
          f"persistence {res.persistence.mean_mae:.4f}")
    print(f"artifacts in {res.out_dir}")
    if not res.passed:
        print("model did not beat the persistence baseline", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
