"""Run every named experiment into results/<experiment>/ and print the checks."""
import argparse
import sys
from pathlib import Path

from schedq.experiments import CRITERIA, EXPERIMENTS, ExperimentSpec, run_experiment


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--out", type=Path, default=Path("results"))
    ap.add_argument("--parallel", action="store_true")
    args = ap.parse_args()
    failed = False
    for name in EXPERIMENTS:
        res = run_experiment(ExperimentSpec(name, args.seed, out=args.out / name,
                                            parallel=args.parallel))
        for crit, check in sorted(res.checks.items(), key=lambda kv: int(kv[0])):
            assert CRITERIA[int(crit)] == name
            print(f"{name:15s} criterion {crit:>2}: {'PASS' if check['pass'] else 'FAIL'}")
            failed |= not check["pass"]
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
