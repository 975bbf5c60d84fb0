"""Per-queue keystroke recovery summary (F1, error counts, jitter) over seeded runs."""
import argparse

import numpy as np

from schedq.keystroke import run_keystroke_attack
from schedq.rng import make_rng
from schedq.uarch import load_machine_config

ap = argparse.ArgumentParser(description=__doc__)
ap.add_argument("--machine", default="Zen3")
ap.add_argument("--runs", type=int, default=20)
ap.add_argument("--seed", type=int, default=1)
args = ap.parse_args()

cfg = load_machine_config(args.machine)
seeds = make_rng(args.seed, "summary").integers(0, 2**31, size=args.runs)
print(f"{'queue':6s} {'F1 mean':>8s} {'FN':>4s} {'FP':>4s} {'jitter ms':>10s}")
for q in cfg.int_queue_ids:
    reps = [run_keystroke_attack(cfg, q, int(s))[2] for s in seeds]
    offsets = np.concatenate([r.offsets for r in reps])
    print(f"{q:6s} {np.mean([r.f1 for r in reps]):8.4f} "
          f"{sum(r.false_negatives for r in reps):4d} {sum(r.false_positives for r in reps):4d} "
          f"{offsets.std():10.3f}")
