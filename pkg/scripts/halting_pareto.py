"""Accuracy/compute trade-off of entropy-based early exit.

Evaluates one trained checkpoint across a range of halting thresholds and
writes the (threshold, exact_match, avg_steps, flops) frontier as CSV.
The tau=0 row is the fixed-length baseline every other row is judged
against.

Usage:
    python3 scripts/halting_pareto.py --checkpoint runs/mirror/model.ckpt \
        --family MIRROR_H --taus 0 0.01 0.02 0.05 0.1 0.2 0.5 --out pareto.csv
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from gridloop import model as md
from gridloop.checkpoint import load_checkpoint
from gridloop.halting import HaltPolicy
from gridloop.training import evaluate, make_microtask_set


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--checkpoint", required=True)
    parser.add_argument("--family", default="MIRROR_H")
    parser.add_argument("--taus", type=float, nargs="+",
                        default=[0.0, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5])
    parser.add_argument("--t-max", type=int, default=None,
                        help="inference step cap (default: checkpoint t_max)")
    parser.add_argument("--eval-count", type=int, default=64)
    parser.add_argument("--eval-seed", type=int, default=100000)
    parser.add_argument("--out", default="pareto.csv")
    args = parser.parse_args()

    params, config = load_checkpoint(args.checkpoint)
    t_max = args.t_max or config.t_max
    tasks = make_microtask_set((args.family,), args.eval_count, args.eval_seed)
    step_cost = md.flops_per_step(config)

    with open(args.out, "w") as fh:
        fh.write("tau,exact_match,pixel_accuracy,avg_steps,flops\n")
        for tau in args.taus:
            policy = HaltPolicy(tau=tau, t_min=1, t_max=t_max)
            report = evaluate(tasks, params, config, policy, attempts=1, seed=0)
            row = (tau, report.exact_match, report.pixel_accuracy,
                   report.avg_executed_steps,
                   step_cost * report.avg_executed_steps)
            fh.write(",".join(str(v) for v in row) + "\n")
            print(dict(zip(("tau", "exact_match", "pixel_accuracy",
                            "avg_steps", "flops"), row)))
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
