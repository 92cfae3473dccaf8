"""How much does iterating the same block buy over running it once?

Trains the same-parameter model at several unroll lengths on one task
family (default FLOOD_FILL, whose solutions need iterative propagation),
evaluates each on a held-out set, and writes one CSV row per
(unroll, seed). The weight-tied trunk means every row has the same
parameter count — the only thing that changes is how many times the
block is applied.

Usage:
    python3 scripts/recurrence_dividend.py --out dividend.csv \
        --unrolls 1 2 4 8 --seeds 0 1 2 --steps 800
"""

import argparse
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from gridloop import model as md
from gridloop.halting import HaltPolicy
from gridloop.training import (MicrotaskSource, TrainConfig, evaluate,
                               make_microtask_set, train_offline)


def run_point(family: str, unroll: int, seed: int, args) -> dict:
    config = md.ModelConfig(dim=args.dim, n_heads=4, trunk_layers=1,
                            t_train=unroll, t_max=max(unroll, 8))
    train = TrainConfig(t_train=unroll, batch_size=args.batch_size,
                        steps=args.steps, learning_rate=args.learning_rate,
                        warmup_steps=min(100, args.steps // 4),
                        eval_interval=args.steps, seed=seed)
    params = md.init_params(config, seed=seed)
    source = MicrotaskSource((family,), seed)
    started = time.time()
    train_offline(source, params, config, train)
    eval_tasks = make_microtask_set((family,), args.eval_count, 100000)
    policy = HaltPolicy(tau=0.0, t_min=1, t_max=unroll)
    report = evaluate(eval_tasks, params, config, policy, attempts=1, seed=0)
    return {
        "family": family, "unroll": unroll, "seed": seed,
        "params": md.param_count(config),
        "exact_match": report.exact_match,
        "pixel_accuracy": report.pixel_accuracy,
        "train_seconds": round(time.time() - started, 1),
    }


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--family", default="FLOOD_FILL")
    parser.add_argument("--unrolls", type=int, nargs="+", default=[1, 2, 4, 8])
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--steps", type=int, default=800)
    parser.add_argument("--batch-size", type=int, default=16)
    parser.add_argument("--learning-rate", type=float, default=1e-3)
    parser.add_argument("--dim", type=int, default=64)
    parser.add_argument("--eval-count", type=int, default=64)
    parser.add_argument("--out", default="dividend.csv")
    args = parser.parse_args()

    columns = ("family", "unroll", "seed", "params", "exact_match",
               "pixel_accuracy", "train_seconds")
    with open(args.out, "w") as fh:
        fh.write(",".join(columns) + "\n")
        for unroll in args.unrolls:
            for seed in args.seeds:
                row = run_point(args.family, unroll, seed, args)
                fh.write(",".join(str(row[c]) for c in columns) + "\n")
                fh.flush()
                print(row)
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
