"""Materialize generated micro-tasks as ARC-schema JSON files.

Writes one <family>-<seed>.json per task into a directory, in the same
{"train": [...], "test": [...]} shape real ARC tasks use, so the
`arc_json_dir` data source (and any external ARC tooling) can consume
them. A JSONL manifest with family/seed metadata sits alongside.

Usage:
    python3 scripts/dump_microtasks.py --out data/microtasks \
        --families MIRROR_H COLOR_SWAP --count 32 --base-seed 100000
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from gridloop.microtasks import FAMILIES, serialize_task, task_to_record
from gridloop.training import make_microtask_set


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--families", nargs="+", default=list(FAMILIES),
                        choices=list(FAMILIES))
    parser.add_argument("--count", type=int, default=32)
    parser.add_argument("--base-seed", type=int, default=100000)
    args = parser.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tasks = make_microtask_set(tuple(args.families), args.count, args.base_seed)
    with open(out / "manifest.jsonl", "w") as manifest:
        for task in tasks:
            (out / f"{task.task_id}.json").write_text(serialize_task(task))
            manifest.write(task_to_record(task) + "\n")
    print(f"wrote {len(tasks)} tasks to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
