"""Command-line harness: train, eval, ttt, sweep, diagnose.

Experiments are described by a single JSON spec file with sections
``model``, ``train``, ``ttt``, ``halt``, ``data`` and ``outputs``. Any
field can be overridden from the environment: ``GRIDLOOP_<path>`` with
``__`` standing for the section dot, e.g. ``GRIDLOOP_train__steps=500``.
Every command is a pure function of (spec, input files, seed) to output
files — nothing is timestamped, so reruns are byte-identical.

Exit codes: 0 ok, 2 invalid spec, 3 checkpoint mismatch, 4 bad reference
(unknown task id or unreadable data path).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional

from . import model as md
from .canvas import classes_from_probs, decode_grid
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .halting import (HaltingError, HaltPolicy, run_with_halting,
                      write_attention_bundle, write_trace_csv)
from .microtasks import (FAMILIES, MAX_SIZE, TaskError, TaskInstance,
                         generate_microtask, parse_task)
from .tensor import using_dtype
from .training import (MicrotaskSource, TrainConfig, TrainingError, TttConfig,
                       canvas_for_query, evaluate, make_microtask_set,
                       train_offline)

ENV_PREFIX = "GRIDLOOP_"
REPORT_SCHEMA_VERSION = 1
SWEEP_CSV_HEADER = "schema_version,B,T,params,tau,exact_match,avg_steps,flops"
PER_TASK_CSV_HEADER = ("schema_version,task_id,solved,first_success_attempt,"
                       "exit_step,pixel_accuracy")

# Training memory ceiling: the execution tape retains every intermediate of
# the unrolled loop, so per-instance cost grows with t_train. The factor is
# a deliberately generous bound on tape floats per (step x layer x token x
# channel).
TAPE_FLOATS_PER_UNIT = 64
MEMORY_BUDGET_BYTES = 8 << 30

EXIT_OK = 0
EXIT_BAD_SPEC = 2
EXIT_CHECKPOINT_MISMATCH = 3
EXIT_BAD_REFERENCE = 4


class SpecError(ValueError):
    """Raised when an experiment spec fails to load or validate."""


class TaskReferenceError(ValueError):
    """Raised for unknown task ids or unreadable data paths."""


@dataclass(frozen=True)
class DataConfig:
    source: str = "microtask"  # or "arc_json_dir"
    families: tuple = FAMILIES
    path: Optional[str] = None  # directory of ARC-schema .json files
    train_base_seed: int = 0
    eval_base_seed: int = 100000  # disjoint from every training stream
    eval_count: int = 64

    def __post_init__(self):
        object.__setattr__(self, "families", tuple(self.families))
        if self.source not in ("microtask", "arc_json_dir"):
            raise SpecError(f"unknown data source {self.source!r}")
        if self.source == "arc_json_dir" and self.path is None:
            raise SpecError("data.source 'arc_json_dir' needs data.path")
        if self.source == "microtask":
            unknown = set(self.families) - set(FAMILIES)
            if unknown:
                raise SpecError(f"unknown micro-task families: {sorted(unknown)}")
            if not self.families:
                raise SpecError("data.families must not be empty")
        if self.eval_count < 1:
            raise SpecError(f"eval_count must be positive, got {self.eval_count}")


@dataclass(frozen=True)
class ExperimentSpec:
    model: md.ModelConfig = field(default_factory=md.ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ttt: TttConfig = field(default_factory=TttConfig)
    halt: HaltPolicy = field(default_factory=lambda: HaltPolicy(t_max=8))
    data: DataConfig = field(default_factory=DataConfig)
    outputs: str = "runs/default"

    def __post_init__(self):
        if self.train.t_train != self.model.t_train:
            raise SpecError(f"train.t_train={self.train.t_train} disagrees with "
                            f"model.t_train={self.model.t_train}")
        if self.halt.t_max < self.model.t_train:
            raise SpecError(f"halt.t_max={self.halt.t_max} is below "
                            f"model.t_train={self.model.t_train}")
        if self.data.source == "microtask":
            smallest = min(self.model.canvas_height, self.model.canvas_width)
            if smallest < MAX_SIZE:
                raise SpecError(
                    f"canvas {self.model.canvas_height}x{self.model.canvas_width} "
                    f"cannot hold generated grids of up to {MAX_SIZE}x{MAX_SIZE}")


def _apply_env_overrides(obj: dict, environ) -> dict:
    for key, raw in sorted(environ.items()):
        if not key.startswith(ENV_PREFIX):
            continue
        path = key[len(ENV_PREFIX):].split("__")
        node = obj
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise SpecError(f"override {key} traverses a non-object field")
        try:
            node[path[-1]] = json.loads(raw)
        except json.JSONDecodeError:
            node[path[-1]] = raw  # bare strings need no quoting
    return obj


def load_spec(path, environ=None) -> ExperimentSpec:
    try:
        obj = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise SpecError(f"cannot load spec {path}: {err}") from err
    if not isinstance(obj, dict):
        raise SpecError("spec must be a JSON object")
    obj = _apply_env_overrides(obj, os.environ if environ is None else environ)
    stray = set(obj) - {"model", "train", "ttt", "halt", "data", "outputs"}
    if stray:
        raise SpecError(f"unknown spec sections: {sorted(stray)}")
    try:
        return ExperimentSpec(
            model=md.ModelConfig(**obj.get("model", {})),
            train=TrainConfig(**obj.get("train", {})),
            ttt=TttConfig(**obj.get("ttt", {})),
            halt=HaltPolicy(**obj.get("halt", {})),
            data=DataConfig(**obj.get("data", {})),
            outputs=obj.get("outputs", "runs/default"),
        )
    except (TypeError, md.ConfigError, TrainingError, HaltingError) as err:
        raise SpecError(f"invalid spec: {err}") from err


# ---------------------------------------------------------------------------
# data plumbing


def load_arc_directory(path, model: md.ModelConfig) -> List[TaskInstance]:
    root = Path(path)
    if not root.is_dir():
        raise TaskReferenceError(f"ARC data directory not found: {path}")
    tasks = []
    for file in sorted(root.glob("*.json")):
        try:
            task = parse_task(file.read_text(), name=file.stem)
        except TaskError as err:
            raise TaskReferenceError(f"{file}: {err}") from err
        tasks.append(task)
    if not tasks:
        raise TaskReferenceError(f"no .json tasks under {path}")
    for task in tasks:
        grids = [g for pair in task.demos for g in pair]
        grids += [g for g, _ in task.queries]
        for grid in grids:
            if grid.shape[0] > model.canvas_height or grid.shape[1] > model.canvas_width:
                raise SpecError(
                    f"task {task.task_id}: grid {grid.shape[0]}x{grid.shape[1]} "
                    f"exceeds canvas {model.canvas_height}x{model.canvas_width}")
    return tasks


def eval_tasks_for(spec: ExperimentSpec) -> List[TaskInstance]:
    if spec.data.source == "arc_json_dir":
        return load_arc_directory(spec.data.path, spec.model)
    return make_microtask_set(spec.data.families, spec.data.eval_count,
                              spec.data.eval_base_seed)


def train_source_for(spec: ExperimentSpec):
    if spec.data.source == "arc_json_dir":
        tasks = load_arc_directory(spec.data.path, spec.model)
        return lambda index: tasks[index % len(tasks)]
    return MicrotaskSource(spec.data.families, spec.data.train_base_seed)


def find_task(spec: ExperimentSpec, task_id: str) -> TaskInstance:
    if spec.data.source == "arc_json_dir":
        for task in load_arc_directory(spec.data.path, spec.model):
            if task.task_id == task_id:
                return task
        raise TaskReferenceError(f"no task named {task_id!r} under {spec.data.path}")
    family, sep, seed_text = task_id.rpartition("-")
    if sep and family in FAMILIES and seed_text.isdigit():
        return generate_microtask(family, int(seed_text))
    raise TaskReferenceError(
        f"cannot resolve task id {task_id!r}; expected <FAMILY>-<seed> "
        f"with FAMILY one of {', '.join(FAMILIES)}")


# ---------------------------------------------------------------------------
# report helpers


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _eval_report_obj(report) -> dict:
    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "exact_match": report.exact_match,
        "pixel_accuracy": report.pixel_accuracy,
        "avg_executed_steps": report.avg_executed_steps,
        "n_tasks": report.n_tasks,
    }


def _write_per_task_csv(path, report) -> None:
    with open(path, "w") as fh:
        fh.write(PER_TASK_CSV_HEADER + "\n")
        for row in report.per_task:
            fh.write(f"{REPORT_SCHEMA_VERSION},{row.task_id},{int(row.solved)},"
                     f"{row.first_success_attempt},{row.exit_step},"
                     f"{row.pixel_accuracy!r}\n")


def _policy(spec: ExperimentSpec, args) -> HaltPolicy:
    tau = spec.halt.tau if args.tau is None else args.tau
    if args.no_halt:
        tau = 0.0  # entropy is never negative, so the loop runs to t_max
    return HaltPolicy(tau=tau, t_min=spec.halt.t_min, t_max=spec.halt.t_max)


def _load_matching_checkpoint(path, expected: md.ModelConfig) -> md.Params:
    params, config = load_checkpoint(path)
    if config != expected:
        raise CheckpointError(
            f"checkpoint was trained with a different model config; "
            f"checkpoint {asdict(config)} vs spec {asdict(expected)}")
    return params


def _check_memory_budget(model: md.ModelConfig, train: TrainConfig) -> None:
    units = (train.t_train * model.trunk_layers * model.n_tokens * model.dim
             * train.batch_size)
    estimated = units * TAPE_FLOATS_PER_UNIT * 4  # f32 bytes
    if estimated > MEMORY_BUDGET_BYTES:
        raise SpecError(
            f"unrolling t_train={train.t_train} at batch_size={train.batch_size} "
            f"needs roughly {estimated >> 30} GiB of gradient tape, above the "
            f"{MEMORY_BUDGET_BYTES >> 30} GiB budget; reduce t_train, "
            f"batch_size, dim, or trunk_layers")


# ---------------------------------------------------------------------------
# commands


def cmd_train(spec: ExperimentSpec, args) -> int:
    out = Path(args.out or spec.outputs)
    out.mkdir(parents=True, exist_ok=True)
    _check_memory_budget(spec.model, spec.train)
    params = md.init_params(spec.model, seed=spec.train.seed)
    source = train_source_for(spec)
    eval_tasks = eval_tasks_for(spec)
    train_offline(source, params, spec.model, spec.train,
                  eval_tasks=eval_tasks, metrics_path=out / "metrics.jsonl")
    save_checkpoint(out / "model.ckpt", params, spec.model)
    print(f"checkpoint: {out / 'model.ckpt'}")
    print(f"metrics: {out / 'metrics.jsonl'}")
    return EXIT_OK


def cmd_eval(spec: ExperimentSpec, args) -> int:
    out = Path(args.out or spec.outputs)
    out.mkdir(parents=True, exist_ok=True)
    params = _load_matching_checkpoint(args.checkpoint, spec.model)
    ttt = None
    if args.command == "ttt":
        if spec.ttt.adaptation_steps < 1:
            raise SpecError("ttt command needs spec ttt.adaptation_steps >= 1")
        ttt = spec.ttt
    tasks = eval_tasks_for(spec)
    policy = _policy(spec, args)
    report = evaluate(tasks, params, spec.model, policy,
                      attempts=2, ttt=ttt, seed=args.seed)
    _write_json(out / "report.json", _eval_report_obj(report))
    _write_per_task_csv(out / "per_task.csv", report)
    print(json.dumps(_eval_report_obj(report), sort_keys=True))
    return EXIT_OK


def _sweep_tau_rows(spec: ExperimentSpec, args) -> List[str]:
    if args.checkpoint is None:
        raise SpecError("a tau sweep evaluates one checkpoint; pass --checkpoint")
    params = _load_matching_checkpoint(args.checkpoint, spec.model)
    tasks = eval_tasks_for(spec)
    rows = []
    for tau in args.taus:
        policy = HaltPolicy(tau=tau, t_min=spec.halt.t_min, t_max=spec.halt.t_max)
        report = evaluate(tasks, params, spec.model, policy, attempts=1,
                          seed=args.seed)
        flops = md.flops_per_step(spec.model) * report.avg_executed_steps
        rows.append(f"{spec.model.trunk_layers},{spec.model.t_train},"
                    f"{md.param_count(spec.model)},{tau!r},"
                    f"{report.exact_match!r},{report.avg_executed_steps!r},"
                    f"{flops!r}")
    return rows


def _sweep_grid_rows(spec: ExperimentSpec, args) -> List[str]:
    depths = args.depths or [spec.model.trunk_layers]
    unrolls = args.steps_axis or [spec.model.t_train]
    rows = []
    for depth in depths:
        for t in unrolls:
            model_cfg = md.ModelConfig(**{**asdict(spec.model),
                                          "trunk_layers": depth, "t_train": t,
                                          "t_max": max(t, spec.model.t_max)})
            train_cfg = TrainConfig(**{**asdict(spec.train), "t_train": t})
            _check_memory_budget(model_cfg, train_cfg)
            params = md.init_params(model_cfg, seed=train_cfg.seed)
            train_offline(train_source_for(spec), params, model_cfg, train_cfg)
            policy = HaltPolicy(tau=0.0, t_min=1, t_max=t)
            report = evaluate(eval_tasks_for(spec), params, model_cfg, policy,
                              attempts=1, seed=args.seed)
            flops = md.flops_per_step(model_cfg) * report.avg_executed_steps
            rows.append(f"{depth},{t},{md.param_count(model_cfg)},,"
                        f"{report.exact_match!r},{report.avg_executed_steps!r},"
                        f"{flops!r}")
    return rows


def cmd_sweep(spec: ExperimentSpec, args) -> int:
    out = Path(args.out or spec.outputs)
    out.mkdir(parents=True, exist_ok=True)
    if args.taus is not None and (args.depths or args.steps_axis):
        raise SpecError("pick one sweep axis: --taus, or --depths/--steps-axis")
    rows = _sweep_tau_rows(spec, args) if args.taus is not None \
        else _sweep_grid_rows(spec, args)
    path = out / "sweep.csv"
    with open(path, "w") as fh:
        fh.write(SWEEP_CSV_HEADER + "\n")
        for row in rows:
            fh.write(f"{REPORT_SCHEMA_VERSION},{row}\n")
    print(f"sweep: {path}")
    return EXIT_OK


def cmd_diagnose(spec: ExperimentSpec, args) -> int:
    out = Path(args.out or spec.outputs)
    out.mkdir(parents=True, exist_ok=True)
    params = _load_matching_checkpoint(args.checkpoint, spec.model)
    task = find_task(spec, args.task_id)
    canvas = canvas_for_query(task, spec.model, 0, with_target=False)
    result = run_with_halting(canvas, params, spec.model, _policy(spec, args),
                              collect_attention=args.emit_attention)
    write_trace_csv(out / "trace.csv", [(task.task_id, result)])
    _write_json(out / "step_grids.json", {
        "schema_version": REPORT_SCHEMA_VERSION,
        "task_id": task.task_id,
        "exit_step": result.exit_step,
        "steps": [{"step": trace.t,
                   "grid": decode_grid(classes_from_probs(trace.probs),
                                       canvas.spec).tolist()}
                  for trace in result.traces],
    })
    if args.emit_attention:
        write_attention_bundle(out / "attention.bin", out / "attention.json",
                               [(task.task_id, result)])
    print(f"trace: {out / 'trace.csv'}")
    print(f"exit_step: {result.exit_step}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gridloop",
        description="Recurrent grid-transformer experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("train", "eval", "ttt", "sweep", "diagnose"):
        cmd = sub.add_parser(name)
        cmd.add_argument("--spec", required=True, help="experiment spec JSON")
        cmd.add_argument("--out", default=None,
                         help="output directory (default: spec outputs)")
        cmd.add_argument("--seed", type=int, default=0,
                         help="evaluation-time randomness (augmentation picks)")
        cmd.add_argument("--precision", choices=("f32", "f64"), default="f32")
        cmd.add_argument("--no-halt", action="store_true",
                         help="force the full fixed-t_max run")
        cmd.add_argument("--tau", type=float, default=None,
                         help="override the spec halting threshold")
        if name != "train":
            cmd.add_argument("--checkpoint", required=(name != "sweep"))
        if name == "diagnose":
            cmd.add_argument("--task-id", required=True)
            cmd.add_argument("--emit-attention", action="store_true")
        if name == "sweep":
            cmd.add_argument("--taus", type=float, nargs="+", default=None,
                             help="halting thresholds to evaluate one checkpoint at")
            cmd.add_argument("--depths", type=int, nargs="+", default=None,
                             help="trunk depths to train/evaluate")
            cmd.add_argument("--steps-axis", type=int, nargs="+", default=None,
                             help="unroll lengths to train/evaluate")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {"train": cmd_train, "eval": cmd_eval, "ttt": cmd_eval,
                "sweep": cmd_sweep, "diagnose": cmd_diagnose}
    try:
        spec = load_spec(args.spec)
        with using_dtype(args.precision):
            return handlers[args.command](spec, args)
    except (SpecError, HaltingError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_BAD_SPEC
    except CheckpointError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CHECKPOINT_MISMATCH
    except TaskReferenceError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_BAD_REFERENCE


if __name__ == "__main__":
    sys.exit(main())
