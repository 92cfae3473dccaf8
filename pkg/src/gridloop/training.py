"""Fixed-depth training, test-time adaptation, and Pass@k evaluation.

Training unrolls the tied trunk for exactly ``t_train`` steps and applies
the per-pixel cross-entropy loss to the final step's logits only — the
gradient reaches early iterations exclusively by flowing back through the
recurrence. Dynamic halting is an inference-time device and is never active
while training.

Test-time training (``ttt_adapt``) specializes a copy of the weights to one
task by supervising held-out demonstration pairs under rule-preserving
augmentations, sampled from the task family's declared equivariance set.

Evaluation reports Pass@k exact-match: attempt 1 predicts directly, attempt
2 predicts under a sampled augmentation and maps the result back through its
inverse. Per-task randomness is keyed by task id, so results do not depend
on evaluation order.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, replace
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import tensor as tl
from . import model as md
from .canvas import Canvas, classes_from_probs, encode_task
from .grids import grids_equal
from .halting import HaltPolicy, run_with_halting
from .microtasks import (TaskInstance, augment_task, generate_microtask,
                         sample_task_augmentation)

METRICS_SCHEMA_VERSION = 1


class TrainingError(RuntimeError):
    """Raised on contract violations or training divergence."""


@dataclass(frozen=True)
class TrainConfig:
    t_train: int = 4
    batch_size: int = 8
    steps: int = 2000
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    grad_clip_norm: float = 1.0
    warmup_steps: int = 100
    eval_interval: int = 100
    seed: int = 0
    stop_at_exact_match: Optional[float] = None

    def __post_init__(self):
        if self.t_train < 1 or self.batch_size < 1 or self.steps < 1:
            raise TrainingError("t_train, batch_size and steps must be >= 1")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise TrainingError("learning_rate and weight_decay must be >= 0")


@dataclass(frozen=True)
class TttConfig:
    adaptation_steps: int = 0  # 0 disables test-time training
    learning_rate: float = 3e-4
    augmentations_per_demo: int = 3
    restore_after: bool = True

    def __post_init__(self):
        if self.adaptation_steps < 0 or self.augmentations_per_demo < 0:
            raise TrainingError("adaptation_steps and augmentations_per_demo "
                                "must be >= 0")


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """Decoupled-weight-decay Adam over the model's tensors.

    Decay applies only to tensors with 2 or more dimensions (projection
    matrices, embedding tables, conv kernels); gains and biases are exempt.
    """

    def __init__(self, tensors: Sequence[tl.Tensor], config: TrainConfig):
        self.tensors = list(tensors)
        self.config = config
        self.m = [np.zeros_like(t.data) for t in self.tensors]
        self.v = [np.zeros_like(t.data) for t in self.tensors]
        self.t = 0

    def step(self, learning_rate: float) -> None:
        cfg = self.config
        self.t += 1
        bias1 = 1.0 - cfg.beta1 ** self.t
        bias2 = 1.0 - cfg.beta2 ** self.t
        for i, tensor in enumerate(self.tensors):
            grad = tensor.grad
            if grad is None:
                continue
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * grad
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * grad * grad
            update = (self.m[i] / bias1) / (np.sqrt(self.v[i] / bias2) + cfg.eps)
            if tensor.data.ndim >= 2:
                update = update + cfg.weight_decay * tensor.data
            tensor.data = tensor.data - learning_rate * update.astype(tensor.data.dtype)


def cosine_learning_rate(step: int, config: TrainConfig) -> float:
    """Linear warmup to the peak rate, then cosine decay to zero."""
    if config.warmup_steps > 0 and step < config.warmup_steps:
        return config.learning_rate * (step + 1) / config.warmup_steps
    span = max(1, config.steps - config.warmup_steps)
    progress = min(1.0, (step - config.warmup_steps) / span)
    return config.learning_rate * 0.5 * (1.0 + np.cos(np.pi * progress))


def clip_global_norm(tensors: Sequence[tl.Tensor], max_norm: float) -> float:
    total = 0.0
    for t in tensors:
        if t.grad is not None:
            total += float((t.grad.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for t in tensors:
            if t.grad is not None:
                t.grad = t.grad * factor
    return norm


# ---------------------------------------------------------------------------
# loss and data plumbing


def offline_loss(logits: tl.Tensor, canvas: Canvas, config: md.ModelConfig) -> tl.Tensor:
    """Mean cross-entropy over the image canvas (PAD included, slots excluded)."""
    if canvas.targets is None:
        raise TrainingError("offline loss requires a canvas with targets")
    image = tl.slice_rows(logits, config.n_task_tokens, config.n_tokens)
    return tl.cross_entropy_mean(image, canvas.targets)


def canvas_for_query(task: TaskInstance, config: md.ModelConfig,
                     query_index: int = 0, with_target: bool = True) -> Canvas:
    query, expected = task.queries[query_index]
    return encode_task(list(task.demos), query, config.canvas_spec,
                       target=expected if with_target else None)


@dataclass(frozen=True)
class MicrotaskSource:
    """Deterministic endless task stream cycling over families."""

    families: tuple
    base_seed: int = 0

    def __call__(self, index: int) -> TaskInstance:
        family = self.families[index % len(self.families)]
        return generate_microtask(family, self.base_seed + index)


def make_microtask_set(families, count: int, base_seed: int) -> List[TaskInstance]:
    source = MicrotaskSource(tuple(families), base_seed)
    return [source(i) for i in range(count)]


# ---------------------------------------------------------------------------
# offline training


def _forward_loss(task: TaskInstance, params: md.Params, config: md.ModelConfig,
                  n_steps: int) -> tl.Tensor:
    canvas = canvas_for_query(task, config)
    z0 = md.embed(canvas, params, config)
    z = md.loop_forward(z0, params, config, n_steps)[-1]
    return offline_loss(md.head_logits(z, params, config), canvas, config)


def _diagnostic_dump(step: int, loss_value: float, params: md.Params) -> str:
    norms = {name: float(np.linalg.norm(t.data)) for name, t in params.named()}
    biggest = sorted(norms.items(), key=lambda kv: -kv[1])[:5]
    listing = ", ".join(f"{name}={norm:.3g}" for name, norm in biggest)
    return (f"training diverged at step {step}: loss={loss_value}; "
            f"largest parameter norms: {listing}")


def train_offline(source: Callable[[int], TaskInstance], params: md.Params,
                  config: md.ModelConfig, train: TrainConfig,
                  eval_tasks: Optional[Sequence[TaskInstance]] = None,
                  metrics_path=None) -> List[dict]:
    """Run the fixed-depth training loop; returns (and optionally logs) metrics.

    One metrics record is appended per ``eval_interval`` steps and at the end;
    each record carries the mean training loss since the previous record plus
    evaluation statistics on ``eval_tasks`` under a fixed ``t_train``-step run.
    """
    if config.mode != md.LOOPED:
        raise TrainingError("offline training drives the looped mode")
    if train.t_train != config.t_train:
        raise TrainingError(f"train.t_train={train.t_train} must match "
                            f"model t_train={config.t_train}")
    tensors = params.tensors()
    optimizer = AdamW(tensors, train)
    metrics: List[dict] = []
    sink = open(metrics_path, "w") if metrics_path is not None else None
    try:
        window_losses: List[float] = []
        for step in range(train.steps):
            tl.zero_grad(tensors)
            batch_loss = 0.0
            for b in range(train.batch_size):
                task = source(step * train.batch_size + b)
                loss = _forward_loss(task, params, config, train.t_train)
                tl.backward(tl.scale(loss, 1.0 / train.batch_size))
                tl.tape().clear()
                batch_loss += loss.item() / train.batch_size
            if not np.isfinite(batch_loss):
                raise TrainingError(_diagnostic_dump(step, batch_loss, params))
            clip_global_norm(tensors, train.grad_clip_norm)
            optimizer.step(cosine_learning_rate(step, train))
            window_losses.append(batch_loss)

            last = step == train.steps - 1
            if (step + 1) % train.eval_interval == 0 or last:
                record = {
                    "schema_version": METRICS_SCHEMA_VERSION,
                    "step": step + 1,
                    "loss": float(np.mean(window_losses)),
                }
                if eval_tasks:
                    fixed = HaltPolicy(tau=0.0, t_max=config.t_train)
                    report = evaluate(eval_tasks, params, config, fixed, attempts=1)
                    record["pixel_acc"] = report.pixel_accuracy
                    record["exact_match"] = report.exact_match
                    record["avg_executed_steps"] = report.avg_executed_steps
                window_losses = []
                metrics.append(record)
                if sink is not None:
                    sink.write(json.dumps(record, sort_keys=True) + "\n")
                    sink.flush()
                if (train.stop_at_exact_match is not None and eval_tasks
                        and record["exact_match"] >= train.stop_at_exact_match):
                    break
    finally:
        if sink is not None:
            sink.close()
    tl.zero_grad(tensors)
    return metrics


# ---------------------------------------------------------------------------
# test-time training


def copy_params(params: md.Params) -> md.Params:
    def dup(t: Optional[tl.Tensor]) -> Optional[tl.Tensor]:
        return None if t is None else tl.Tensor(t.data.copy(), requires_grad=True)

    blocks = [md.BlockParams(**{name.split(".")[-1]: dup(t)
                                for name, t in block.named("b")})
              for block in params.blocks]
    return md.Params(
        token_embedding=dup(params.token_embedding),
        slot_embedding=dup(params.slot_embedding),
        step_embedding=dup(params.step_embedding),
        blocks=blocks,
        head_gain=dup(params.head_gain),
        head_w=dup(params.head_w),
        head_bias=dup(params.head_bias),
    )


def adaptation_views(task: TaskInstance, ttt: TttConfig, rng) -> List[TaskInstance]:
    """Leave-one-out supervision tasks under rule-preserving augmented views.

    Each demonstration in turn becomes the supervised query, with the
    remaining demos as context (or itself, for single-demo tasks). Every
    such split contributes an identity view plus ``augmentations_per_demo``
    sampled views.
    """
    views = []
    for i in range(len(task.demos)):
        context = task.demos[:i] + task.demos[i + 1:] or task.demos
        held_out = task.demos[i]
        split = replace(task, demos=context, queries=(held_out,))
        views.append(split)
        for _ in range(ttt.augmentations_per_demo):
            views.append(augment_task(split, sample_task_augmentation(task, rng)))
    return views


def ttt_adapt(task: TaskInstance, params: md.Params, config: md.ModelConfig,
              ttt: TttConfig, rng=None, train: Optional[TrainConfig] = None) -> md.Params:
    """Specialize a copy of the weights to one task's demonstrations.

    The originals are never mutated; with ``adaptation_steps == 0`` the same
    parameter object is returned untouched.
    """
    if ttt.adaptation_steps == 0:
        return params
    rng = np.random.default_rng(0) if rng is None else rng
    train = train or TrainConfig()
    adapted = copy_params(params)
    tensors = adapted.tensors()
    opt_config = TrainConfig(t_train=config.t_train, learning_rate=ttt.learning_rate,
                             weight_decay=0.0, beta1=train.beta1, beta2=train.beta2,
                             eps=train.eps, grad_clip_norm=train.grad_clip_norm)
    optimizer = AdamW(tensors, opt_config)
    views = adaptation_views(task, ttt, rng)
    for _ in range(ttt.adaptation_steps):
        tl.zero_grad(tensors)
        for view in views:
            loss = _forward_loss(view, adapted, config, config.t_train)
            tl.backward(tl.scale(loss, 1.0 / len(views)))
            tl.tape().clear()
        clip_global_norm(tensors, opt_config.grad_clip_norm)
        optimizer.step(ttt.learning_rate)
    tl.zero_grad(tensors)
    return adapted


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class TaskResult:
    task_id: str
    solved: bool
    first_success_attempt: int  # 0 when no attempt matched
    exit_step: float  # mean over queries, attempt 1
    pixel_accuracy: float


@dataclass
class EvalReport:
    exact_match: float
    pixel_accuracy: float
    avg_executed_steps: float
    n_tasks: int
    per_task: List[TaskResult]


def _task_rng(seed: int, task_id: str, lane: int):
    return np.random.default_rng([seed, zlib.crc32(task_id.encode("utf-8")), lane])


def evaluate(tasks: Sequence[TaskInstance], params: md.Params,
             config: md.ModelConfig, policy: HaltPolicy, attempts: int = 2,
             ttt: Optional[TttConfig] = None, seed: int = 0) -> EvalReport:
    """Pass@k exact-match over tasks, with optional per-task adaptation.

    Per-task randomness (augmentation choice, TTT views) is derived from the
    task id, never from evaluation order, so task sets can be permuted or
    split without changing any individual result. With ``ttt.restore_after``
    unset, adapted weights carry over to subsequent tasks in sequence order.
    """
    base = params
    results: List[TaskResult] = []
    step_counts: List[float] = []
    for index, task in enumerate(tasks):
        task_id = task.task_id if task.task_id != "task" else f"task-{index}"
        working = base
        if ttt is not None and ttt.adaptation_steps > 0:
            working = ttt_adapt(task, base, config, ttt,
                                rng=_task_rng(seed, task_id, lane=1))
            if not ttt.restore_after:
                base = working
        solved_all = True
        first_attempt = 0
        exits: List[int] = []
        pixel_accs: List[float] = []
        for qi, (query, expected) in enumerate(task.queries):
            canvas = canvas_for_query(task, config, qi)
            direct = run_with_halting(canvas, working, config, policy)
            exits.append(direct.exit_step)
            if expected is None:
                continue
            predictions = [(1, direct.prediction)]
            if attempts >= 2:
                rng = np.random.default_rng(
                    [seed, zlib.crc32(task_id.encode("utf-8")), 2, qi])
                aug = sample_task_augmentation(task, rng)
                viewed = augment_task(task, aug)
                canvas2 = canvas_for_query(viewed, config, qi, with_target=False)
                second = run_with_halting(canvas2, working, config, policy)
                predictions.append((2, aug.invert().apply(second.prediction)))
            matched = 0
            for attempt, grid in predictions:
                if grids_equal(grid, expected):
                    matched = attempt
                    break
            if matched == 0:
                solved_all = False
            else:
                first_attempt = max(first_attempt, matched)
            target_classes = canvas.targets
            predicted_classes = classes_from_probs(direct.exit_probs)
            pixel_accs.append(float((predicted_classes == target_classes).mean()))
        solved = solved_all and bool(pixel_accs)
        results.append(TaskResult(
            task_id=task_id,
            solved=solved,
            first_success_attempt=first_attempt if solved else 0,
            exit_step=float(np.mean(exits)) if exits else 0.0,
            pixel_accuracy=float(np.mean(pixel_accs)) if pixel_accs else float("nan"),
        ))
        step_counts.extend(exits)
    scored = [r.pixel_accuracy for r in results if not np.isnan(r.pixel_accuracy)]
    return EvalReport(
        exact_match=float(np.mean([r.solved for r in results])) if results else 0.0,
        pixel_accuracy=float(np.mean(scored)) if scored else 0.0,
        avg_executed_steps=float(np.mean(step_counts)) if step_counts else 0.0,
        n_tasks=len(results),
        per_task=results,
    )
