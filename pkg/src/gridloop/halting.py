"""Entropy-gated early exit over the recurrence.

After each loop step the per-pixel class distributions are summarized by
their average Shannon entropy (nats). Once that confidence measure drops
below a threshold ``tau`` the state is frozen: no further trunk applications
run, and any fixed-length trace replicates the frozen step's outputs
verbatim. ``tau = 0`` therefore never halts early (entropy is nonnegative)
and reproduces the fixed-length run bit for bit.

Alongside entropy, traces record the relative L2 change between consecutive
prediction tensors (``delta``, defined from step 2), the second convergence
diagnostic used to study how predictions settle over iterations.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from . import tensor as tl
from . import model as md
from .canvas import Canvas, classes_from_probs, decode_grid

TRACE_SCHEMA_VERSION = 1


class HaltingError(ValueError):
    """Raised for invalid policies or malformed probability tables."""


@dataclass(frozen=True)
class HaltPolicy:
    tau: float = 0.05
    t_min: int = 1
    t_max: int = 8

    def __post_init__(self):
        if self.tau < 0:
            raise HaltingError(f"tau must be >= 0, got {self.tau}")
        if not (1 <= self.t_min <= self.t_max):
            raise HaltingError(f"need 1 <= t_min <= t_max, got "
                               f"t_min={self.t_min}, t_max={self.t_max}")


def compute_entropy(probs: np.ndarray) -> float:
    """Average per-row Shannon entropy in nats, with 0·ln 0 taken as 0."""
    probs = np.asarray(probs)
    row_sums = probs.sum(axis=-1)
    if np.max(np.abs(row_sums - 1.0)) > 1e-4:
        raise HaltingError("probability rows must sum to 1 within 1e-4")
    terms = np.where(probs > 0.0, probs * np.log(np.where(probs > 0.0, probs, 1.0)), 0.0)
    return float(-terms.sum() / probs.shape[0])


def compute_delta(probs_t: np.ndarray, probs_prev: np.ndarray) -> float:
    """Relative L2 change ||P_t - P_{t-1}|| / ||P_{t-1}|| between steps."""
    if probs_t.shape != probs_prev.shape:
        raise HaltingError(f"shape mismatch: {probs_t.shape} vs {probs_prev.shape}")
    denom = float(np.linalg.norm(probs_prev))
    if denom == 0.0:
        raise HaltingError("previous prediction tensor has zero norm")
    return float(np.linalg.norm(probs_t - probs_prev) / denom)


@dataclass
class StepTrace:
    t: int
    probs: np.ndarray
    entropy: float
    delta: Optional[float]  # undefined at step 1
    halted: bool
    attention_maps: Optional[np.ndarray] = None  # (blocks, heads, M, M)


@dataclass
class HaltingResult:
    prediction: np.ndarray  # decoded Grid
    traces: List[StepTrace]
    exit_step: int

    @property
    def executed_steps(self) -> int:
        return self.exit_step

    @property
    def exit_probs(self) -> np.ndarray:
        return self.traces[self.exit_step - 1].probs


def run_with_halting(canvas: Canvas, params: md.Params, config: md.ModelConfig,
                     policy: HaltPolicy, fixed_length: bool = False,
                     collect_attention: bool = False) -> HaltingResult:
    """Iterate the trunk until entropy crosses ``tau`` (or t_max), then decode.

    With ``fixed_length`` the trace is padded out to ``t_max`` entries that
    repeat the frozen step's outputs exactly (delta 0), for fixed-grid logs.
    """
    traces: List[StepTrace] = []
    with tl.no_grad():
        z = md.embed(canvas, params, config)
        prev_probs = None
        exit_step = policy.t_max
        for t in range(1, policy.t_max + 1):
            sink: Optional[list] = [] if collect_attention else None
            z = md.loop_step(z, t, params, config, attn_sink=sink)
            probs = md.image_probs(z, params, config)
            entropy = compute_entropy(probs)
            delta = None if prev_probs is None else compute_delta(probs, prev_probs)
            halted = t >= policy.t_min and entropy < policy.tau
            traces.append(StepTrace(
                t=t, probs=probs, entropy=entropy, delta=delta, halted=halted,
                attention_maps=np.stack(sink) if collect_attention else None))
            prev_probs = probs
            if halted:
                exit_step = t
                break
    if fixed_length:
        frozen = traces[-1]
        for t in range(exit_step + 1, policy.t_max + 1):
            traces.append(StepTrace(t=t, probs=frozen.probs, entropy=frozen.entropy,
                                    delta=0.0, halted=True,
                                    attention_maps=frozen.attention_maps))
    prediction = decode_grid(classes_from_probs(traces[exit_step - 1].probs),
                             canvas.spec)
    return HaltingResult(prediction=prediction, traces=traces, exit_step=exit_step)


# ---------------------------------------------------------------------------
# trace export


def trace_csv_rows(task_id: str, result: HaltingResult):
    """CSV rows (as strings) for one task's halting trace."""
    for trace in result.traces:
        delta = "" if trace.delta is None else repr(float(trace.delta))
        yield (f"{TRACE_SCHEMA_VERSION},{task_id},{trace.t},"
               f"{repr(float(trace.entropy))},{delta},"
               f"{int(trace.halted)},{result.exit_step}")


TRACE_CSV_HEADER = "schema_version,task_id,step,entropy,delta,halted,executed_steps"


def write_trace_csv(path, results):
    """``results``: iterable of (task_id, HaltingResult), written in order."""
    with open(path, "w") as fh:
        fh.write(TRACE_CSV_HEADER + "\n")
        for task_id, result in results:
            for row in trace_csv_rows(task_id, result):
                fh.write(row + "\n")


def write_attention_bundle(blob_path, index_path, results):
    """Raw little-endian float32 attention maps plus a JSON index."""
    index = {"schema_version": TRACE_SCHEMA_VERSION, "entries": []}
    offset = 0
    with open(blob_path, "wb") as blob:
        for task_id, result in results:
            for trace in result.traces:
                if trace.attention_maps is None:
                    continue
                data = trace.attention_maps.astype("<f4").tobytes()
                blob.write(data)
                index["entries"].append({
                    "task_id": task_id, "step": trace.t, "offset": offset,
                    "shape": list(trace.attention_maps.shape),
                })
                offset += len(data)
    with open(index_path, "w") as fh:
        json.dump(index, fh, sort_keys=True, indent=2)
        fh.write("\n")
