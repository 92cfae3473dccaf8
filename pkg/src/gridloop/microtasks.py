"""Procedural grid puzzles and ARC-format task I/O.

Each micro-task family is a deterministic generator: ``generate_microtask``
is a pure function of ``(family, seed)``. A task carries a few demonstration
input/output pairs plus one or more query grids, all following the family's
rule exactly. Families declare which augmentations preserve their rule
(``FamilyTraits``), so augmentation-based adaptation never feeds the model a
transformed task that contradicts what it was trained on — gravity, for
instance, stops being gravity when the grid is rotated a quarter turn.

``parse_task``/``serialize_task`` speak the standard ARC JSON schema
(``{"train": [{"input", "output"}, ...], "test": [...]}``).
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np

from .grids import Augmentation, GridError, sample_augmentation, validate_grid

WALL_COLOR = 5
FILL_COLOR = 2
TRACE_COLOR = 3


class TaskError(ValueError):
    """Raised for malformed tasks: unknown family, bad JSON, ragged grids."""


@dataclass(frozen=True)
class FamilyTraits:
    """Which augmentations keep a family's rule intact."""

    rotations: Tuple[int, ...] = (0, 1, 2, 3)
    allow_flip: bool = True
    allow_color_perm: bool = True


@dataclass(frozen=True)
class TaskInstance:
    demos: tuple  # of (input, output) grid pairs
    queries: tuple  # of (input, expected-or-None) pairs
    family: Optional[str] = None
    seed: Optional[int] = None
    name: Optional[str] = None  # external identity, e.g. an ARC file stem

    def __post_init__(self):
        if not self.demos:
            raise TaskError("a task needs at least one demonstration pair")
        for inp, out in self.demos:
            validate_grid(inp), validate_grid(out)
        for inp, expected in self.queries:
            validate_grid(inp)
            if expected is not None:
                validate_grid(expected)

    @property
    def task_id(self) -> str:
        if self.name is not None:
            return self.name
        if self.family is None:
            return "task"
        return f"{self.family}-{self.seed}"

    @property
    def traits(self) -> FamilyTraits:
        if self.family is None or self.family not in FAMILY_TRAITS:
            return FamilyTraits()
        return FAMILY_TRAITS[self.family]


# ---------------------------------------------------------------------------
# family rules


def rule_identity(grid: np.ndarray) -> np.ndarray:
    return grid.copy()


def rule_color_swap(grid: np.ndarray, a: int, b: int) -> np.ndarray:
    out = grid.copy()
    out[grid == a] = b
    out[grid == b] = a
    return out


def rule_mirror_h(grid: np.ndarray) -> np.ndarray:
    return np.fliplr(grid).copy()


def rule_gravity(grid: np.ndarray) -> np.ndarray:
    """Nonzero cells fall to the bottom of their column, order preserved."""
    out = np.zeros_like(grid)
    h = grid.shape[0]
    for col in range(grid.shape[1]):
        stack = grid[:, col][grid[:, col] != 0]
        out[h - stack.size:, col] = stack
    return out


def rule_flood_fill(grid: np.ndarray) -> np.ndarray:
    """Fill the 4-connected empty region around the FILL_COLOR marker."""
    markers = np.argwhere(grid == FILL_COLOR)
    if markers.shape[0] != 1:
        raise TaskError(f"flood fill needs exactly one marker, got {markers.shape[0]}")
    out = grid.copy()
    h, w = grid.shape
    frontier = deque([tuple(markers[0])])
    while frontier:
        r, c = frontier.popleft()
        for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
            if 0 <= rr < h and 0 <= cc < w and out[rr, cc] == 0:
                out[rr, cc] = FILL_COLOR
                frontier.append((rr, cc))
    return out


def rule_border_trace(grid: np.ndarray) -> np.ndarray:
    """Empty cells 4-adjacent to any filled cell are marked TRACE_COLOR."""
    out = grid.copy()
    h, w = grid.shape
    filled = grid != 0
    for r in range(h):
        for c in range(w):
            if grid[r, c] != 0:
                continue
            for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
                if 0 <= rr < h and 0 <= cc < w and filled[rr, cc]:
                    out[r, c] = TRACE_COLOR
                    break
    return out


# ---------------------------------------------------------------------------
# generators

N_DEMOS = 3
MIN_SIZE, MAX_SIZE = 3, 6


def _grid_shape(rng):
    return int(rng.integers(MIN_SIZE, MAX_SIZE + 1)), int(rng.integers(MIN_SIZE, MAX_SIZE + 1))


def _sparse_grid(rng, palette, density=0.4, min_filled=2):
    h, w = _grid_shape(rng)
    grid = np.zeros((h, w), dtype=np.int64)
    mask = rng.random((h, w)) < density
    grid[mask] = rng.choice(palette, size=int(mask.sum()))
    while np.count_nonzero(grid) < min_filled:
        r, c = rng.integers(0, h), rng.integers(0, w)
        grid[r, c] = rng.choice(palette)
    return grid


def _gen_identity(rng):
    grids = [_sparse_grid(rng, np.arange(1, 10)) for _ in range(N_DEMOS + 1)]
    return grids, rule_identity


def _gen_color_swap(rng):
    a, b = rng.choice(np.arange(1, 10), size=2, replace=False)
    a, b = int(a), int(b)
    extra = int(rng.choice([c for c in range(1, 10) if c not in (a, b)]))
    grids = []
    for _ in range(N_DEMOS + 1):
        grid = _sparse_grid(rng, np.array([a, b, extra]), density=0.5)
        # the swapped pair must be visible in every grid
        flat = rng.permutation(grid.size)
        grid.reshape(-1)[flat[0]] = a
        grid.reshape(-1)[flat[1]] = b
        grids.append(grid)
    return grids, lambda g: rule_color_swap(g, a, b)


def _gen_mirror_h(rng):
    grids = [_sparse_grid(rng, np.arange(1, 10)) for _ in range(N_DEMOS + 1)]
    return grids, rule_mirror_h


def _gen_gravity(rng):
    grids = [_sparse_grid(rng, np.arange(1, 10), density=0.35) for _ in range(N_DEMOS + 1)]
    return grids, rule_gravity


def _gen_flood_fill(rng):
    grids = []
    for _ in range(N_DEMOS + 1):
        h, w = _grid_shape(rng)
        grid = np.zeros((h, w), dtype=np.int64)
        walls = rng.random((h, w)) < 0.3
        grid[walls] = WALL_COLOR
        empty = np.argwhere(grid == 0)
        if empty.shape[0] == 0:
            grid[0, 0] = 0
            empty = np.array([[0, 0]])
        r, c = empty[rng.integers(0, empty.shape[0])]
        grid[r, c] = FILL_COLOR
        grids.append(grid)
    return grids, rule_flood_fill


def _gen_border_trace(rng):
    palette = np.array([c for c in range(1, 10) if c != TRACE_COLOR])
    grids = [_sparse_grid(rng, palette, density=0.25) for _ in range(N_DEMOS + 1)]
    return grids, rule_border_trace


FAMILIES = ("IDENTITY", "COLOR_SWAP", "MIRROR_H", "GRAVITY", "FLOOD_FILL", "BORDER_TRACE")

_GENERATORS = {
    "IDENTITY": _gen_identity,
    "COLOR_SWAP": _gen_color_swap,
    "MIRROR_H": _gen_mirror_h,
    "GRAVITY": _gen_gravity,
    "FLOOD_FILL": _gen_flood_fill,
    "BORDER_TRACE": _gen_border_trace,
}

FAMILY_TRAITS = {
    "IDENTITY": FamilyTraits(),
    "COLOR_SWAP": FamilyTraits(),
    # mirroring commutes with half turns but not quarter turns
    "MIRROR_H": FamilyTraits(rotations=(0, 2)),
    # gravity has a fixed "down"
    "GRAVITY": FamilyTraits(rotations=(0,)),
    # wall/marker colors are part of the rule
    "FLOOD_FILL": FamilyTraits(allow_color_perm=False),
    "BORDER_TRACE": FamilyTraits(allow_color_perm=False),
}


def generate_microtask(family: str, seed: int) -> TaskInstance:
    """Deterministic task for ``(family, seed)``; a pure function."""
    if family not in _GENERATORS:
        raise TaskError(f"unknown micro-task family {family!r}; "
                        f"choose from {', '.join(FAMILIES)}")
    rng = np.random.default_rng([FAMILIES.index(family), int(seed)])
    grids, rule = _GENERATORS[family](rng)
    demos = tuple((g, rule(g)) for g in grids[:N_DEMOS])
    queries = ((grids[N_DEMOS], rule(grids[N_DEMOS])),)
    return TaskInstance(demos=demos, queries=queries, family=family, seed=int(seed))


# ---------------------------------------------------------------------------
# augmentation of whole tasks


def augment_task(task: TaskInstance, aug: Augmentation) -> TaskInstance:
    """Apply one augmentation to every grid in the task (inputs and outputs)."""
    demos = tuple((aug.apply(i), aug.apply(o)) for i, o in task.demos)
    queries = tuple((aug.apply(i), None if e is None else aug.apply(e))
                    for i, e in task.queries)
    return replace(task, demos=demos, queries=queries)


def sample_task_augmentation(task: TaskInstance, rng) -> Augmentation:
    """A random augmentation drawn from the task family's equivariance set."""
    traits = task.traits
    return sample_augmentation(rng, rotations=traits.rotations,
                               allow_flip=traits.allow_flip,
                               allow_color_perm=traits.allow_color_perm)


# ---------------------------------------------------------------------------
# ARC JSON and JSONL dataset I/O


def _grid_from_json(obj, path: str) -> np.ndarray:
    if not isinstance(obj, list) or not obj or not all(isinstance(r, list) for r in obj):
        raise TaskError(f"{path}: expected a non-empty list of rows")
    widths = {len(r) for r in obj}
    if len(widths) != 1 or 0 in widths:
        raise TaskError(f"{path}: ragged or empty rows")
    grid = np.asarray(obj, dtype=np.int64)
    try:
        return validate_grid(grid)
    except GridError as err:
        raise TaskError(f"{path}: {err}") from err


def parse_task(source, name: Optional[str] = None) -> TaskInstance:
    """Parse an ARC-schema task from bytes, text, or a parsed JSON object."""
    if isinstance(source, (bytes, str)):
        try:
            obj = json.loads(source)
        except json.JSONDecodeError as err:
            raise TaskError(f"malformed JSON: {err}") from err
    else:
        obj = source
    if not isinstance(obj, dict) or "train" not in obj:
        raise TaskError("task object must contain a 'train' array")
    demos = []
    for i, pair in enumerate(obj["train"]):
        demos.append((_grid_from_json(pair.get("input"), f"train[{i}].input"),
                      _grid_from_json(pair.get("output"), f"train[{i}].output")))
    queries = []
    for i, pair in enumerate(obj.get("test", [])):
        expected = pair.get("output")
        queries.append((_grid_from_json(pair.get("input"), f"test[{i}].input"),
                        None if expected is None
                        else _grid_from_json(expected, f"test[{i}].output")))
    return TaskInstance(demos=tuple(demos), queries=tuple(queries), name=name)


def serialize_task(task: TaskInstance) -> str:
    """Canonical ARC JSON for a task (sorted keys, no whitespace padding)."""
    obj = {
        "train": [{"input": i.tolist(), "output": o.tolist()} for i, o in task.demos],
        "test": [{"input": i.tolist(), **({} if e is None else {"output": e.tolist()})}
                 for i, e in task.queries],
    }
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def task_to_record(task: TaskInstance) -> str:
    """One JSONL dataset line with family/seed metadata."""
    obj = json.loads(serialize_task(task))
    obj["family"] = task.family
    obj["seed"] = task.seed
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def record_to_task(line: str) -> TaskInstance:
    obj = json.loads(line)
    task = parse_task(obj)
    return replace(task, family=obj.get("family"), seed=obj.get("seed"))
