"""Fixed-size canvas encoding for variable-size grids.

The model works on a fixed ``height x width`` canvas of class ids. A grid is
placed in the top-left corner and every cell outside it carries a dedicated
PAD class (``n_colors``), so the canvas has ``n_colors + 1`` output classes
and grid shape is recovered from the prediction itself: the decoded width is
the run of non-PAD cells along the top row, the height the run along the left
column. Demonstration pairs ride along as class arrays for the summarizer.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .grids import N_COLORS, validate_grid


class CapacityError(ValueError):
    """Raised when a grid does not fit on the canvas."""


@dataclass(frozen=True)
class CanvasSpec:
    height: int = 12
    width: int = 12
    n_task_tokens: int = 8
    n_colors: int = N_COLORS

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError("canvas must be at least 1x1")
        if self.n_task_tokens < 1:
            raise ValueError("need at least one task token")

    @property
    def n_cells(self) -> int:
        return self.height * self.width

    @property
    def pad_class(self) -> int:
        return self.n_colors

    @property
    def n_classes(self) -> int:
        """Output classes: the colors plus PAD."""
        return self.n_colors + 1

    @property
    def n_tokens(self) -> int:
        """Sequence length seen by the model: task tokens then image cells."""
        return self.n_task_tokens + self.n_cells


def encode_grid(grid: np.ndarray, spec: CanvasSpec) -> np.ndarray:
    """Flatten ``grid`` onto the canvas (row-major), PAD outside it."""
    grid = validate_grid(grid, spec.n_colors)
    h, w = grid.shape
    if h > spec.height or w > spec.width:
        raise CapacityError(f"grid {h}x{w} exceeds canvas "
                            f"{spec.height}x{spec.width}")
    classes = np.full((spec.height, spec.width), spec.pad_class, dtype=np.int64)
    classes[:h, :w] = grid
    return classes.reshape(-1)


def decode_grid(classes: np.ndarray, spec: CanvasSpec) -> np.ndarray:
    """Invert :func:`encode_grid` on a (possibly imperfect) class canvas.

    Shape comes from the top-left runs of non-PAD cells; stray PAD
    predictions inside the recovered rectangle are mapped to color 0. A
    canvas whose corner cell is PAD decodes to the 1x1 background grid.
    """
    canvas = np.asarray(classes).reshape(spec.height, spec.width)
    non_pad = canvas != spec.pad_class
    width = int(np.argmin(non_pad[0])) if not non_pad[0].all() else spec.width
    height = int(np.argmin(non_pad[:, 0])) if not non_pad[:, 0].all() else spec.height
    if width == 0 or height == 0:
        return np.zeros((1, 1), dtype=np.int64)
    grid = canvas[:height, :width].astype(np.int64)
    grid[grid == spec.pad_class] = 0
    return grid


def classes_from_probs(probs: np.ndarray) -> np.ndarray:
    """Hard class decisions from a (n_cells, n_classes) probability table.

    Ties resolve to the lowest class index, matching ``np.argmax``.
    """
    return np.argmax(probs, axis=1).astype(np.int64)


@dataclass
class Canvas:
    """One model-ready instance: query canvas, demo canvases, optional target."""

    spec: CanvasSpec
    image_classes: np.ndarray
    demo_classes: np.ndarray  # (n_demos, 2, n_cells); [:, 0] inputs, [:, 1] outputs
    targets: Optional[np.ndarray] = None
    query_height: int = 0
    query_width: int = 0

    def __post_init__(self):
        if self.image_classes.shape != (self.spec.n_cells,):
            raise CapacityError(f"image_classes must be ({self.spec.n_cells},), "
                                f"got {self.image_classes.shape}")
        if self.demo_classes.ndim != 3 or self.demo_classes.shape[1:] != (2, self.spec.n_cells):
            raise CapacityError(f"demo_classes must be (n_demos, 2, {self.spec.n_cells}), "
                                f"got {self.demo_classes.shape}")
        if self.targets is not None and self.targets.shape != (self.spec.n_cells,):
            raise CapacityError(f"targets must be ({self.spec.n_cells},), "
                                f"got {self.targets.shape}")

    @property
    def n_demos(self) -> int:
        return self.demo_classes.shape[0]


def encode_task(demos, query: np.ndarray, spec: CanvasSpec,
                target: Optional[np.ndarray] = None) -> Canvas:
    """Encode demonstration pairs and a query grid into one :class:`Canvas`."""
    if not demos:
        raise CapacityError("need at least one demonstration pair")
    demo_classes = np.stack([
        np.stack([encode_grid(inp, spec), encode_grid(out, spec)])
        for inp, out in demos
    ])
    query = validate_grid(query, spec.n_colors)
    return Canvas(
        spec=spec,
        image_classes=encode_grid(query, spec),
        demo_classes=demo_classes,
        targets=None if target is None else encode_grid(target, spec),
        query_height=query.shape[0],
        query_width=query.shape[1],
    )
