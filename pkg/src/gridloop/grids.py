"""Color grids and their symmetry group.

A grid is a small 2-D array of integer color classes in ``0..n_colors-1``
(background is color 0 by convention). The symmetry group used for data
augmentation and test-time voting is the dihedral group of the square
crossed with background-preserving color permutations: an
:class:`Augmentation` rotates counter-clockwise by ``rotation`` quarter
turns, then optionally flips left-right, then relabels colors.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

N_COLORS = 10
BACKGROUND = 0


class GridError(ValueError):
    """Raised for grids that violate the shape or color-range contract."""


def validate_grid(grid: np.ndarray, n_colors: int = N_COLORS) -> np.ndarray:
    grid = np.asarray(grid)
    if grid.ndim != 2 or grid.size == 0:
        raise GridError(f"grid must be non-empty 2-D, got shape {grid.shape}")
    if not np.issubdtype(grid.dtype, np.integer):
        raise GridError(f"grid must be integer-typed, got {grid.dtype}")
    if grid.min() < 0 or grid.max() >= n_colors:
        raise GridError(f"grid colors must lie in [0, {n_colors}), got range "
                        f"[{grid.min()}, {grid.max()}]")
    return grid


@dataclass(frozen=True)
class Augmentation:
    """rotate CCW by ``rotation`` quarter turns, then flip, then recolor."""

    rotation: int = 0
    flip: bool = False
    color_perm: tuple = tuple(range(N_COLORS))

    def __post_init__(self):
        if self.rotation not in (0, 1, 2, 3):
            raise GridError(f"rotation must be in 0..3, got {self.rotation}")
        if sorted(self.color_perm) != list(range(N_COLORS)):
            raise GridError("color_perm must permute 0..9")
        if self.color_perm[0] != BACKGROUND:
            raise GridError("color_perm must fix the background color 0")

    @property
    def is_identity(self) -> bool:
        return (self.rotation == 0 and not self.flip
                and self.color_perm == tuple(range(N_COLORS)))

    def apply(self, grid: np.ndarray) -> np.ndarray:
        grid = validate_grid(grid)
        out = np.rot90(grid, self.rotation)
        if self.flip:
            out = np.fliplr(out)
        return np.asarray(self.color_perm, dtype=grid.dtype)[out]

    def invert(self) -> "Augmentation":
        if self.flip:
            rot = self.rotation  # fliplr then rot90^k undoes rot90^k then fliplr
        else:
            rot = (4 - self.rotation) % 4
        inv_perm = [0] * N_COLORS
        for i, p in enumerate(self.color_perm):
            inv_perm[p] = i
        return Augmentation(rot, self.flip, tuple(inv_perm))


def compose_augmentations(second: Augmentation, first: Augmentation) -> Augmentation:
    """The augmentation equivalent to applying ``first`` then ``second``."""
    if first.flip:
        rot = (first.rotation - second.rotation) % 4
    else:
        rot = (first.rotation + second.rotation) % 4
    flip = first.flip != second.flip
    perm = tuple(second.color_perm[first.color_perm[i]] for i in range(N_COLORS))
    return Augmentation(rot, flip, perm)


def identity_augmentation() -> Augmentation:
    return Augmentation()


def spatial_augmentations(rotations=(0, 1, 2, 3), allow_flip=True):
    """All distinct spatial elements for the allowed sub-group."""
    flips = (False, True) if allow_flip else (False,)
    return [Augmentation(r, f) for r, f in itertools.product(rotations, flips)]


def random_color_permutation(rng: np.random.Generator) -> tuple:
    perm = np.concatenate([[BACKGROUND], rng.permutation(np.arange(1, N_COLORS))])
    return tuple(int(p) for p in perm)


def sample_augmentation(rng: np.random.Generator, rotations=(0, 1, 2, 3),
                        allow_flip=True, allow_color_perm=True) -> Augmentation:
    rotation = int(rng.choice(np.asarray(rotations)))
    flip = bool(rng.integers(0, 2)) if allow_flip else False
    perm = (random_color_permutation(rng) if allow_color_perm
            else tuple(range(N_COLORS)))
    return Augmentation(rotation, flip, perm)


def grids_equal(a: np.ndarray, b: np.ndarray) -> bool:
    a, b = np.asarray(a), np.asarray(b)
    return a.shape == b.shape and bool(np.array_equal(a, b))
