"""Exact geometry between pixel-space bounding boxes and the patch-token grid.

All pixel rectangles are half-open: a box (x_min, y_min, x_max, y_max) covers
pixels p with x_min <= p.x < x_max and y_min <= p.y < y_max. Half-open
conventions make every boundary tie deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import (
    EmptyAnnotationError,
    IndexOutOfRangeError,
    NonDivisibleError,
)

OVERLAP_ANY = "any"
OVERLAP_CENTER = "center"


@dataclass(frozen=True)
class TokenGrid:
    """Row-major patch-token index space bound to a pixel image."""

    image_width: int
    image_height: int
    patch_size: int
    n_rows: int
    n_cols: int
    n_tokens: int

    def row_col(self, k: int) -> tuple[int, int]:
        if not 0 <= k < self.n_tokens:
            raise IndexOutOfRangeError(f"token index {k} outside [0, {self.n_tokens})")
        return divmod(k, self.n_cols)

    def token_index(self, row: int, col: int) -> int:
        if not (0 <= row < self.n_rows and 0 <= col < self.n_cols):
            raise IndexOutOfRangeError(f"(row={row}, col={col}) outside grid")
        return row * self.n_cols + col


@dataclass(frozen=True)
class BoundingBox:
    """Half-open pixel rectangle."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self) -> None:
        if self.x_min >= self.x_max or self.y_min >= self.y_max:
            raise ValueError(f"degenerate box {self.astuple()}")

    def astuple(self) -> tuple[int, int, int, int]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def clip(self, grid: TokenGrid) -> "BoundingBox | None":
        """Clip to image bounds; None when nothing remains."""
        x0 = max(self.x_min, 0)
        y0 = max(self.y_min, 0)
        x1 = min(self.x_max, grid.image_width)
        y1 = min(self.y_max, grid.image_height)
        if x0 >= x1 or y0 >= y1:
            return None
        return BoundingBox(x0, y0, x1, y1)


@dataclass(frozen=True)
class TokenPartition:
    """Disjoint, exhaustive split of token indices into in/out sets."""

    b_in: frozenset[int]
    b_out: frozenset[int]
    grid: TokenGrid

    def __post_init__(self) -> None:
        if self.b_in & self.b_out:
            raise ValueError("b_in and b_out overlap")
        if len(self.b_in) + len(self.b_out) != self.grid.n_tokens:
            raise ValueError("partition does not cover the grid")

    @property
    def n_in(self) -> int:
        return len(self.b_in)

    @property
    def n_out(self) -> int:
        return len(self.b_out)

    @classmethod
    def from_b_in(cls, grid: TokenGrid, b_in: Iterable[int]) -> "TokenPartition":
        inside = frozenset(b_in)
        for k in inside:
            if not 0 <= k < grid.n_tokens:
                raise IndexOutOfRangeError(f"token index {k} outside [0, {grid.n_tokens})")
        outside = frozenset(range(grid.n_tokens)) - inside
        return cls(b_in=inside, b_out=outside, grid=grid)


def build_grid(image_width: int, image_height: int, patch_size: int) -> TokenGrid:
    """Bind an image of the given size to its patch-token grid.

    Raises NonDivisibleError when the patch size does not evenly divide both
    dimensions; resizing is the caller's responsibility.
    """
    if image_width <= 0 or image_height <= 0 or patch_size <= 0:
        raise ValueError("image dimensions and patch size must be positive")
    if image_width % patch_size or image_height % patch_size:
        raise NonDivisibleError(
            f"patch size {patch_size} does not divide {image_width}x{image_height}"
        )
    n_cols = image_width // patch_size
    n_rows = image_height // patch_size
    return TokenGrid(
        image_width=image_width,
        image_height=image_height,
        patch_size=patch_size,
        n_rows=n_rows,
        n_cols=n_cols,
        n_tokens=n_rows * n_cols,
    )


def token_rect(grid: TokenGrid, k: int) -> BoundingBox:
    """Half-open pixel rectangle occupied by token k."""
    row, col = grid.row_col(k)
    p = grid.patch_size
    return BoundingBox(col * p, row * p, (col + 1) * p, (row + 1) * p)


def _cols_overlapping(box: BoundingBox, grid: TokenGrid) -> range:
    p = grid.patch_size
    first = max(0, box.x_min // p)
    last = min(grid.n_cols - 1, (box.x_max - 1) // p)
    return range(first, last + 1)


def _rows_overlapping(box: BoundingBox, grid: TokenGrid) -> range:
    p = grid.patch_size
    first = max(0, box.y_min // p)
    last = min(grid.n_rows - 1, (box.y_max - 1) // p)
    return range(first, last + 1)


def _center_in_box(box: BoundingBox, grid: TokenGrid, row: int, col: int) -> bool:
    # Doubled coordinates keep the half-pixel center exact in integer math.
    p = grid.patch_size
    cx2 = 2 * col * p + p
    cy2 = 2 * row * p + p
    return (2 * box.x_min <= cx2 < 2 * box.x_max) and (2 * box.y_min <= cy2 < 2 * box.y_max)


def bbox_to_partition(
    grid: TokenGrid,
    boxes: Sequence[BoundingBox],
    overlap_rule: str = OVERLAP_ANY,
) -> TokenPartition:
    """Partition tokens by membership in the union of the given boxes.

    Under the default "any" rule a token joins b_in when its rectangle has a
    positive-area intersection with any box; under "center" its center pixel
    must lie inside a box. Boxes fully outside the image are dropped;
    EmptyAnnotationError when none survive.
    """
    if overlap_rule not in (OVERLAP_ANY, OVERLAP_CENTER):
        raise ValueError(f"unknown overlap rule {overlap_rule!r}")
    if not boxes:
        raise EmptyAnnotationError("no bounding boxes supplied")
    clipped = [c for c in (box.clip(grid) for box in boxes) if c is not None]
    if not clipped:
        raise EmptyAnnotationError("all bounding boxes fall outside the image")

    b_in: set[int] = set()
    for box in clipped:
        for row in _rows_overlapping(box, grid):
            for col in _cols_overlapping(box, grid):
                if overlap_rule == OVERLAP_CENTER and not _center_in_box(box, grid, row, col):
                    continue
                b_in.add(row * grid.n_cols + col)
    return TokenPartition.from_b_in(grid, b_in)


def coverage(partition: TokenPartition) -> int:
    """Number of tokens inside the annotated region."""
    return partition.n_in
