"""Bounding-box arithmetic on normalized image coordinates.

Boxes are ``(x1, y1, x2, y2)`` with the origin at the top-left corner, x growing
to the right and y growing downwards. All coordinates live in ``[0, 1]`` once a
box has been clamped; :func:`expand_box` may temporarily push them outside.

The visual encoder tiles the image into a :class:`PatchGrid`; patch ``(r, c)``
covers the half-open rectangle ``[c/cols, (c+1)/cols) x [r/rows, (r+1)/rows)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class GeometryError(ValueError):
    """Raised for invalid boxes, grids or expansion parameters."""


@dataclass(frozen=True)
class NormBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) for v in coords):
            raise GeometryError(f"non-finite box coordinates: {coords}")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise GeometryError(f"box corners out of order: {coords}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x1 + self.x2) / 2, (self.y1 + self.y2) / 2)

    def in_unit_square(self) -> bool:
        return 0.0 <= self.x1 and 0.0 <= self.y1 and self.x2 <= 1.0 and self.y2 <= 1.0

    def contains(self, other: NormBox) -> bool:
        return (
            self.x1 <= other.x1
            and self.y1 <= other.y1
            and other.x2 <= self.x2
            and other.y2 <= self.y2
        )

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def to_json(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    @classmethod
    def from_json(cls, data) -> NormBox:
        if len(data) != 4:
            raise GeometryError(f"expected 4 coordinates, got {len(data)}")
        return cls(*(float(v) for v in data))


FULL_IMAGE = NormBox(0.0, 0.0, 1.0, 1.0)


@dataclass(frozen=True)
class PatchGrid:
    rows: int
    cols: int

    def __post_init__(self) -> None:
        if int(self.rows) != self.rows or int(self.cols) != self.cols:
            raise GeometryError("grid dimensions must be integers")
        if self.rows < 1 or self.cols < 1:
            raise GeometryError(f"grid must be at least 1x1, got {self.rows}x{self.cols}")

    @property
    def n_tokens(self) -> int:
        return self.rows * self.cols

    def patch_rect(self, row: int, col: int) -> NormBox:
        """Normalized rectangle covered by patch ``(row, col)``."""
        if not (0 <= row < self.rows and 0 <= col < self.cols):
            raise GeometryError(f"patch ({row}, {col}) outside {self.rows}x{self.cols} grid")
        return NormBox(col / self.cols, row / self.rows, (col + 1) / self.cols, (row + 1) / self.rows)

    def index(self, row: int, col: int) -> int:
        return row * self.cols + col

    def __str__(self) -> str:
        return f"{self.rows}x{self.cols}"

    @classmethod
    def parse(cls, text: str) -> PatchGrid:
        """Parse ``"RxC"`` (or a single ``"N"`` for a square grid)."""
        parts = text.lower().split("x")
        try:
            if len(parts) == 1:
                return cls(int(parts[0]), int(parts[0]))
            if len(parts) == 2:
                return cls(int(parts[0]), int(parts[1]))
        except ValueError:
            pass
        raise GeometryError(f"cannot parse grid {text!r}; expected e.g. '4x4'")


@dataclass(frozen=True, eq=False)
class TokenMask:
    """Binary mask over the visual-token grid, row-major."""

    grid: PatchGrid
    bits: np.ndarray

    def __post_init__(self) -> None:
        bits = np.array(self.bits, dtype=bool).reshape(-1)
        if bits.size != self.grid.n_tokens:
            raise GeometryError(f"mask has {bits.size} bits, grid {self.grid} needs {self.grid.n_tokens}")
        bits.flags.writeable = False
        object.__setattr__(self, "bits", bits)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TokenMask):
            return NotImplemented
        return self.grid == other.grid and bool(np.array_equal(self.bits, other.bits))

    def __hash__(self) -> int:
        return hash((self.grid, self.bits.tobytes()))

    @property
    def cardinality(self) -> int:
        return int(self.bits.sum())

    def bit(self, row: int, col: int) -> bool:
        return bool(self.bits[self.grid.index(row, col)])

    def as_grid(self) -> np.ndarray:
        return self.bits.reshape(self.grid.rows, self.grid.cols)

    def to_text(self) -> str:
        """One line per grid row of ``0``/``1`` characters."""
        return "\n".join("".join("1" if b else "0" for b in row) for row in self.as_grid())

    def to_json(self) -> dict:
        return {
            "rows": self.grid.rows,
            "cols": self.grid.cols,
            "bits": "".join("1" if b else "0" for b in self.bits),
        }

    @classmethod
    def from_json(cls, data: dict) -> TokenMask:
        bits = data["bits"]
        if set(bits) - {"0", "1"}:
            raise GeometryError("mask bit string may only contain '0' and '1'")
        return cls(PatchGrid(int(data["rows"]), int(data["cols"])), np.array([c == "1" for c in bits], dtype=bool))

    @classmethod
    def full(cls, grid: PatchGrid) -> TokenMask:
        return cls(grid, np.ones(grid.n_tokens, dtype=bool))

    @classmethod
    def empty(cls, grid: PatchGrid) -> TokenMask:
        return cls(grid, np.zeros(grid.n_tokens, dtype=bool))


def expand_box(box: NormBox, alpha: float) -> NormBox:
    """Scale width and height by ``alpha`` around the box center.

    The result may extend past the image; see :func:`clamp_box`.
    """
    if not math.isfinite(alpha) or alpha <= 0:
        raise GeometryError(f"alpha must be a positive finite number, got {alpha}")
    cx, cy = box.center
    half_w = box.width / 2 * alpha
    half_h = box.height / 2 * alpha
    return NormBox(cx - half_w, cy - half_h, cx + half_w, cy + half_h)


def _shift_into_unit(lo: float, hi: float) -> tuple[float, float]:
    extent = hi - lo
    if extent >= 1.0:
        return 0.0, 1.0
    if lo < 0.0:
        return 0.0, extent
    if hi > 1.0:
        return 1.0 - extent, 1.0
    return lo, hi


def clamp_box(box: NormBox) -> NormBox:
    """Translate ``box`` by the smallest shift that puts it inside the image.

    Width and height are kept; an axis longer than the image is set to ``[0, 1]``.
    """
    x1, x2 = _shift_into_unit(box.x1, box.x2)
    y1, y2 = _shift_into_unit(box.y1, box.y2)
    return NormBox(x1, y1, x2, y2)


def _center_index(value: float, n: int) -> int:
    # half-open cells [i/n, (i+1)/n); nudge floor() against rounding at cell edges
    i = min(max(int(math.floor(value * n)), 0), n - 1)
    while i > 0 and value < i / n:
        i -= 1
    while i < n - 1 and value >= (i + 1) / n:
        i += 1
    return i


def box_to_mask(box: NormBox, grid: PatchGrid) -> TokenMask:
    """Rasterize ``box`` onto ``grid``.

    A patch is set when its rectangle overlaps the box with positive area. A
    zero-area box sets exactly the patch containing its center, so the mask is
    never empty.
    """
    if not box.in_unit_square():
        raise GeometryError(f"box {box.as_tuple()} is not inside the unit square")
    if box.width <= 0 or box.height <= 0:
        cx, cy = box.center
        bits = np.zeros(grid.n_tokens, dtype=bool)
        bits[grid.index(_center_index(cy, grid.rows), _center_index(cx, grid.cols))] = True
        return TokenMask(grid, bits)

    cols = np.arange(grid.cols)
    rows = np.arange(grid.rows)
    col_hit = (cols / grid.cols < box.x2) & ((cols + 1) / grid.cols > box.x1)
    row_hit = (rows / grid.rows < box.y2) & ((rows + 1) / grid.rows > box.y1)
    return TokenMask(grid, np.outer(row_hit, col_hit))
