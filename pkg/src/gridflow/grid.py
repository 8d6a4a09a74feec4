"""Sudoku domain core: discrete grids, validity, and the discrete/relaxed encoding.

A grid is 81 cells in row-major order with digits 0-9 (0 = blank). The
continuous relaxation is an 81x9 real array of per-cell digit logits; batches
stack along a leading axis. Decoding is a per-cell argmax with ties broken
toward the lowest digit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ParseError

__all__ = [
    "DigitGrid",
    "ROW_OF",
    "COL_OF",
    "BOX_OF",
    "UNIT_CELLS",
    "box_index",
    "is_valid",
    "count_violations",
    "count_violations_batch",
    "encode_one_hot",
    "decode_argmax",
    "decode_argmax_batch",
]

ROW_OF = np.arange(81) // 9
COL_OF = np.arange(81) % 9
BOX_OF = 3 * (ROW_OF // 3) + COL_OF // 3

# 27 units x 9 member cells: rows 0-8, columns 9-17, boxes 18-26.
UNIT_CELLS = np.concatenate(
    [
        np.stack([np.flatnonzero(ROW_OF == i) for i in range(9)]),
        np.stack([np.flatnonzero(COL_OF == i) for i in range(9)]),
        np.stack([np.flatnonzero(BOX_OF == i) for i in range(9)]),
    ]
)


def box_index(row: int, col: int) -> int:
    """Index of the 3x3 box containing (row, col), both in 0..8."""
    if not (0 <= row <= 8 and 0 <= col <= 8):
        raise ValueError(f"cell position out of range: ({row}, {col})")
    return 3 * (row // 3) + col // 3


@dataclass(frozen=True)
class DigitGrid:
    """81 digits in 0..9, row-major; 0 marks a blank cell."""

    cells: np.ndarray

    def __post_init__(self):
        cells = np.asarray(self.cells, dtype=np.int64)
        if cells.shape != (81,):
            raise ValueError(f"grid must have 81 cells, got shape {cells.shape}")
        if cells.min() < 0 or cells.max() > 9:
            raise ValueError("cell values must be in 0..9")
        cells.setflags(write=False)
        object.__setattr__(self, "cells", cells)

    @property
    def is_complete(self) -> bool:
        return bool((self.cells > 0).all())

    @property
    def n_clues(self) -> int:
        return int((self.cells > 0).sum())

    @classmethod
    def from_line(cls, line: str, lineno: int | None = None) -> "DigitGrid":
        line = line.rstrip("\n")
        if len(line) != 81:
            raise ParseError(f"expected 81 characters, got {len(line)}", line=lineno)
        if not line.isdigit():
            bad = next(c for c in line if not c.isdigit())
            raise ParseError(f"invalid character {bad!r}", line=lineno)
        return cls(np.frombuffer(line.encode("ascii"), dtype=np.uint8) - ord("0"))

    def to_line(self) -> str:
        return "".join(chr(ord("0") + d) for d in self.cells)

    def render(self) -> str:
        """9x9 debug view with dots for blanks."""
        rows = []
        for r in range(9):
            row = self.cells[9 * r : 9 * r + 9]
            rows.append(" ".join("." if d == 0 else str(d) for d in row))
        return "\n".join(rows)

    def __eq__(self, other):
        return isinstance(other, DigitGrid) and bool((self.cells == other.cells).all())

    def __hash__(self):
        return hash(self.cells.tobytes())


def count_violations_batch(digits: np.ndarray) -> np.ndarray:
    """Total duplicate count over all 27 units for each grid in a (N, 81) batch.

    Per unit, each digit contributes max(count - 1, 0); blanks (0) are ignored.
    """
    digits = np.asarray(digits)
    if digits.ndim == 1:
        digits = digits[None, :]
    units = digits[:, UNIT_CELLS]  # (N, 27, 9)
    # Histogram digits 0..9 per unit via one-hot summation.
    counts = (units[..., None] == np.arange(10)).sum(axis=2)
    dup = np.maximum(counts[..., 1:] - 1, 0).sum(axis=(1, 2))
    return dup


def count_violations(g: DigitGrid) -> tuple[int, float]:
    """(total duplicates over 27 units, per-unit mean). Requires a complete grid."""
    if not g.is_complete:
        raise ValueError("violation counting is defined on complete grids only")
    total = int(count_violations_batch(g.cells[None, :])[0])
    return total, total / 27.0


def is_valid(g: DigitGrid) -> bool:
    """True iff the grid is complete and all 27 units hold digits 1-9 exactly once."""
    if not g.is_complete:
        return False
    return int(count_violations_batch(g.cells[None, :])[0]) == 0


def encode_one_hot(g: DigitGrid) -> np.ndarray:
    """Complete grid -> (81, 9) one-hot logits; digit d maps to index d-1."""
    if not g.is_complete:
        raise ValueError("cannot one-hot encode a grid with blank cells")
    out = np.zeros((81, 9), dtype=np.float64)
    out[np.arange(81), g.cells - 1] = 1.0
    return out


def decode_argmax_batch(x: np.ndarray) -> np.ndarray:
    """(..., 81, 9) logits -> (..., 81) digits via per-cell argmax.

    Ties break toward the lowest digit (numpy argmax takes the first maximum).
    """
    x = np.asarray(x)
    if x.shape[-2:] != (81, 9):
        raise ValueError(f"expected trailing shape (81, 9), got {x.shape}")
    if not np.isfinite(x).all():
        raise NumericError("non-finite entries in relaxed state")
    return np.argmax(x, axis=-1) + 1


def decode_argmax(x: np.ndarray) -> DigitGrid:
    """(81, 9) logits -> DigitGrid."""
    return DigitGrid(decode_argmax_batch(np.asarray(x)))
