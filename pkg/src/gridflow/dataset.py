"""Grid ingestion, deterministic splits, and a backtracking generator/solver.

The solver doubles as the correctness oracle for guided solving: any puzzle
we hand to a sampler has been checked satisfiable here first. File format is
one grid per line, 81 contiguous digit characters, newline-terminated.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .grid import BOX_OF, COL_OF, ROW_OF, DigitGrid, is_valid
from .rng import RngStream

# Plain-int position tables; the recursive solver is pure Python and numpy
# scalar indexing would dominate its runtime.
_ROW = tuple(int(v) for v in ROW_OF)
_COL = tuple(int(v) for v in COL_OF)
_BOX = tuple(int(v) for v in BOX_OF)

__all__ = [
    "Dataset",
    "load_grids",
    "load_puzzles",
    "save_grids",
    "backtracking_solve",
    "generate_complete",
    "make_puzzle",
    "split",
    "CLUE_TIERS",
]

# Clue-count conventions for experiment tiers (harness convention, not a
# property of any published benchmark): easy 38-45, medium 30-37, hard 23-29.
CLUE_TIERS = {"easy": (38, 45), "medium": (30, 37), "hard": (23, 29)}


@dataclass
class Dataset:
    grids: list[DigitGrid]
    source: str = ""
    split_seed: int = 0

    def __len__(self):
        return len(self.grids)

    def __iter__(self):
        return iter(self.grids)


def load_grids(path: str | os.PathLike) -> Dataset:
    """Load a solutions file; every line must parse and pass is_valid."""
    grids: list[DigitGrid] = []
    seen: set[DigitGrid] = set()
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            g = DigitGrid.from_line(line, lineno=lineno)
            if not is_valid(g):
                raise ValidationError("grid is not a valid Sudoku solution", line=lineno)
            if g in seen:
                raise ValidationError("duplicate grid", line=lineno)
            seen.add(g)
            grids.append(g)
    return Dataset(grids=grids, source=str(path))


def load_puzzles(path: str | os.PathLike) -> list[DigitGrid]:
    """Load a puzzles file; zeros (blanks) are permitted, validity is not checked."""
    puzzles: list[DigitGrid] = []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            puzzles.append(DigitGrid.from_line(line, lineno=lineno))
    return puzzles


def save_grids(grids, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for g in grids:
            fh.write(g.to_line() + "\n")


def _solve_recursive(cells, row_used, col_used, box_used, order, out, max_solutions):
    """Depth-first search with most-constrained-cell ordering.

    `order` provides the candidate digit preference (a permutation source or
    None for ascending). Mutates `cells` in place; appends completed copies
    to `out`. Returns True once max_solutions have been collected.
    """
    best_cell = -1
    best_mask = 0
    best_count = 10
    for i in range(81):
        if cells[i] != 0:
            continue
        mask = ~(row_used[_ROW[i]] | col_used[_COL[i]] | box_used[_BOX[i]]) & 0x1FF
        count = mask.bit_count()
        if count == 0:
            return False
        if count < best_count:
            best_cell, best_mask, best_count = i, mask, count
            if count == 1:
                break
    if best_cell == -1:
        out.append(cells.copy())
        return len(out) >= max_solutions

    r, c, b = _ROW[best_cell], _COL[best_cell], _BOX[best_cell]
    candidates = [d for d in range(1, 10) if best_mask >> (d - 1) & 1]
    if order is not None:
        order.shuffle(candidates)
    for d in candidates:
        bit = 1 << (d - 1)
        cells[best_cell] = d
        row_used[r] |= bit
        col_used[c] |= bit
        box_used[b] |= bit
        if _solve_recursive(cells, row_used, col_used, box_used, order, out, max_solutions):
            return True
        cells[best_cell] = 0
        row_used[r] &= ~bit
        col_used[c] &= ~bit
        box_used[b] &= ~bit
    return False


def backtracking_solve(p: DigitGrid, max_solutions: int = 1, _order=None) -> list[DigitGrid]:
    """Up to max_solutions completions of p, or [] if unsatisfiable."""
    if max_solutions < 1:
        raise ValueError("max_solutions must be positive")
    cells = [int(d) for d in p.cells]
    row_used = [0] * 9
    col_used = [0] * 9
    box_used = [0] * 9
    for i, d in enumerate(cells):
        if d == 0:
            continue
        bit = 1 << (d - 1)
        r, c, b = _ROW[i], _COL[i], _BOX[i]
        if (row_used[r] | col_used[c] | box_used[b]) & bit:
            return []  # clue contradiction
        row_used[r] |= bit
        col_used[c] |= bit
        box_used[b] |= bit
    out: list[list[int]] = []
    _solve_recursive(cells, row_used, col_used, box_used, _order, out, max_solutions)
    return [DigitGrid(np.array(sol)) for sol in out]


def generate_complete(seed: int) -> DigitGrid:
    """A valid complete grid, a deterministic function of the seed."""
    order = RngStream(seed, ("gen",)).generator()
    empty = DigitGrid(np.zeros(81, dtype=np.int64))
    solutions = backtracking_solve(empty, max_solutions=1, _order=order)
    return solutions[0]


def has_unique_solution(p: DigitGrid) -> bool:
    return len(backtracking_solve(p, max_solutions=2)) == 1


def make_puzzle(g: DigitGrid, n_clues: int, seed: int) -> DigitGrid:
    """Blank 81 - n_clues cells of a valid grid uniformly at random.

    The source grid remains a solution, so the puzzle is always satisfiable;
    uniqueness is not enforced (check has_unique_solution if needed).
    """
    if not 17 <= n_clues <= 81:
        raise ValueError(f"n_clues must be in 17..81, got {n_clues}")
    if not is_valid(g):
        raise ValueError("make_puzzle requires a valid complete grid")
    rng = RngStream(seed, ("puzzle",)).generator()
    blank = rng.choice(81, size=81 - n_clues, replace=False)
    cells = g.cells.copy()
    cells[blank] = 0
    return DigitGrid(cells)


def split(d: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Deterministic seeded shuffle then prefix split; partitions cover d."""
    if len(d) == 0:
        raise ValueError("cannot split an empty dataset")
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    rng = RngStream(seed, ("split",)).generator()
    perm = rng.permutation(len(d.grids))
    n_train = int(len(d.grids) * train_fraction)
    train = [d.grids[i] for i in perm[:n_train]]
    test = [d.grids[i] for i in perm[n_train:]]
    return (
        Dataset(train, source=f"{d.source}[train]", split_seed=seed),
        Dataset(test, source=f"{d.source}[test]", split_seed=seed),
    )
