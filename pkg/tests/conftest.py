import numpy as np
import pytest

from gridflow.grid import DigitGrid


def canonical_cells() -> np.ndarray:
    """The classic valid grid: cell (r, c) holds ((3r + r//3 + c) mod 9) + 1."""
    cells = np.empty(81, dtype=np.int64)
    for r in range(9):
        for c in range(9):
            cells[9 * r + c] = (3 * r + r // 3 + c) % 9 + 1
    return cells


@pytest.fixture
def canonical_grid() -> DigitGrid:
    return DigitGrid(canonical_cells())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
