import numpy as np
import pytest

from gridflow.errors import NumericError, ParseError
from gridflow.grid import (
    BOX_OF,
    DigitGrid,
    box_index,
    count_violations,
    count_violations_batch,
    decode_argmax,
    decode_argmax_batch,
    encode_one_hot,
    is_valid,
)

from conftest import canonical_cells


def brute_force_valid(cells) -> bool:
    cells = np.asarray(cells).reshape(9, 9)
    if (cells < 1).any():
        return False
    for i in range(9):
        if sorted(cells[i, :]) != list(range(1, 10)):
            return False
        if sorted(cells[:, i]) != list(range(1, 10)):
            return False
    for br in range(3):
        for bc in range(3):
            box = cells[3 * br : 3 * br + 3, 3 * bc : 3 * bc + 3].ravel()
            if sorted(box) != list(range(1, 10)):
                return False
    return True


class TestBoxIndex:
    def test_corner_center_derived(self):
        assert box_index(0, 0) == 0
        assert box_index(4, 4) == 4
        assert box_index(8, 2) == 6

    def test_partition(self):
        counts = np.bincount([box_index(r, c) for r in range(9) for c in range(9)])
        assert counts.tolist() == [9] * 9
        assert np.array_equal(BOX_OF, [box_index(r, c) for r in range(9) for c in range(9)])

    @pytest.mark.parametrize("pos", [(-1, 0), (0, 9), (9, 0), (3, -2)])
    def test_out_of_range(self, pos):
        with pytest.raises(ValueError):
            box_index(*pos)


class TestDigitGrid:
    def test_cell_range_enforced(self):
        with pytest.raises(ValueError):
            DigitGrid(np.full(81, 10))
        with pytest.raises(ValueError):
            DigitGrid(np.full(80, 1))

    def test_line_round_trip(self, canonical_grid):
        line = canonical_grid.to_line()
        assert len(line) == 81
        assert DigitGrid.from_line(line) == canonical_grid

    def test_from_line_length_error(self):
        with pytest.raises(ParseError, match="line 1"):
            DigitGrid.from_line("1" * 80, lineno=1)

    def test_from_line_char_error(self):
        with pytest.raises(ParseError):
            DigitGrid.from_line("x" * 81)

    def test_render_shape(self, canonical_grid):
        lines = canonical_grid.render().splitlines()
        assert len(lines) == 9


class TestIsValid:
    def test_canonical_matches_brute_force(self, canonical_grid):
        assert is_valid(canonical_grid)
        assert brute_force_valid(canonical_grid.cells)

    def test_incomplete_false(self):
        assert not is_valid(DigitGrid(np.zeros(81, dtype=int)))

    def test_row_duplicate_false(self, canonical_grid):
        cells = canonical_grid.cells.copy()
        cells[1] = cells[0]
        assert not is_valid(DigitGrid(cells))

    def test_agrees_with_brute_force_on_random_grids(self, rng):
        for _ in range(50):
            cells = rng.integers(1, 10, size=81)
            assert is_valid(DigitGrid(cells)) == brute_force_valid(cells)


class TestCountViolations:
    def test_valid_grid_zero(self, canonical_grid):
        assert count_violations(canonical_grid) == (0, 0.0)

    def test_all_ones(self):
        total, mean = count_violations(DigitGrid(np.ones(81, dtype=int)))
        assert total == 216
        assert mean == pytest.approx(8.0)

    def test_single_duplicate_touches_multiple_units(self, canonical_grid):
        cells = canonical_grid.cells.copy()
        cells[1] = cells[0]
        total, _ = count_violations(DigitGrid(cells))
        assert total >= 2

    def test_incomplete_raises(self):
        with pytest.raises(ValueError):
            count_violations(DigitGrid(np.zeros(81, dtype=int)))

    def test_relabel_invariance(self, canonical_grid, rng):
        base = canonical_grid.cells.copy()
        base[5] = base[4]  # introduce violations
        total0 = count_violations_batch(base)[0]
        for _ in range(10):
            perm = rng.permutation(np.arange(1, 10))
            relabeled = perm[base - 1]
            assert count_violations_batch(relabeled)[0] == total0

    def test_validity_iff_zero_total(self, rng):
        from gridflow.dataset import generate_complete

        for seed in range(5):
            g = generate_complete(seed)
            assert count_violations(g) == (0, 0.0)
            cells = rng.integers(1, 10, size=81)
            g2 = DigitGrid(cells)
            assert is_valid(g2) == (count_violations(g2)[0] == 0)


class TestEncodingDecoding:
    def test_one_hot_rows(self, canonical_grid):
        x = encode_one_hot(canonical_grid)
        assert x.shape == (81, 9)
        assert np.array_equal(x.sum(axis=1), np.ones(81))
        assert np.array_equal(np.argmax(x, axis=1) + 1, canonical_grid.cells)
        first = np.zeros(9)
        first[canonical_grid.cells[0] - 1] = 1.0
        assert np.array_equal(x[0], first)

    def test_blank_cell_rejected(self):
        with pytest.raises(ValueError):
            encode_one_hot(DigitGrid(np.zeros(81, dtype=int)))

    def test_round_trip_corpus(self):
        from gridflow.dataset import generate_complete

        for seed in range(20):
            g = generate_complete(seed)
            assert decode_argmax(encode_one_hot(g)) == g

    def test_tie_breaks_to_lowest_digit(self):
        assert np.array_equal(decode_argmax(np.zeros((81, 9))).cells, np.ones(81))
        logits = np.zeros((81, 9))
        logits[:, 1] = 0.9
        logits[:, 0] = 0.1
        assert np.array_equal(decode_argmax(logits).cells, np.full(81, 2))

    def test_non_finite_rejected(self):
        bad = np.zeros((81, 9))
        bad[3, 4] = np.nan
        with pytest.raises(NumericError):
            decode_argmax(bad)

    def test_batch_decode_shape(self, rng):
        x = rng.standard_normal((7, 81, 9))
        d = decode_argmax_batch(x)
        assert d.shape == (7, 81)
        assert d.min() >= 1 and d.max() <= 9
        with pytest.raises(ValueError):
            decode_argmax_batch(rng.standard_normal((7, 81, 8)))
