import numpy as np
import pytest

from gridflow.dataset import generate_complete, make_puzzle
from gridflow.exact_oracle import MixtureOracle
from gridflow.grid import DigitGrid, is_valid
from gridflow.guided import (
    GuidedSpec,
    RunStats,
    SolveConfig,
    efficiency,
    guided_step_hook,
    hard_clamp,
    soft_inject,
    solve,
)
from gridflow.rng import RngStream
from gridflow.samplers import FieldSource, SamplerConfig
from gridflow.schedule import Schedule

LIN = Schedule("linear")
COS = Schedule("cosine")


@pytest.fixture(scope="module")
def solution():
    return generate_complete(77)


@pytest.fixture(scope="module")
def puzzle(solution):
    return make_puzzle(solution, 35, seed=3)


@pytest.fixture(scope="module")
def oracle(solution):
    others = [generate_complete(s) for s in range(4)]
    return MixtureOracle([solution] + others)


class TestSpec:
    def test_from_puzzle(self, puzzle):
        spec = GuidedSpec.from_puzzle(puzzle)
        assert spec.n_clues == 35
        idx = np.flatnonzero(spec.mask)
        assert np.array_equal(np.argmax(spec.z_given[idx], axis=1) + 1, puzzle.cells[idx])
        assert np.all(spec.z_given[~spec.mask] == 0.0)


class TestClamping:
    def test_empty_mask_is_identity(self, rng):
        spec = GuidedSpec(z_given=np.zeros((81, 9)), mask=np.zeros(81, bool))
        x = rng.standard_normal((2, 81, 9))
        assert np.array_equal(hard_clamp(x, spec), x)

    def test_full_mask_returns_given(self, solution):
        spec = GuidedSpec.from_puzzle(solution)  # complete grid: all clues
        x = np.random.default_rng(0).standard_normal((3, 81, 9))
        out = hard_clamp(x, spec)
        assert np.allclose(out, np.broadcast_to(spec.z_given, out.shape))

    def test_idempotent(self, puzzle, rng):
        spec = GuidedSpec.from_puzzle(puzzle)
        x = rng.standard_normal((2, 81, 9))
        once = hard_clamp(x, spec)
        assert np.array_equal(hard_clamp(once, spec), once)

    def test_input_not_mutated(self, puzzle, rng):
        spec = GuidedSpec.from_puzzle(puzzle)
        x = rng.standard_normal((2, 81, 9))
        x0 = x.copy()
        hard_clamp(x, spec)
        assert np.array_equal(x, x0)


class TestSoftInject:
    def test_free_cells_bit_identical(self, puzzle, rng):
        spec = GuidedSpec.from_puzzle(puzzle)
        x = rng.standard_normal((2, 81, 9))
        out = soft_inject(x, spec, 0.5, RngStream(1), LIN)
        free = ~spec.mask
        assert np.array_equal(out[:, free, :], x[:, free, :])

    def test_near_end_approx_given(self, puzzle, rng):
        spec = GuidedSpec.from_puzzle(puzzle)
        x = rng.standard_normal((1, 81, 9))
        out = soft_inject(x, spec, 1 - 1e-4, RngStream(2), LIN)
        idx = spec.mask
        assert np.abs(out[0, idx] - spec.z_given[idx]).max() <= 1e-3

    def test_t0_is_pure_noise(self, puzzle, rng):
        spec = GuidedSpec.from_puzzle(puzzle)
        x = np.zeros((200, 81, 9))
        out = soft_inject(x, spec, 0.0, RngStream(3), LIN)
        vals = out[:, spec.mask, :].ravel()
        assert abs(vals.mean()) < 0.05
        assert vals.std() == pytest.approx(1.0, rel=0.05)

    def test_fresh_noise_per_call(self, puzzle, rng):
        spec = GuidedSpec.from_puzzle(puzzle)
        x = rng.standard_normal((1, 81, 9))
        gen = RngStream(4).generator()
        a = soft_inject(x, spec, 0.3, gen, LIN)
        b = soft_inject(x, spec, 0.3, gen, LIN)
        assert not np.array_equal(a[:, spec.mask], b[:, spec.mask])


class TestHook:
    def test_tau_zero_always_hard(self, puzzle):
        spec = GuidedSpec.from_puzzle(puzzle, tau=0.0)
        hook = guided_step_hook(spec, LIN)
        gen = RngStream(5).generator()
        x = np.random.default_rng(1).standard_normal((1, 81, 9))
        for t in (1e-4, 0.5, 1 - 1e-4):
            out = hook(x, t, gen)
            assert np.allclose(out[0, spec.mask], spec.z_given[spec.mask])

    def test_tau_one_always_soft(self, puzzle):
        spec = GuidedSpec.from_puzzle(puzzle, tau=1.0)
        hook = guided_step_hook(spec, LIN)
        gen = RngStream(6).generator()
        x = np.zeros((1, 81, 9))
        out = hook(x, 0.5, gen)
        # soft injection at t=0.5 leaves noise, not exact one-hots
        assert not np.allclose(out[0, spec.mask], spec.z_given[spec.mask])

    def test_threshold_split(self, puzzle):
        spec = GuidedSpec.from_puzzle(puzzle, tau=0.5)
        hook = guided_step_hook(spec, LIN)
        gen = RngStream(7).generator()
        x = np.zeros((1, 81, 9))
        hard = hook(x, 0.51, gen)
        assert np.allclose(hard[0, spec.mask], spec.z_given[spec.mask])
        soft = hook(x, 0.5, gen)  # boundary: t <= tau is soft
        assert not np.allclose(soft[0, spec.mask], spec.z_given[spec.mask])


class TestSolve:
    def test_complete_puzzle_trivially_solved(self, solution, oracle):
        fs = FieldSource.from_oracle(oracle, LIN)
        cfg = SamplerConfig(method="sde", steps=20, sigma=0.0, noise_mode="beta_t", seed=8)
        sol, stats = solve(solution, fs, cfg, SolveConfig(batch_size=8, max_retries=2),
                           rng=RngStream(8))
        assert sol == solution
        assert stats.r == 0
        assert stats.n_valid == 8

    def test_oracle_containing_solution_solves(self, puzzle, solution, oracle):
        fs = FieldSource.from_oracle(oracle, LIN)
        cfg = SamplerConfig(method="sde", steps=100, sigma=0.0, noise_mode="beta_t", seed=9)
        sol, stats = solve(puzzle, fs, cfg, SolveConfig(batch_size=16, max_retries=3),
                           rng=RngStream(9))
        assert sol is not None
        assert stats.r == 0
        assert is_valid(sol)
        clue_idx = puzzle.cells > 0
        assert np.array_equal(sol.cells[clue_idx], puzzle.cells[clue_idx])

    def test_ddpm_guided_also_solves(self, puzzle, solution, oracle):
        fs = FieldSource.from_oracle(oracle, COS)
        cfg = SamplerConfig(method="ddpm", steps=120, seed=10)
        sol, stats = solve(puzzle, fs, cfg, SolveConfig(batch_size=16, max_retries=3),
                           rng=RngStream(10))
        assert sol is not None and is_valid(sol)

    def test_unsatisfiable_puzzle_precheck(self, oracle):
        cells = np.zeros(81, dtype=int)
        cells[0] = cells[1] = 7
        bad = DigitGrid(cells)
        fs = FieldSource.from_oracle(oracle, LIN)
        cfg = SamplerConfig(method="sde", steps=10, seed=11)
        with pytest.raises(ValueError, match="unsatisfiable"):
            solve(bad, fs, cfg, SolveConfig(batch_size=4, max_retries=1), rng=RngStream(11))

    def test_no_clue_puzzle_rejected(self, oracle):
        fs = FieldSource.from_oracle(oracle, LIN)
        cfg = SamplerConfig(method="sde", steps=10, seed=12)
        with pytest.raises(ValueError, match="clue"):
            solve(DigitGrid(np.zeros(81, dtype=int)), fs, cfg,
                  SolveConfig(batch_size=4, max_retries=1), rng=RngStream(12))

    def test_failure_accounting(self, puzzle, oracle):
        # A field pulling toward a wrong atom set never satisfies the clues.
        others = MixtureOracle([generate_complete(s) for s in range(30, 34)])
        fs = FieldSource.from_oracle(others, LIN)
        cfg = SamplerConfig(method="sde", steps=30, sigma=0.0, seed=13)
        sol, stats = solve(puzzle, fs, cfg,
                           SolveConfig(batch_size=4, max_retries=3, precheck=False),
                           rng=RngStream(13))
        assert sol is None
        assert stats.r == 3
        assert stats.n_valid == 0
        assert stats.batches_run == 3
        assert efficiency(stats, 4) == 0.0


class TestEfficiency:
    def test_perfect_batch(self):
        assert efficiency(RunStats(r=0, n_valid=512), 512) == 1.0

    def test_formula(self):
        assert efficiency(RunStats(r=2, n_valid=1), 512) == pytest.approx(1 / 1536)

    def test_failure_zero(self):
        assert efficiency(RunStats(r=50, n_valid=0), 512) == 0.0

    def test_bounds(self, rng):
        for _ in range(20):
            r = int(rng.integers(0, 10))
            bs = int(rng.integers(1, 100))
            nv = int(rng.integers(1, bs + 1))
            assert 0.0 <= efficiency(RunStats(r=r, n_valid=nv), bs) <= 1.0
