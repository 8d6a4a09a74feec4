"""Guided Sudoku solving: constraint injection, the retry loop, and accounting.

Clue cells are enforced during sampling by a two-stage projection controlled
by a threshold tau: while the path time is at most tau the clues are injected
in their path-consistent noisy form alpha z + beta eps (fresh noise each
step), afterwards they are clamped exactly. A terminal hard clamp runs before
decoding, so any returned solution agrees with the clues by construction; we
still verify it. A batch only counts toward n_valid the samples that are
valid Sudoku grids AND match every clue.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .dataset import backtracking_solve
from .grid import DigitGrid, count_violations_batch, decode_argmax_batch
from .rng import RngStream
from .samplers import FieldSource, SamplerConfig, run_sampler
from .schedule import Schedule

__all__ = [
    "GuidedSpec",
    "SolveConfig",
    "RunStats",
    "hard_clamp",
    "soft_inject",
    "guided_step_hook",
    "solve",
    "efficiency",
]

DEFAULT_TAU_POOL = (0.0, 0.45, 0.5, 0.55)


@dataclass
class GuidedSpec:
    """Clue encoding: one-hot rows at clue cells, zero rows elsewhere."""

    z_given: np.ndarray  # (81, 9)
    mask: np.ndarray  # (81,) bool
    tau: float = 0.0

    @classmethod
    def from_puzzle(cls, puzzle: DigitGrid, tau: float = 0.0) -> "GuidedSpec":
        mask = np.asarray(puzzle.cells) > 0
        z = np.zeros((81, 9), dtype=np.float64)
        idx = np.flatnonzero(mask)
        z[idx, puzzle.cells[idx] - 1] = 1.0
        return cls(z_given=z, mask=mask, tau=tau)

    @property
    def n_clues(self) -> int:
        return int(self.mask.sum())


@dataclass
class SolveConfig:
    batch_size: int = 512
    max_retries: int = 50
    tau_pool: tuple = DEFAULT_TAU_POOL
    precheck: bool = True  # verify satisfiability with the backtracking oracle

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_retries < 1:
            raise ValueError("max_retries must be >= 1")


@dataclass
class RunStats:
    r: int = 0  # failed attempts before the first success
    n_valid: int = 0  # valid clue-consistent samples in the successful batch
    batches_run: int = 0
    total_model_evals: int = 0
    wall_seconds: float = 0.0
    taus: list = field(default_factory=list)


def hard_clamp(x: np.ndarray, spec: GuidedSpec) -> np.ndarray:
    """Replace clue cells by their exact one-hot encoding; free cells untouched."""
    out = np.array(x, copy=True)
    out[..., spec.mask, :] = spec.z_given[spec.mask].astype(out.dtype)
    return out


def soft_inject(x: np.ndarray, spec: GuidedSpec, t, rng, s: Schedule) -> np.ndarray:
    """Replace clue cells by alpha z + beta eps with fresh eps per call."""
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    alpha, beta = (float(v) for v in s.alpha_beta(float(t)))
    out = np.array(x, copy=True)
    idx = np.flatnonzero(spec.mask)
    eps_shape = x.shape[:-2] + (len(idx), 9)
    eps = gen.standard_normal(eps_shape).astype(out.dtype)
    out[..., idx, :] = alpha * spec.z_given[idx].astype(out.dtype) + beta * eps
    return out


def guided_step_hook(spec: GuidedSpec, schedule: Schedule):
    """Post-step projection: soft injection while t <= tau, hard clamp after."""

    def hook(x, t, gen):
        if float(t) <= spec.tau:
            return soft_inject(x, spec, t, gen, schedule)
        return hard_clamp(x, spec)

    return hook


def _valid_and_consistent(digits: np.ndarray, puzzle: DigitGrid) -> np.ndarray:
    clue_idx = np.flatnonzero(puzzle.cells > 0)
    consistent = (digits[:, clue_idx] == puzzle.cells[clue_idx]).all(axis=1)
    valid = count_violations_batch(digits) == 0
    return valid & consistent


def solve(
    puzzle: DigitGrid,
    fs: FieldSource,
    sampler_cfg: SamplerConfig,
    cfg: SolveConfig | None = None,
    rng: RngStream | None = None,
):
    """Guided stochastic search for a completion of the puzzle.

    Repeats guided batches (tau drawn per attempt from cfg.tau_pool) until a
    batch contains a valid clue-consistent sample or max_retries batches have
    failed. Returns (solution or None, RunStats). Trajectories always run to
    completion; there is no early stop inside a batch.
    """
    cfg = cfg or SolveConfig()
    if puzzle.n_clues < 1:
        raise ValueError("puzzle must have at least one clue")
    if cfg.precheck and not backtracking_solve(puzzle, max_solutions=1):
        raise ValueError("puzzle is unsatisfiable (backtracking oracle precheck)")

    stream = rng if rng is not None else RngStream(sampler_cfg.seed, ("solve",))
    tau_gen = stream.child("tau").generator()
    stats = RunStats()
    t_begin = time.time()

    for attempt in range(cfg.max_retries):
        tau = float(tau_gen.choice(np.asarray(cfg.tau_pool, dtype=np.float64)))
        spec = GuidedSpec.from_puzzle(puzzle, tau=tau)
        hook = guided_step_hook(spec, fs.schedule)
        traj = run_sampler(
            fs,
            sampler_cfg,
            init=cfg.batch_size,
            rng=stream.child("attempt", attempt),
            step_hook=hook,
        )
        stats.batches_run += 1
        stats.total_model_evals += traj.model_evals
        stats.taus.append(tau)

        final = hard_clamp(traj.final, spec)
        digits = decode_argmax_batch(final)
        ok = _valid_and_consistent(digits, puzzle)
        if ok.any():
            stats.r = attempt
            stats.n_valid = int(ok.sum())
            stats.wall_seconds = time.time() - t_begin
            first = int(np.flatnonzero(ok)[0])
            return DigitGrid(digits[first]), stats

    stats.r = cfg.max_retries
    stats.n_valid = 0
    stats.wall_seconds = time.time() - t_begin
    return None, stats


def efficiency(stats: RunStats, batch_size: int) -> float:
    """Normalized success probability p = n_valid / ((r + 1) batch_size)."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if stats.n_valid == 0:
        return 0.0
    return stats.n_valid / ((stats.r + 1) * batch_size)
