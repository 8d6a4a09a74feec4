"""Continuous-time flow/score generative modeling on Sudoku grids.

The package trains small transformers along Gaussian probability paths,
samples them with deterministic, stochastic, and discretized reverse
processes, solves puzzles by guided stochastic search, and verifies every
sampler against an exact finite-mixture oracle.
"""

from .grid import (
    DigitGrid,
    box_index,
    count_violations,
    decode_argmax,
    decode_argmax_batch,
    encode_one_hot,
    is_valid,
)
from .dataset import (
    Dataset,
    backtracking_solve,
    generate_complete,
    load_grids,
    load_puzzles,
    make_puzzle,
    save_grids,
    split,
)
from .schedule import DiscreteSchedule, Schedule, discretize
from .net import (
    ModelConfig,
    ModelParams,
    forward,
    fourier_time_embed,
    grad_check,
    init_params,
    load_params,
    loss_and_grads,
    save_params,
)
from .objectives import (
    PathSample,
    TrainConfig,
    flow_target,
    rescaled_score_target,
    sample_path_point,
    sample_time,
    score_from_rescaled,
    train,
)
from .exact_oracle import MixtureOracle
from .samplers import (
    FieldSource,
    SamplerConfig,
    Trajectory,
    ddpm_ancestral,
    eps_from_score,
    flow_from_score,
    markov_reverse_chain,
    ode_euler,
    run_sampler,
    score_from_flow,
    sde_euler_maruyama,
    sigma_sweep,
)
from .guided import GuidedSpec, RunStats, SolveConfig, efficiency, hard_clamp, soft_inject, solve
from .metrics import BatchReport, entropy_window_mean, mean_entropy, pearson, validity_report
from .rng import RngStream

__version__ = "0.1.0"
