"""Path-point sampling, regression targets, and the training loop.

Training regresses the network onto one of two closed-form targets along the
Gaussian path x_t = alpha(t) z + beta(t) eps:

  flow:           u(x_t | z) = (dalpha - (dbeta/beta) alpha) z + (dbeta/beta) x_t
                             = dalpha * z + dbeta * eps        (same quantity)
  rescaled score: beta^2 * grad log p_t(x_t | z) = -(x_t - alpha z) = -beta * eps

The flow target is evaluated in its eps form, which is algebraically
identical on path samples and avoids the beta division entirely (the x_t form
loses ~4 digits next to the t -> 1 clamp). Training times are drawn warped
toward t = 1 and clamped at 1 - 1e-4.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass

import numpy as np

from .dataset import Dataset
from .errors import NumericError
from .grid import encode_one_hot
from .net import ModelConfig, ModelParams, init_params, loss_and_grads, save_params
from .rng import RngStream
from .schedule import Schedule

__all__ = [
    "T_CLAMP",
    "BETA_FLOOR",
    "PathSample",
    "TrainConfig",
    "sample_time",
    "sample_path_point",
    "flow_target",
    "rescaled_score_target",
    "score_from_rescaled",
    "AdamState",
    "adam_step",
    "train",
]

T_CLAMP = 1.0 - 1e-4
# Floor for beta(t) wherever it appears in a denominator; matches the
# training-time clamp (beta_linear(T_CLAMP) = 1e-4).
BETA_FLOOR = 1e-4


@dataclass
class PathSample:
    z: np.ndarray
    t: np.ndarray
    eps: np.ndarray
    x_t: np.ndarray


@dataclass
class TrainConfig:
    objective: str = "rescaled_score"  # or "flow"
    schedule: str = "linear"
    iterations: int = 20_000
    batch_size: int = 128
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_interval: int = 5_000
    log_interval: int = 100

    def __post_init__(self):
        if self.objective not in ("flow", "rescaled_score"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")


def sample_time(rng, size=None) -> np.ndarray:
    """t = 1 - (1 - u)^2 with u uniform, clamped to t <= 1 - 1e-4.

    Biases training times toward t = 1, where the late-path behaviour that
    decides constraint satisfaction lives.
    """
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    u = gen.random(size)
    t = 1.0 - (1.0 - u) ** 2
    return np.minimum(t, T_CLAMP)


def sample_path_point(z: np.ndarray, t, rng, s: Schedule) -> PathSample:
    """Draw eps ~ N(0, I) and form x_t = alpha z + beta eps (batched or single)."""
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    z = np.asarray(z, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    alpha, beta = s.alpha_beta(t)
    eps = gen.standard_normal(z.shape)
    bshape = t.shape + (1,) * (z.ndim - t.ndim)
    x_t = alpha.reshape(bshape) * z + beta.reshape(bshape) * eps
    return PathSample(z=z, t=t, eps=eps, x_t=x_t)


def _bcast(coef, t, like):
    return np.asarray(coef).reshape(np.shape(t) + (1,) * (like.ndim - np.ndim(t)))


def flow_target(ps: PathSample, s: Schedule) -> np.ndarray:
    """Conditional velocity target, evaluated as dalpha*z + dbeta*eps."""
    _, beta, dalpha, dbeta = s.eval(ps.t)
    if np.any(beta <= 0.0):
        raise NumericError("flow target undefined at beta(t) = 0; clamp t below 1")
    return _bcast(dalpha, ps.t, ps.z) * ps.z + _bcast(dbeta, ps.t, ps.eps) * ps.eps


def rescaled_score_target(ps: PathSample, s: Schedule) -> np.ndarray:
    """Bounded score target -(x_t - alpha z), i.e. -beta * eps."""
    alpha, _ = s.alpha_beta(ps.t)
    return -(ps.x_t - _bcast(alpha, ps.t, ps.z) * ps.z)


def score_from_rescaled(s_tilde: np.ndarray, t, s: Schedule) -> np.ndarray:
    """Recover the score from a rescaled-score output: s = s_tilde / beta^2."""
    _, beta = s.alpha_beta(t)
    if np.any(beta < BETA_FLOOR * (1.0 - 1e-9)):
        raise NumericError(f"beta(t) below floor {BETA_FLOOR} in score rescale")
    return s_tilde / _bcast(beta * beta, t, np.asarray(s_tilde))


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def init(cls, params: ModelParams) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.tensors.items()},
            v={k: np.zeros_like(p) for k, p in params.tensors.items()},
        )


def adam_step(params: ModelParams, grads: dict, state: AdamState, cfg: TrainConfig):
    """In-place adaptive-moment update; returns the global gradient norm."""
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    sq_norm = 0.0
    for name, g in grads.items():
        sq_norm += float(np.vdot(g, g))
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
        params.tensors[name] -= params.dtype.type(cfg.learning_rate) * update.astype(
            params.dtype
        )
    return float(np.sqrt(sq_norm))


def _target_fn(objective: str):
    return flow_target if objective == "flow" else rescaled_score_target


def train(
    model_cfg: ModelConfig,
    data: Dataset,
    cfg: TrainConfig,
    out_dir: str | os.PathLike | None = None,
    log=None,
    params: ModelParams | None = None,
) -> tuple[ModelParams, list[tuple]]:
    """Train a model from scratch on encoded grids; returns params + loss log.

    The loss log holds (iteration, loss, grad_norm, seconds) rows, recorded
    every cfg.log_interval iterations and at the final iteration. Checkpoints
    (when out_dir is given) are written every cfg.checkpoint_interval
    iterations as model_NNNNNN.gflw plus a final model.gflw.
    """
    if len(data) == 0:
        raise ValueError("training requires a nonempty dataset")
    schedule = Schedule(cfg.schedule)
    root = RngStream(cfg.seed, ("train",))
    if params is None:
        params = init_params(model_cfg, root.child("init"), dtype=np.float32)
    params.meta = {
        "objective": cfg.objective,
        "schedule": cfg.schedule,
        "iterations": cfg.iterations,
        "batch_size": cfg.batch_size,
        "learning_rate": cfg.learning_rate,
        "optimizer": f"adam({cfg.beta1},{cfg.beta2},{cfg.adam_eps})",
        "seed": cfg.seed,
        "layout": "pre_norm",
        "init": "normal(0,0.02), zero biases, zero output head",
        "time_clamp": T_CLAMP,
    }
    encoded = np.stack([encode_one_hot(g) for g in data.grids]).astype(np.float32)
    target_of = _target_fn(cfg.objective)

    batch_gen = root.child("batch").generator()
    path_gen = root.child("path").generator()
    drop_gen = root.child("dropout").generator()
    opt = AdamState.init(params)
    history: list[tuple] = []
    t_start = time.time()

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)

    for it in range(1, cfg.iterations + 1):
        idx = batch_gen.integers(0, len(encoded), size=cfg.batch_size)
        z = encoded[idx]
        t = sample_time(path_gen, size=cfg.batch_size)
        ps = sample_path_point(z, t, path_gen, schedule)
        target = target_of(ps, schedule)

        loss, grads = loss_and_grads(
            params,
            ps.x_t.astype(np.float32),
            t,
            target.astype(np.float32),
            dropout_on=True,
            rng=drop_gen,
        )
        if not np.isfinite(loss):
            raise NumericError(
                f"non-finite loss at iteration {it} "
                f"(loss={loss}, grad_norm={np.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))})"
            )
        grad_norm = adam_step(params, grads, opt, cfg)

        if it % cfg.log_interval == 0 or it == cfg.iterations:
            row = (it, loss, grad_norm, time.time() - t_start)
            history.append(row)
            if log is not None:
                log(*row)
        if out_dir is not None and cfg.checkpoint_interval > 0 and it % cfg.checkpoint_interval == 0:
            save_params(params, os.path.join(out_dir, f"model_{it:06d}.gflw"))

    if out_dir is not None:
        save_params(params, os.path.join(out_dir, "model.gflw"))
        with open(os.path.join(out_dir, "loss.csv"), "w") as fh:
            fh.write("iter,loss,grad_norm,seconds\n")
            for it, loss, gn, secs in history:
                fh.write(f"{it},{loss:.8g},{gn:.8g},{secs:.3f}\n")
    return params, history
