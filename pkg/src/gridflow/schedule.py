"""Probability-path coefficients and their discrete diffusion counterparts.

A schedule provides alpha(t), beta(t) and derivatives on t in [0, 1] with
alpha(0)=0, beta(0)=1, alpha(1)=1, beta(1)=0. The linear schedule is a plain
interpolation; the cosine schedule lives on the unit circle
(alpha^2 + beta^2 = 1) and is therefore the one that admits an exact
discrete-diffusion reading with alpha_bar(t) = alpha(t)^2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ScheduleError

__all__ = ["Schedule", "DiscreteSchedule", "discretize", "T_MIN_DEFAULT", "T_MAX_DEFAULT"]

# Default time-grid clamp: keeps alpha(t) and beta(t) away from their zeros so
# conversions and ancestral updates never divide by zero.
T_MIN_DEFAULT = 1e-4
T_MAX_DEFAULT = 1.0 - 1e-4


@dataclass(frozen=True)
class Schedule:
    """Path coefficients; kind is "linear" or "cosine"."""

    kind: str

    def __post_init__(self):
        if self.kind not in ("linear", "cosine"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")

    def eval(self, t):
        """(alpha, beta, dalpha, dbeta) at t; t may be a scalar or array in [0, 1]."""
        t = np.asarray(t)
        if (t < 0).any() or (t > 1).any():
            raise ValueError("schedule time must lie in [0, 1]")
        if self.kind == "linear":
            one = np.ones_like(t, dtype=np.float64)
            return t.astype(np.float64, copy=True), 1.0 - t, one, -one
        half_pi = 0.5 * math.pi
        return (
            np.sin(half_pi * t),
            np.cos(half_pi * t),
            half_pi * np.cos(half_pi * t),
            -half_pi * np.sin(half_pi * t),
        )

    def alpha_beta(self, t):
        a, b, _, _ = self.eval(t)
        return a, b

    def is_diffusion_compatible(self, tol: float = 1e-9) -> bool:
        """Check alpha^2 + beta^2 = 1 on a 1001-point uniform grid."""
        if tol <= 0:
            raise ValueError("tol must be positive")
        t = np.linspace(0.0, 1.0, 1001)
        a, b = self.alpha_beta(t)
        return float(np.abs(a * a + b * b - 1.0).max()) <= tol


@dataclass(frozen=True)
class DiscreteSchedule:
    """Diffusion coefficients on an increasing path-time grid.

    alpha_bar[k] = alpha(times[k])^2, so alpha_bar increases with path time
    (data sits at the top of the grid). The Markov step coefficients describe
    the noising transition times[k+1] -> times[k]:

        alpha_step[k] = alpha_bar[k] / alpha_bar[k+1]   in (0, 1]
        beta_step[k]  = 1 - alpha_step[k]

    so the classical reverse update from the state at times[k] to times[k+1]
    uses (alpha_step[k], beta_step[k]) with alpha_bar[k] at the noisier state.
    """

    times: np.ndarray
    alpha_bar: np.ndarray
    alpha_step: np.ndarray
    beta_step: np.ndarray

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1


def discretize(
    s: Schedule,
    n_steps: int,
    t_min: float = T_MIN_DEFAULT,
    t_max: float = T_MAX_DEFAULT,
    compat_tol: float = 1e-9,
) -> DiscreteSchedule:
    """Uniform (n_steps + 1)-point grid on [t_min, t_max] with Markov coefficients."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if not (0.0 < t_min < t_max < 1.0):
        raise ValueError("require 0 < t_min < t_max < 1 (endpoint clamp)")
    if not s.is_diffusion_compatible(tol=compat_tol):
        raise ScheduleError(
            f"schedule {s.kind!r} violates alpha^2 + beta^2 = 1; "
            "discrete Markov coefficients are undefined for it"
        )
    times = np.linspace(t_min, t_max, n_steps + 1)
    a, _ = s.alpha_beta(times)
    alpha_bar = a * a
    alpha_step = alpha_bar[:-1] / alpha_bar[1:]
    beta_step = 1.0 - alpha_step
    return DiscreteSchedule(
        times=times, alpha_bar=alpha_bar, alpha_step=alpha_step, beta_step=beta_step
    )
