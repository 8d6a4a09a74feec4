"""Closed-form marginal score and velocity for a finite-atom data distribution.

With data concentrated on N known one-hot encodings z_i, the Gaussian-path
marginal p_t(x) = (1/N) sum_i N(x; alpha z_i, beta^2 I) has an exact score and
velocity: posterior-weight the per-atom conditional quantities. This is a
test instrument: every sampler in the package can be verified against it
without any training. Weights are always computed in the log domain; the
exponents scale like 1/beta^2 and overflow naive exponentials long before the
path endpoint.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError
from .grid import DigitGrid, encode_one_hot
from .objectives import BETA_FLOOR
from .schedule import Schedule

__all__ = ["MixtureOracle"]

MAX_ATOMS = 64


class MixtureOracle:
    """Uniform mixture over up to 64 encoded grids with exact score/velocity."""

    def __init__(self, grids):
        grids = list(grids)
        if not 1 <= len(grids) <= MAX_ATOMS:
            raise ValueError(f"oracle supports 1..{MAX_ATOMS} atoms, got {len(grids)}")
        self.atoms = np.stack([encode_one_hot(g) for g in grids])  # (N, 81, 9)
        self.grids = [g if isinstance(g, DigitGrid) else DigitGrid(g) for g in grids]

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    def _flat_atoms(self):
        return self.atoms.reshape(self.n_atoms, -1)

    def posterior_weights(self, x: np.ndarray, t, s: Schedule) -> np.ndarray:
        """w_i(x) over atoms; batched x (B, 81, 9) -> (B, N), single -> (N,)."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 2
        xb = x[None] if single else x
        alpha, beta = s.alpha_beta(float(t) if np.ndim(t) == 0 else t)
        alpha = float(alpha)
        beta = float(beta)
        if beta < BETA_FLOOR * (1.0 - 1e-9):  # slack: beta(1 - 1e-4) rounds below 1e-4
            raise NumericError(f"beta(t)={beta} below floor {BETA_FLOOR}")
        diff = xb.reshape(len(xb), 1, -1) - alpha * self._flat_atoms()[None]  # (B,N,D)
        logw = -np.einsum("bnd,bnd->bn", diff, diff) / (2.0 * beta * beta)
        logw -= logw.max(axis=1, keepdims=True)
        w = np.exp(logw)
        w /= w.sum(axis=1, keepdims=True)
        return w[0] if single else w

    def log_marginal(self, x: np.ndarray, t, s: Schedule) -> float:
        """Unnormalized log p_t(x) (constants dropped); used by gradient checks."""
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        alpha, beta = s.alpha_beta(float(t))
        diff = x[None, :] - float(alpha) * self._flat_atoms()
        logk = -np.einsum("nd,nd->n", diff, diff) / (2.0 * float(beta) ** 2)
        m = logk.max()
        return float(m + np.log(np.exp(logk - m).sum()))

    def posterior_mean(self, x: np.ndarray, t, s: Schedule) -> np.ndarray:
        """E[z | x_t = x]: the convex atom combination the samplers collapse to."""
        w = self.posterior_weights(x, t, s)
        if w.ndim == 1:
            return np.tensordot(w, self.atoms, axes=(0, 0))
        return np.einsum("bn,nij->bij", w, self.atoms)

    def score(self, x: np.ndarray, t, s: Schedule) -> np.ndarray:
        """grad_x log p_t(x) = sum_i w_i (alpha z_i - x) / beta^2."""
        x = np.asarray(x, dtype=np.float64)
        alpha, beta = s.alpha_beta(float(t))
        alpha = float(alpha)
        beta = float(beta)
        if beta < BETA_FLOOR * (1.0 - 1e-9):
            raise NumericError(f"beta(t)={beta} below floor {BETA_FLOOR}")
        zbar = self.posterior_mean(x, t, s)
        return (alpha * zbar - x) / (beta * beta)

    def velocity(self, x: np.ndarray, t, s: Schedule) -> np.ndarray:
        """sum_i w_i u(x | z_i) with the closed-form conditional velocity."""
        x = np.asarray(x, dtype=np.float64)
        alpha, beta, dalpha, dbeta = s.eval(float(t))
        alpha = float(alpha)
        beta = float(beta)
        if beta < BETA_FLOOR * (1.0 - 1e-9):
            raise NumericError(f"beta(t)={beta} below floor {BETA_FLOOR}")
        zbar = self.posterior_mean(x, t, s)
        return (float(dalpha) - float(dbeta) / beta * alpha) * zbar + float(dbeta) / beta * x
