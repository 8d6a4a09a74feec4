"""Entropy, validity, and correlation diagnostics for sampler output.

Entropy uses the natural log (so the per-cell ceiling is ln 9) and is taken
on the softmax of the raw relaxed state. The entropy/violation correlation
pairs each sample's late-trajectory entropy window (steps K-30 .. K-15,
inclusive) with its 27-unit violation total after argmax decoding; the
two-sided p-value comes from the exact t-distribution via the regularized
incomplete beta function.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import betainc

from .grid import count_violations_batch, decode_argmax_batch

__all__ = [
    "BatchReport",
    "mean_entropy",
    "entropy_per_sample",
    "entropy_window_mean",
    "pearson",
    "validity_report",
    "LN9",
]

LN9 = float(np.log(9.0))
DEFAULT_WINDOW = (30, 15)


def entropy_per_sample(x: np.ndarray) -> np.ndarray:
    """Mean per-cell softmax entropy of each sample in a (..., 81, 9) state."""
    x = np.asarray(x, dtype=np.float64)
    z = x - x.max(axis=-1, keepdims=True)
    p = np.exp(z)
    psum = p.sum(axis=-1, keepdims=True)
    logp = z - np.log(psum)
    h = -((p / psum) * logp).sum(axis=-1)
    return h.mean(axis=-1)


def mean_entropy(x: np.ndarray) -> float:
    """Mean per-cell entropy over all cells (and samples, if batched)."""
    return float(np.mean(entropy_per_sample(x)))


def entropy_window_mean(traj, window: tuple = DEFAULT_WINDOW) -> np.ndarray:
    """Per-sample mean entropy over steps K-window[0] .. K-window[1] inclusive.

    Accepts a Trajectory or a (B, K) entropy array; steps are 0-indexed with
    the last recorded step at K-1.
    """
    ent = np.asarray(getattr(traj, "entropies", traj), dtype=np.float64)
    if ent.ndim == 1:
        ent = ent[None, :]
    lo, hi = window
    k = ent.shape[1]
    if k < lo:
        raise ValueError(f"trajectory has {k} steps; window needs at least {lo}")
    return ent[:, k - lo : k - hi + 1].mean(axis=1)


def pearson(xs, ys) -> tuple[float, float]:
    """Sample Pearson r and the two-sided p-value from the t-statistic.

    p = I_{nu/(nu+t^2)}(nu/2, 1/2) with nu = n - 2 degrees of freedom; this is
    the exact Student-t tail expressed through the regularized incomplete
    beta function.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ValueError("pearson expects two equal-length 1-d arrays")
    n = len(xs)
    if n < 3:
        raise ValueError("pearson needs at least 3 points")
    xc = xs - xs.mean()
    yc = ys - ys.mean()
    sx = float(np.sqrt((xc * xc).sum()))
    sy = float(np.sqrt((yc * yc).sum()))
    if sx == 0.0 or sy == 0.0:
        raise ValueError("correlation undefined: an argument has zero variance")
    r = float((xc * yc).sum() / (sx * sy))
    r = max(-1.0, min(1.0, r))
    nu = n - 2
    if 1.0 - r * r <= 0.0:
        return r, 0.0
    t2 = r * r * nu / (1.0 - r * r)
    p = float(betainc(nu / 2.0, 0.5, nu / (nu + t2)))
    return r, p


@dataclass
class BatchReport:
    validity_rate: float
    rate_std: float
    mean_violations: float
    mean_entropy: float | None = None
    pearson_r: float | None = None
    p_value: float | None = None
    n_repeats: int = 1
    batch_size: int = 0
    total_valid: int = 0


def validity_report(decoded_batches, entropy_windows=None) -> BatchReport:
    """Aggregate repeats of decoded grids into a validity/diagnostic report.

    decoded_batches: list of (B, 81) digit arrays, one per repeat.
    entropy_windows: optional matching list of (B,) per-sample entropy-window
    means; when given, the entropy/violation Pearson correlation is computed
    over all samples pooled.
    """
    if len(decoded_batches) == 0:
        raise ValueError("need at least one repeat")
    rates = []
    violations = []
    total_valid = 0
    for batch in decoded_batches:
        batch = np.asarray(batch)
        v = count_violations_batch(batch)
        violations.append(v)
        valid = int((v == 0).sum())
        total_valid += valid
        rates.append(valid / len(batch))
    violations = np.concatenate(violations)
    rate_std = float(np.std(rates, ddof=1)) if len(rates) > 1 else 0.0

    report = BatchReport(
        validity_rate=float(np.mean(rates)),
        rate_std=rate_std,
        mean_violations=float(violations.mean()),
        n_repeats=len(decoded_batches),
        batch_size=len(np.asarray(decoded_batches[0])),
        total_valid=total_valid,
    )
    if entropy_windows is not None:
        ent = np.concatenate([np.asarray(e, dtype=np.float64) for e in entropy_windows])
        if len(ent) != len(violations):
            raise ValueError("entropy_windows must align with decoded samples")
        report.mean_entropy = float(ent.mean())
        report.pearson_r, report.p_value = pearson(ent, violations.astype(np.float64))
    return report


def decode_and_report(trajectories, window: tuple = DEFAULT_WINDOW) -> BatchReport:
    """Convenience: decode Trajectory objects and build the full report."""
    decoded = [decode_argmax_batch(tr.final) for tr in trajectories]
    windows = [entropy_window_mean(tr, window) for tr in trajectories]
    return validity_report(decoded, windows)
