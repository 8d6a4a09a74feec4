"""Training-free verification battery driven by the exact mixture oracle.

Each property here has a closed-form ground truth, so a failure localizes a
bug precisely: the score against a numerical log-marginal gradient, the
flow/score conversions against their round-trip identities, the samplers
against guaranteed atom recovery, and the Markov update against its algebraic
single-step inversion.
"""

from __future__ import annotations

import numpy as np

from .dataset import load_grids
from .exact_oracle import MixtureOracle
from .grid import decode_argmax_batch
from .rng import RngStream
from .samplers import (
    FieldSource,
    SamplerConfig,
    ddpm_ancestral,
    flow_from_score,
    markov_reverse_update,
    ode_euler,
    score_from_flow,
)
from .schedule import Schedule

__all__ = ["run_suite", "score_fd_check", "conversion_roundtrip_check", "atom_recovery"]


def score_fd_check(oracle: MixtureOracle, schedule: Schedule, probes: int = 100,
                   coords_per_probe: int = 8, seed: int = 0) -> float:
    """Max relative error of exact_score vs central differences of log p_t."""
    gen = RngStream(seed, ("fd",)).generator()
    worst = 0.0
    for _ in range(probes):
        t = float(gen.uniform(0.05, 0.95))
        x = gen.standard_normal((81, 9))
        sc = oracle.score(x, t, schedule)
        flat = x.reshape(-1)
        step = 1e-4 * (1.0 + float(np.abs(flat).max()))
        for _ in range(coords_per_probe):
            i = int(gen.integers(flat.size))
            xp = flat.copy()
            xp[i] += step
            xm = flat.copy()
            xm[i] -= step
            num = (
                oracle.log_marginal(xp.reshape(81, 9), t, schedule)
                - oracle.log_marginal(xm.reshape(81, 9), t, schedule)
            ) / (2.0 * step)
            ana = float(sc.reshape(-1)[i])
            rel = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            worst = max(worst, rel)
    return worst


def conversion_roundtrip_check(schedule: Schedule, seed: int = 0, n: int = 50) -> float:
    """Max round-trip error of the flow<->score conversions on t in [0.1, 0.9]."""
    gen = RngStream(seed, ("conv",)).generator()
    worst = 0.0
    for t in np.linspace(0.1, 0.9, 17):
        x = gen.standard_normal((n, 81, 9))
        u = gen.standard_normal((n, 81, 9))
        sc = score_from_flow(u, x, t, schedule)
        u_back = flow_from_score(sc, x, t, schedule)
        worst = max(worst, float(np.abs(u_back - u).max()))
        sc0 = gen.standard_normal((n, 81, 9))
        u0 = flow_from_score(sc0, x, t, schedule)
        sc_back = score_from_flow(u0, x, t, schedule)
        worst = max(worst, float(np.abs(sc_back - sc0).max()))
    return worst


def atom_recovery(oracle: MixtureOracle, schedule: Schedule, method: str,
                  starts: int, steps: int, seed: int = 0) -> float:
    """Fraction of standard-normal starts whose decoded endpoint is an atom."""
    fs = FieldSource.from_oracle(oracle, schedule)
    cfg = SamplerConfig(method=method, steps=steps, seed=seed)
    if method == "ode":
        traj = ode_euler(fs, cfg, init=starts, rng=RngStream(seed, ("ode",)))
    elif method == "ddpm":
        traj = ddpm_ancestral(fs, cfg, init=starts, rng=RngStream(seed, ("ddpm",)))
    else:
        raise ValueError(method)
    digits = decode_argmax_batch(traj.final)
    atom_set = {g.cells.tobytes() for g in oracle.grids}
    hits = sum(1 for row in digits if row.tobytes() in atom_set)
    return hits / starts


def markov_inversion_check(seed: int = 0) -> float:
    """Single-step reverse-update identity: exact eps recovers x_{k-1}."""
    gen = RngStream(seed, ("markov",)).generator()
    worst = 0.0
    for _ in range(20):
        alpha_step = float(gen.uniform(0.5, 0.999))
        alpha_bar = float(gen.uniform(0.05, 0.95))
        x_prev = gen.standard_normal((81, 9))
        eps = gen.standard_normal((81, 9))
        x_k = np.sqrt(alpha_step) * x_prev + np.sqrt(1.0 - alpha_step) * eps
        eps_pred = eps * np.sqrt((1.0 - alpha_bar) / (1.0 - alpha_step))
        rec = markov_reverse_update(x_k, eps_pred, alpha_step, alpha_bar, 0.0, 0.0)
        worst = max(worst, float(np.abs(rec - x_prev).max()))
    return worst


def run_suite(atoms_path, suite: str = "full", log=print) -> int:
    """Run all properties; returns the number of failures."""
    data = load_grids(atoms_path)
    grids = data.grids[:64]
    oracle = MixtureOracle(grids)
    starts = 500 if suite == "full" else 64
    failures = 0

    def check(name, value, ok):
        nonlocal failures
        status = "PASS" if ok else "FAIL"
        if not ok:
            failures += 1
        log(f"{status} {name}: {value:.3g}")

    for kind in ("linear", "cosine"):
        s = Schedule(kind)
        err = score_fd_check(oracle, s, probes=100 if suite == "full" else 25)
        check(f"score vs finite-difference log-marginal gradient [{kind}]", err, err <= 1e-4)
        rt = conversion_roundtrip_check(s)
        check(f"conversion round-trips on t in [0.1, 0.9] [{kind}]", rt, rt <= 1e-10)

    ode_rate = atom_recovery(oracle, Schedule("linear"), "ode", starts, steps=200)
    check("ODE atom recovery (exact velocity, linear)", ode_rate, ode_rate >= 0.95)
    ddpm_rate = atom_recovery(oracle, Schedule("cosine"), "ddpm", starts, steps=400)
    check("DDPM ancestral atom recovery (exact score, cosine)", ddpm_rate, ddpm_rate >= 1.0)
    inv = markov_inversion_check()
    check("Markov single-step inversion identity", inv, inv <= 1e-10)
    return failures
