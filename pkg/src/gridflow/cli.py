"""Experiment harness CLI.

Subcommands: gen-data, train, sample, sweep-sigma, solve, oracle-check,
grad-check. Every command that takes --seed is bit-reproducible on one
platform; every command that writes outputs drops a resolved config next to
them. Exit codes: 0 success, 1 property/validation failure, 2 usage error,
3 I/O error.

The global --threads flag must act before numpy loads its BLAS, so this
module keeps heavyweight imports inside the command handlers.
"""

from __future__ import annotations

import argparse
import os
import sys

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2
EXIT_IO = 3

# Paper full-scale reference values (Tables 1-3), quoted in output headers for
# orientation; desk-scale runs are not expected to reproduce them.
FULL_SCALE_OPTIMAL_SIGMA = {
    ("sde", "constant_sigma", "score", "linear"): 2.1,
    ("sde", "beta_t", "score", "linear"): 2.4,
    ("sde", "constant_sigma", "score", "cosine"): 2.4,
    ("sde", "beta_t", "score", "cosine"): 2.7,
}


def _write_resolved_args(args, out_dir, name="resolved_config.txt"):
    os.makedirs(out_dir, exist_ok=True)
    skip = {"func", "threads"}
    with open(os.path.join(out_dir, name), "w") as fh:
        for key in sorted(vars(args)):
            if key not in skip:
                fh.write(f"{key} = {getattr(args, key)}\n")


def cmd_gen_data(args):
    from .dataset import generate_complete, save_grids
    from .rng import RngStream

    master = RngStream(args.seed, ("gen-data",)).generator()
    grids = []
    seen = set()
    while len(grids) < args.count:
        g = generate_complete(int(master.integers(2**63)))
        if g in seen:
            continue
        seen.add(g)
        grids.append(g)
    save_grids(grids, args.out)
    print(f"wrote {len(grids)} grids to {args.out}")
    return EXIT_OK


def cmd_train(args):
    from .config import parse_config, resolve_train_config, write_resolved
    from .dataset import load_grids
    from .objectives import train

    values = parse_config(args.config)
    model_cfg, train_cfg, dataset_path, out_dir = resolve_train_config(values)
    os.makedirs(out_dir, exist_ok=True)
    write_resolved(values, os.path.join(out_dir, "resolved_config.txt"))
    data = load_grids(dataset_path)

    def log(it, loss, grad_norm, secs):
        print(f"iter {it} loss {loss:.6f} grad_norm {grad_norm:.4f} {secs:.1f}s", flush=True)

    params, _ = train(model_cfg, data, train_cfg, out_dir=out_dir, log=log)
    print(f"trained {params.n_params()} parameters -> {os.path.join(out_dir, 'model.gflw')}")
    return EXIT_OK


def _load_source(checkpoint_path):
    import numpy as np  # noqa: F401

    from .net import load_params
    from .samplers import FieldSource
    from .schedule import Schedule

    params = load_params(checkpoint_path)
    schedule = Schedule(params.meta.get("schedule", "linear"))
    objective = params.meta.get("objective", "rescaled_score")
    if objective == "flow":
        fs = FieldSource.from_flow_model(params, schedule)
    else:
        fs = FieldSource.from_score_model(params, schedule)
    return fs, params, objective


def cmd_sample(args):
    import numpy as np

    from .grid import decode_argmax_batch
    from .metrics import entropy_window_mean, pearson, validity_report
    from .rng import RngStream
    from .samplers import SamplerConfig, run_sampler

    fs, params, objective = _load_source(args.checkpoint)
    if args.method == "ode" and args.sigma:
        print("warning: --sigma is ignored for the ODE sampler", file=sys.stderr)
    if args.method in ("ddpm", "ddim", "markov") and objective == "flow":
        print("error: ancestral/markov sampling needs a score model", file=sys.stderr)
        return EXIT_USAGE
    cfg = SamplerConfig(
        method=args.method,
        steps=args.steps,
        sigma=args.sigma,
        noise_mode=args.noise_mode,
        dropout_at_inference=args.dropout_at_inference,
        noise_scale=args.noise_scale,
        seed=args.seed,
    )
    os.makedirs(args.out_dir, exist_ok=True)
    _write_resolved_args(args, args.out_dir)

    decoded = []
    windows = []
    rows = []
    traj_path = os.path.join(args.out_dir, "trajectory.csv")
    with open(traj_path, "w") as tfh:
        tfh.write("sample,step,t,entropy\n")
        for rep in range(args.repeats):
            traj = run_sampler(fs, cfg, init=args.batch, rng=RngStream(args.seed, ("sample", rep)))
            digits = decode_argmax_batch(traj.final)
            decoded.append(digits)
            if cfg.steps >= 30:
                windows.append(entropy_window_mean(traj))
            rep_report = validity_report([digits])
            rows.append((rep, rep_report.validity_rate, rep_report.mean_violations, traj))
            if rep == 0:  # trajectory CSV for the first repeat only
                for i in range(min(len(digits), 16)):
                    for k, t in enumerate(traj.times):
                        tfh.write(f"{i},{k},{t:.6f},{traj.entropies[i, k]:.6f}\n")

    report = validity_report(decoded, windows if windows else None)
    report_path = os.path.join(args.out_dir, "report.csv")
    with open(report_path, "w") as fh:
        fh.write("method,schedule,sigma,noise_mode,steps,repeat,rate,mean_entropy,"
                 "mean_violations,pearson_r,p_value\n")
        for rep, rate, mviol, traj in rows:
            went = ""
            if cfg.steps >= 30:
                went = f"{float(np.mean(entropy_window_mean(traj))):.6f}"
            fh.write(
                f"{cfg.method},{fs.schedule.kind},{cfg.sigma},{cfg.noise_mode},"
                f"{cfg.steps},{rep},{rate:.6f},{went},{mviol:.6f},,\n"
            )
        r = "" if report.pearson_r is None else f"{report.pearson_r:.6f}"
        p = "" if report.p_value is None else f"{report.p_value:.6g}"
        ent = "" if report.mean_entropy is None else f"{report.mean_entropy:.6f}"
        fh.write(
            f"{cfg.method},{fs.schedule.kind},{cfg.sigma},{cfg.noise_mode},"
            f"{cfg.steps},pooled,{report.validity_rate:.6f},{ent},"
            f"{report.mean_violations:.6f},{r},{p}\n"
        )
    print(
        f"validity {report.validity_rate:.4f} +- {report.rate_std:.4f} over "
        f"{args.repeats} x {args.batch}; reports in {args.out_dir}"
    )
    return EXIT_OK


def cmd_sweep_sigma(args):
    from .rng import RngStream
    from .samplers import SamplerConfig, sigma_sweep

    try:
        lo, hi, step = (float(v) for v in args.grid.split(":"))
    except ValueError:
        print(f"error: bad --grid spec {args.grid!r}, want lo:hi:step", file=sys.stderr)
        return EXIT_USAGE
    if step <= 0 or hi < lo:
        print("error: bad --grid range", file=sys.stderr)
        return EXIT_USAGE
    import numpy as np

    sigmas = np.arange(lo, hi + step / 2, step)
    fs, params, objective = _load_source(args.checkpoint)
    cfg = SamplerConfig(
        method="sde", steps=args.steps, noise_mode=args.noise_mode, seed=args.seed
    )
    os.makedirs(args.out_dir, exist_ok=True)
    _write_resolved_args(args, args.out_dir)
    rows, summary = sigma_sweep(
        fs,
        cfg,
        sigmas,
        batches=args.batches,
        batch_size=args.batch,
        rng=RngStream(args.seed, ("sweep",)),
        csv_path=os.path.join(args.out_dir, "sweep_runs.csv"),
    )
    best = max(summary, key=lambda s: summary[s][0])
    key = ("sde", args.noise_mode, "score" if objective != "flow" else "flow",
           fs.schedule.kind)
    ref = FULL_SCALE_OPTIMAL_SIGMA.get(key)
    with open(os.path.join(args.out_dir, "sweep_summary.csv"), "w") as fh:
        if ref is not None:
            fh.write(f"# full-scale reference optimal sigma for this setting: {ref}\n")
        fh.write("sigma,mean_rate,std_rate,is_argmax\n")
        for sigma in sorted(summary):
            mean, std = summary[sigma]
            fh.write(f"{sigma},{mean:.6f},{std:.6f},{int(sigma == best)}\n")
    print(f"best sigma {best} (mean rate {summary[best][0]:.4f}); outputs in {args.out_dir}")
    return EXIT_OK


def cmd_solve(args):
    from .dataset import load_puzzles
    from .guided import SolveConfig, efficiency, solve
    from .rng import RngStream
    from .samplers import SamplerConfig

    fs, params, objective = _load_source(args.checkpoint)
    if objective == "flow":
        print("error: guided solving needs a score model", file=sys.stderr)
        return EXIT_USAGE
    puzzles = load_puzzles(args.puzzles)
    tau_pool = tuple(float(v) for v in args.tau_pool.split(","))
    sampler_cfg = SamplerConfig(
        method=args.method,
        steps=args.steps,
        sigma=args.sigma,
        noise_mode=args.noise_mode,
        seed=args.seed,
    )
    solve_cfg = SolveConfig(
        batch_size=args.batch,
        max_retries=args.max_retries,
        tau_pool=tau_pool,
        precheck=not args.no_precheck,
    )
    os.makedirs(args.out_dir, exist_ok=True)
    _write_resolved_args(args, args.out_dir)

    report_rows = []
    batch_counts = []
    eval_counts = []
    for pid, puzzle in enumerate(puzzles):
        try:
            solution, stats = solve(
                puzzle, fs, sampler_cfg, solve_cfg, rng=RngStream(args.seed, ("solve", pid))
            )
        except ValueError as exc:
            report_rows.append((pid, puzzle.n_clues, "", args.max_retries, 0, 0, 0, 0.0, f"error:{exc}"))
            continue
        solved = solution is not None
        tau = stats.taus[-1] if stats.taus else ""
        report_rows.append(
            (pid, puzzle.n_clues, tau, stats.r, stats.n_valid, stats.batches_run,
             stats.total_model_evals, stats.wall_seconds, int(solved))
        )
        if solved:
            batch_counts.append(stats.batches_run)
            eval_counts.append(stats.total_model_evals)
        print(
            f"puzzle {pid}: solved={solved} r={stats.r} n_valid={stats.n_valid} "
            f"p={efficiency(stats, args.batch):.3g} ({stats.wall_seconds:.0f}s)",
            flush=True,
        )

    with open(os.path.join(args.out_dir, "solve_report.csv"), "w") as fh:
        fh.write("puzzle_id,clues,tau,r,n_valid,batches,model_evals,seconds,solved\n")
        for row in report_rows:
            fh.write(",".join(str(v) for v in row) + "\n")

    with open(os.path.join(args.out_dir, "solve_cdf.csv"), "w") as fh:
        fh.write("measure,value,fraction_solved\n")
        n = len(puzzles)
        for measure, counts in (("batches", batch_counts), ("model_evals", eval_counts)):
            for v in sorted(set(counts)):
                frac = sum(1 for c in counts if c <= v) / n
                fh.write(f"{measure},{v},{frac:.6f}\n")
    solved_n = sum(1 for row in report_rows if row[-1] == 1)
    print(f"solved {solved_n}/{len(puzzles)}; outputs in {args.out_dir}")
    return EXIT_OK


def cmd_oracle_check(args):
    from .oracle_suite import run_suite

    failures = run_suite(args.atoms, suite=args.suite, log=print)
    return EXIT_OK if failures == 0 else EXIT_FAIL


def cmd_grad_check(args):
    import numpy as np

    from .net import ModelConfig, grad_check, init_params
    from .rng import RngStream

    cfg = ModelConfig(
        hidden=args.hidden, layers=args.layers, heads=args.heads,
        time_dim=args.time_dim, dropout=0.01,
    )
    params = init_params(cfg, RngStream(args.seed, ("gradcheck-init",)),
                         dtype=np.float64, zero_head=False)
    err = grad_check(params, probe_count=args.probes, eps=args.eps, seed=args.seed)
    print(f"max relative gradient error over {args.probes} probes: {err:.3e}")
    if err > 1e-4:
        print("FAIL: above 1e-4 tolerance", file=sys.stderr)
        return EXIT_FAIL
    print("PASS")
    return EXIT_OK


def build_parser():
    ap = argparse.ArgumentParser(prog="gridflow", description=__doc__)
    ap.add_argument("--threads", type=int, default=0,
                    help="cap BLAS/OpenMP worker threads (0 = library default)")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate valid grids to a text file")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model from a key=value config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="unconditional sampling + validity report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--method", required=True, choices=["ode", "sde", "ddpm", "ddim", "markov"])
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--noise-mode", default="constant_sigma", choices=["constant_sigma", "beta_t"])
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--batch", type=int, default=500)
    p.add_argument("--repeats", type=int, default=50)
    p.add_argument("--noise-scale", type=float, default=1.0)
    p.add_argument("--dropout-at-inference", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("sweep-sigma", help="validity rate across a sigma grid")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--grid", default="0.1:3.0:0.1", help="lo:hi:step")
    p.add_argument("--noise-mode", default="constant_sigma", choices=["constant_sigma", "beta_t"])
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--batch", type=int, default=500)
    p.add_argument("--batches", type=int, default=4, help="independent batches per sigma")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_sweep_sigma)

    p = sub.add_parser("solve", help="guided puzzle solving with retry accounting")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--puzzles", required=True)
    p.add_argument("--method", default="sde", choices=["sde", "ddpm"])
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--noise-mode", default="beta_t", choices=["constant_sigma", "beta_t"])
    p.add_argument("--steps", type=int, default=400)
    p.add_argument("--batch", type=int, default=512)
    p.add_argument("--max-retries", type=int, default=50)
    p.add_argument("--tau-pool", default="0,0.45,0.5,0.55")
    p.add_argument("--no-precheck", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("oracle-check", help="exact-oracle verification battery")
    p.add_argument("--atoms", required=True, help="grid file providing the mixture atoms")
    p.add_argument("--suite", default="full", choices=["quick", "full"])
    p.set_defaults(func=cmd_oracle_check)

    p = sub.add_parser("grad-check", help="finite-difference gradient verification")
    p.add_argument("--hidden", type=int, default=16)
    p.add_argument("--layers", type=int, default=1)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--time-dim", type=int, default=8)
    p.add_argument("--probes", type=int, default=200)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_grad_check)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads > 0:
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    try:
        return args.func(args)
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
