import subprocess
import sys

import numpy as np
import pytest

from gridflow.config import parse_config, resolve_train_config, write_resolved
from gridflow.dataset import load_grids, save_grids
from gridflow.errors import ParseError
from gridflow.grid import DigitGrid, is_valid


def run_cli(*args, timeout=600):
    return subprocess.run(
        [sys.executable, "-m", "gridflow.cli", *args],
        capture_output=True,
        text=True,
        timeout=timeout,
    )


class TestConfigParsing:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text(
            "# comment\n"
            "schedule = cosine\n"
            "objective = flow  # inline comment\n"
            "hidden = 32\n"
            "iterations = 10\n"
            "dataset = data.txt\n"
            "out_dir = out\n"
        )
        values = parse_config(path)
        assert values["schedule"] == "cosine"
        assert values["objective"] == "flow"
        assert values["hidden"] == 32
        assert values["learning_rate"] == pytest.approx(3e-4)  # default
        resolved = tmp_path / "resolved.txt"
        write_resolved(values, resolved)
        assert parse_config(resolved) == values

    def test_unknown_key_rejected_with_line(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("hidden = 32\ntypo_key = 1\n")
        with pytest.raises(ParseError, match="line 2"):
            parse_config(path)

    def test_duplicate_key_rejected(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("hidden = 32\nhidden = 64\n")
        with pytest.raises(ParseError, match="duplicate"):
            parse_config(path)

    def test_type_error_rejected(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("hidden = lots\n")
        with pytest.raises(ParseError, match="hidden"):
            parse_config(path)

    def test_missing_required_key(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("hidden = 32\n")
        with pytest.raises(ParseError, match="dataset"):
            parse_config(path)

    def test_resolve_builds_configs(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("dataset = d.txt\nout_dir = o\nhidden = 16\nheads = 2\ntime_dim = 8\n")
        mc, tc, dataset, out_dir = resolve_train_config(parse_config(path))
        assert mc.hidden == 16
        assert tc.objective == "rescaled_score"
        assert (dataset, out_dir) == ("d.txt", "o")


class TestGenData:
    def test_count_validity_determinism(self, tmp_path):
        out1 = tmp_path / "a.txt"
        out2 = tmp_path / "b.txt"
        r1 = run_cli("gen-data", "--count", "12", "--seed", "5", "--out", str(out1))
        assert r1.returncode == 0, r1.stderr
        r2 = run_cli("gen-data", "--count", "12", "--seed", "5", "--out", str(out2))
        assert r2.returncode == 0
        assert out1.read_bytes() == out2.read_bytes()
        data = load_grids(out1)
        assert len(data) == 12
        assert all(is_valid(g) for g in data.grids)

    def test_zero_count_empty_file(self, tmp_path):
        out = tmp_path / "z.txt"
        assert run_cli("gen-data", "--count", "0", "--seed", "1", "--out", str(out)).returncode == 0
        assert out.read_text() == ""


class TestTrainCommand:
    def _write_config(self, tmp_path, iterations=5):
        data_path = tmp_path / "data.txt"
        run_cli("gen-data", "--count", "4", "--seed", "2", "--out", str(data_path))
        cfg = tmp_path / "train.cfg"
        cfg.write_text(
            f"dataset = {data_path}\n"
            f"out_dir = {tmp_path / 'run'}\n"
            "hidden = 16\nlayers = 1\nheads = 2\ntime_dim = 8\n"
            f"iterations = {iterations}\nbatch_size = 4\ncheckpoint_interval = 0\n"
            "log_interval = 5\nseed = 9\n"
        )
        return cfg, tmp_path / "run"

    def test_train_writes_artifacts(self, tmp_path):
        cfg, run_dir = self._write_config(tmp_path)
        res = run_cli("train", "--config", str(cfg))
        assert res.returncode == 0, res.stderr
        assert (run_dir / "model.gflw").exists()
        assert (run_dir / "loss.csv").exists()
        assert (run_dir / "resolved_config.txt").exists()

    def test_zero_iterations_checkpoint_equals_init(self, tmp_path):
        from gridflow.net import ModelConfig, init_params, load_params
        from gridflow.rng import RngStream

        cfg, run_dir = self._write_config(tmp_path, iterations=0)
        assert run_cli("train", "--config", str(cfg)).returncode == 0
        loaded = load_params(run_dir / "model.gflw")
        expect = init_params(
            ModelConfig(hidden=16, layers=1, heads=2, time_dim=8),
            RngStream(9, ("train", "init")),
            dtype=np.float32,
        )
        assert all(
            np.array_equal(loaded.tensors[k], expect.tensors[k]) for k in expect.tensors
        )

    def test_missing_dataset_is_io_error(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("dataset = /nonexistent/x.txt\nout_dir = " + str(tmp_path / "o") + "\n")
        res = run_cli("train", "--config", str(cfg))
        assert res.returncode == 3

    def test_config_parse_error_exit_code(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("bogus = 1\n")
        res = run_cli("train", "--config", str(cfg))
        assert res.returncode == 1
        assert "line 1" in res.stderr


@pytest.fixture(scope="module")
def tiny_checkpoint(tmp_path_factory):
    """A 30-iteration tiny score model; enough for CLI plumbing tests."""
    tmp = tmp_path_factory.mktemp("ckpt")
    data_path = tmp / "data.txt"
    run_cli("gen-data", "--count", "6", "--seed", "3", "--out", str(data_path))
    cfg = tmp / "t.cfg"
    cfg.write_text(
        f"dataset = {data_path}\nout_dir = {tmp / 'run'}\n"
        "hidden = 16\nlayers = 1\nheads = 2\ntime_dim = 8\n"
        "iterations = 30\nbatch_size = 8\ncheckpoint_interval = 0\nseed = 4\n"
    )
    res = run_cli("train", "--config", str(cfg))
    assert res.returncode == 0, res.stderr
    return tmp / "run" / "model.gflw"


class TestSampleCommand:
    def test_ode_ignores_sigma_with_warning(self, tiny_checkpoint, tmp_path):
        res = run_cli(
            "sample", "--checkpoint", str(tiny_checkpoint), "--method", "ode",
            "--sigma", "1.0", "--steps", "40", "--batch", "8", "--repeats", "2",
            "--seed", "1", "--out-dir", str(tmp_path / "out"),
        )
        assert res.returncode == 0, res.stderr
        assert "ignored" in res.stderr
        report = (tmp_path / "out" / "report.csv").read_text().splitlines()
        assert report[0].startswith("method,schedule,sigma")
        assert len(report) == 4  # 2 repeats + pooled + header
        assert (tmp_path / "out" / "trajectory.csv").exists()
        assert (tmp_path / "out" / "resolved_config.txt").exists()

    def test_sde_sigma_zero_matches_ode(self, tiny_checkpoint, tmp_path):
        a = tmp_path / "a"
        b = tmp_path / "b"
        for method, sigma, out in (("ode", "0", a), ("sde", "0", b)):
            res = run_cli(
                "sample", "--checkpoint", str(tiny_checkpoint), "--method", method,
                "--sigma", sigma, "--steps", "40", "--batch", "8", "--repeats", "1",
                "--seed", "7", "--out-dir", str(out),
            )
            assert res.returncode == 0, res.stderr
        ra = (a / "report.csv").read_text().splitlines()[1].split(",")
        rb = (b / "report.csv").read_text().splitlines()[1].split(",")
        assert ra[6] == rb[6]  # identical validity rate column

    def test_unknown_method_usage_error(self, tiny_checkpoint, tmp_path):
        res = run_cli(
            "sample", "--checkpoint", str(tiny_checkpoint), "--method", "rk4",
            "--out-dir", str(tmp_path / "x"),
        )
        assert res.returncode == 2


class TestSweepCommand:
    def test_single_point_grid(self, tiny_checkpoint, tmp_path):
        res = run_cli(
            "sweep-sigma", "--checkpoint", str(tiny_checkpoint), "--grid", "0.5:0.5:0.1",
            "--steps", "30", "--batch", "8", "--batches", "2", "--seed", "2",
            "--out-dir", str(tmp_path / "sweep"),
        )
        assert res.returncode == 0, res.stderr
        summary = (tmp_path / "sweep" / "sweep_summary.csv").read_text().splitlines()
        rows = [l for l in summary if not l.startswith("#") and not l.startswith("sigma")]
        assert len(rows) == 1
        assert rows[0].endswith(",1")  # single row is the argmax

    def test_argmax_flag_unique(self, tiny_checkpoint, tmp_path):
        res = run_cli(
            "sweep-sigma", "--checkpoint", str(tiny_checkpoint), "--grid", "0.2:0.6:0.2",
            "--steps", "30", "--batch", "8", "--batches", "1", "--seed", "2",
            "--out-dir", str(tmp_path / "sweep2"),
        )
        assert res.returncode == 0, res.stderr
        summary = (tmp_path / "sweep2" / "sweep_summary.csv").read_text().splitlines()
        flags = [l.rsplit(",", 1)[1] for l in summary if l and l[0].isdigit()]
        assert flags.count("1") == 1

    def test_malformed_grid_usage_error(self, tiny_checkpoint, tmp_path):
        res = run_cli(
            "sweep-sigma", "--checkpoint", str(tiny_checkpoint), "--grid", "nope",
            "--out-dir", str(tmp_path / "x"),
        )
        assert res.returncode == 2


class TestSolveCommand:
    def test_complete_puzzles_all_solved(self, tiny_checkpoint, tmp_path):
        from gridflow.dataset import generate_complete

        puzzles = tmp_path / "puzzles.txt"
        save_grids([generate_complete(s) for s in range(3)], puzzles)
        res = run_cli(
            "solve", "--checkpoint", str(tiny_checkpoint), "--puzzles", str(puzzles),
            "--steps", "20", "--batch", "4", "--max-retries", "2", "--seed", "3",
            "--out-dir", str(tmp_path / "solve"),
        )
        assert res.returncode == 0, res.stderr
        report = (tmp_path / "solve" / "solve_report.csv").read_text().splitlines()
        assert report[0] == "puzzle_id,clues,tau,r,n_valid,batches,model_evals,seconds,solved"
        assert len(report) == 4
        assert all(line.endswith(",1") for line in report[1:])
        cdf = (tmp_path / "solve" / "solve_cdf.csv").read_text().splitlines()
        assert cdf[0] == "measure,value,fraction_solved"
        fracs = [float(l.split(",")[2]) for l in cdf[1:] if l.startswith("batches")]
        assert fracs == sorted(fracs)

    def test_model_evals_identity(self, tiny_checkpoint, tmp_path):
        from gridflow.dataset import generate_complete

        puzzles = tmp_path / "p.txt"
        save_grids([generate_complete(8)], puzzles)
        res = run_cli(
            "solve", "--checkpoint", str(tiny_checkpoint), "--puzzles", str(puzzles),
            "--steps", "25", "--batch", "4", "--max-retries", "2", "--seed", "5",
            "--out-dir", str(tmp_path / "s2"),
        )
        assert res.returncode == 0, res.stderr
        row = (tmp_path / "s2" / "solve_report.csv").read_text().splitlines()[1].split(",")
        batches, evals = int(row[5]), int(row[6])
        assert evals == batches * 4 * 25


class TestOracleCheckCommand:
    def test_quick_suite_passes(self, tmp_path):
        from gridflow.dataset import generate_complete

        atoms = tmp_path / "atoms.txt"
        save_grids([generate_complete(s) for s in range(4)], atoms)
        res = run_cli("oracle-check", "--atoms", str(atoms), "--suite", "quick", timeout=900)
        assert res.returncode == 0, res.stdout + res.stderr
        assert "FAIL" not in res.stdout

    def test_corrupt_atoms_file(self, tmp_path):
        atoms = tmp_path / "bad.txt"
        atoms.write_text("123\n")
        res = run_cli("oracle-check", "--atoms", str(atoms), "--suite", "quick")
        assert res.returncode == 1


class TestGradCheckCommand:
    def test_small_probe_count_passes(self):
        res = run_cli("grad-check", "--hidden", "16", "--layers", "1", "--heads", "2",
                      "--probes", "10", "--seed", "1")
        assert res.returncode == 0, res.stdout + res.stderr
        assert "PASS" in res.stdout

    def test_reproducible_error_value(self):
        a = run_cli("grad-check", "--probes", "5", "--seed", "2").stdout
        b = run_cli("grad-check", "--probes", "5", "--seed", "2").stdout
        assert a == b
