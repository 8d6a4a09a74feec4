import numpy as np
import pytest

from gridflow.dataset import generate_complete
from gridflow.errors import NumericError
from gridflow.exact_oracle import MixtureOracle
from gridflow.grid import encode_one_hot
from gridflow.oracle_suite import markov_inversion_check, score_fd_check
from gridflow.rng import RngStream
from gridflow.samplers import flow_from_score
from gridflow.schedule import Schedule

LIN = Schedule("linear")
COS = Schedule("cosine")


@pytest.fixture(scope="module")
def atoms():
    return [generate_complete(s) for s in range(8)]


@pytest.fixture(scope="module")
def oracle(atoms):
    return MixtureOracle(atoms)


class TestPosteriorWeights:
    def test_single_atom_weight_one(self, atoms):
        o = MixtureOracle(atoms[:1])
        w = o.posterior_weights(np.zeros((81, 9)), 0.5, LIN)
        assert w.shape == (1,)
        assert w[0] == pytest.approx(1.0)

    def test_on_atom_concentrates(self, oracle, atoms):
        z = encode_one_hot(atoms[2])
        t = 0.9
        alpha, _ = LIN.alpha_beta(t)
        w = oracle.posterior_weights(float(alpha) * z, t, LIN)
        assert np.argmax(w) == 2
        assert w[2] >= 0.99

    def test_symmetric_point_splits_evenly(self, atoms):
        o = MixtureOracle(atoms[:2])
        z0, z1 = o.atoms
        x = 0.5 * 0.7 * (z0 + z1)
        w = o.posterior_weights(x, 0.7, LIN)
        assert np.allclose(w, [0.5, 0.5], atol=1e-12)

    def test_no_overflow_at_small_beta(self, oracle):
        x = 100.0 * np.ones((81, 9))
        w = oracle.posterior_weights(x, 1 - 1e-4, LIN)
        assert np.isfinite(w).all()
        assert w.sum() == pytest.approx(1.0)

    def test_beta_floor(self, oracle):
        with pytest.raises(NumericError):
            oracle.posterior_weights(np.zeros((81, 9)), 1.0, LIN)

    def test_atom_cap(self, atoms):
        with pytest.raises(ValueError):
            MixtureOracle(atoms * 9)  # 72 > 64


class TestExactScore:
    def test_single_atom_closed_form(self, atoms, rng):
        o = MixtureOracle(atoms[:1])
        z = o.atoms[0]
        x = rng.standard_normal((81, 9))
        t = 0.6
        sc = o.score(x, t, LIN)
        assert np.allclose(sc, -(x - 0.6 * z) / 0.4**2, atol=1e-10)

    @pytest.mark.parametrize("kind", ["linear", "cosine"])
    def test_matches_finite_difference_gradient(self, oracle, kind):
        err = score_fd_check(oracle, Schedule(kind), probes=25, seed=3)
        assert err <= 1e-4

    def test_symmetry_axis_component_vanishes(self, atoms):
        o = MixtureOracle(atoms[:2])
        z0, z1 = o.atoms
        t = 0.7
        x = 0.7 * 0.5 * (z0 + z1)
        sc = o.score(x, t, LIN)
        axis = (z0 - z1).reshape(-1)
        assert abs(float(sc.reshape(-1) @ axis)) <= 1e-10 * np.linalg.norm(axis)

    def test_batched_matches_single(self, oracle, rng):
        xs = rng.standard_normal((5, 81, 9))
        batch = oracle.score(xs, 0.5, LIN)
        for i in range(5):
            assert np.allclose(batch[i], oracle.score(xs[i], 0.5, LIN), atol=1e-12)


class TestExactVelocity:
    def test_single_atom_linear_closed_form(self, atoms, rng):
        # For one atom on the linear path: u(x) = (z - x) / (1 - t).
        o = MixtureOracle(atoms[:1])
        z = o.atoms[0]
        x = rng.standard_normal((81, 9))
        t = 0.25
        u = o.velocity(x, t, LIN)
        assert np.allclose(u, (z - x) / 0.75, atol=1e-10)

    @pytest.mark.parametrize("kind", ["linear", "cosine"])
    def test_consistent_with_score_conversion(self, oracle, rng, kind):
        s = Schedule(kind)
        for t in (0.2, 0.5, 0.8):
            x = rng.standard_normal((81, 9))
            u = oracle.velocity(x, t, s)
            u_from_score = flow_from_score(oracle.score(x, t, s), x, t, s)
            denom = np.abs(u).max()
            assert np.abs(u - u_from_score).max() <= 1e-8 * max(denom, 1.0)

    def test_on_path_point_finite(self, atoms):
        o = MixtureOracle(atoms[:1])
        z = o.atoms[0]
        t = 0.9
        u = o.velocity(0.9 * z, t, LIN)
        assert np.isfinite(u).all()


def test_markov_inversion_identity():
    assert markov_inversion_check() <= 1e-10


def test_posterior_mean_is_convex_combination(oracle, rng):
    x = rng.standard_normal((81, 9))
    zbar = oracle.posterior_mean(x, 0.5, LIN)
    w = oracle.posterior_weights(x, 0.5, LIN)
    manual = np.einsum("n,nij->ij", w, oracle.atoms)
    assert np.allclose(zbar, manual, atol=1e-12)
