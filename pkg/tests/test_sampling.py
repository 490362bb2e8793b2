import math

import numpy as np
import pytest
from scipy import stats

from salp.formulations import BasisSet, ExplicitConstraints
from salp.mdp import MdpModel, optimal_values, occupancy, random_mdp
from salp.sampling import (ExplicitEnv, SampleSet, dumps_samples, estimate_B, load_samples, loads_samples,
                           sample_baseline_states, sample_occupancy_exact, sample_size_bound, save_samples)


def tv(p, q):
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def empirical(states, n):
    return np.bincount(states, minlength=n) / len(states)


def stationary(P):
    w, V = np.linalg.eig(P.T)
    v = np.real(V[:, np.argmin(np.abs(w - 1.0))])
    return v / v.sum()


def formula_oracle(B, K, eps, delta):
    """Independent transcription of the sample-size formula."""
    first = 64 * B**2 / eps**2
    second = 2 * (K + 2) * math.log(16 * math.e * B / eps) + math.log(8 / delta)
    return math.ceil(first * second)


class TerminatingEnv:
    """Every episode ends after ``length`` steps."""

    kind = "explicit"

    def __init__(self, length):
        self.length = length

    def trace(self, policy, key, burn_in, stride, limit):
        taken = list(range(burn_in, self.length, stride))[:limit]
        return np.asarray(taken, dtype=np.int64) % 3


class TestBaselineSampling:
    def test_exact_count_and_determinism(self):
        m = random_mdp(8, 2, 0.9, np.random.default_rng(0))
        env = ExplicitEnv(m)
        a = sample_baseline_states(env, np.zeros(8, dtype=int), 137, burn_in=5, stride=3, seed=4)
        b = sample_baseline_states(env, np.zeros(8, dtype=int), 137, burn_in=5, stride=3, seed=4)
        assert a.S == 137 and a == b
        c = sample_baseline_states(env, np.zeros(8, dtype=int), 137, burn_in=5, stride=3, seed=5)
        assert not np.array_equal(a.states, c.states)

    def test_restarts_on_termination(self):
        # episodes of 12 steps with burn-in 10 and stride 100 yield one state each
        samples = sample_baseline_states(TerminatingEnv(12), None, 25, burn_in=10, stride=100, seed=0)
        assert samples.S == 25
        assert samples.meta["episodes"] == 25

    def test_gives_up_when_burn_in_never_reached(self):
        with pytest.raises(RuntimeError):
            sample_baseline_states(TerminatingEnv(5), None, 3, burn_in=10, stride=1, seed=0)

    @pytest.mark.parametrize("bad", [dict(S=0), dict(burn_in=0), dict(stride=0)])
    def test_rejects_bad_parameters(self, bad):
        m = random_mdp(3, 2, 0.9, np.random.default_rng(0))
        kw = dict(S=5, burn_in=1, stride=1) | bad
        with pytest.raises(ValueError):
            sample_baseline_states(ExplicitEnv(m), np.zeros(3, dtype=int), kw["S"], kw["burn_in"], kw["stride"])

    def test_converges_to_stationary_distribution(self):
        m = random_mdp(10, 2, 0.9, np.random.default_rng(1))
        pol = np.zeros(10, dtype=int)
        samples = sample_baseline_states(ExplicitEnv(m), pol, 50_000, burn_in=50, stride=2, seed=0)
        pi = stationary(m.transitions[0])
        assert tv(empirical(samples.states, 10), pi) < 0.05


class TestOccupancySampling:
    def test_tiny_discount_draws_from_nu(self):
        m = random_mdp(6, 2, 1e-12, np.random.default_rng(2))
        nu = np.array([0.3, 0.25, 0.2, 0.1, 0.1, 0.05])
        s = sample_occupancy_exact(m, np.zeros(6, dtype=int), nu, 20_000, seed=0)
        counts = np.bincount(s.states, minlength=6)
        assert stats.chisquare(counts, 20_000 * nu).pvalue > 0.01

    def test_matches_occupancy(self):
        m = random_mdp(15, 3, 0.9, np.random.default_rng(3))
        pol = np.random.default_rng(0).integers(0, 3, 15)
        nu = np.full(15, 1 / 15)
        s = sample_occupancy_exact(m, pol, nu, 50_000, seed=1)
        assert tv(empirical(s.states, 15), occupancy(m, pol, nu)) < 0.03

    def test_tv_shrinks_with_S(self):
        m = random_mdp(30, 3, 0.9, np.random.default_rng(4))
        pol = np.zeros(30, dtype=int)
        nu = np.full(30, 1 / 30)
        pi = occupancy(m, pol, nu)
        means = [np.mean([tv(empirical(sample_occupancy_exact(m, pol, nu, S, seed=k).states, 30), pi)
                          for k in range(5)]) for S in (1_000, 10_000, 100_000)]
        assert means[0] > means[1] > means[2]

    def test_deterministic(self):
        m = random_mdp(5, 2, 0.9, np.random.default_rng(5))
        nu = np.full(5, 0.2)
        assert sample_occupancy_exact(m, np.zeros(5, dtype=int), nu, 100, 3) == \
            sample_occupancy_exact(m, np.zeros(5, dtype=int), nu, 100, 3)


class TestSampleSizeBound:
    def test_reference_tuple(self):
        assert sample_size_bound(1.0, 22, 0.1, 0.05) == formula_oracle(1.0, 22, 0.1, 0.05)

    def test_random_tuples(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            B = float(rng.uniform(0.1, 50))
            eps = float(rng.uniform(0.01, 1.0)) * B
            K = int(rng.integers(1, 40))
            delta = float(rng.uniform(1e-6, 0.5))
            assert sample_size_bound(B, K, eps, delta) == formula_oracle(B, K, eps, delta)

    def test_doubling_epsilon(self):
        assert sample_size_bound(2.0, 10, 0.2, 0.1) < sample_size_bound(2.0, 10, 0.1, 0.1) / 2

    def test_nondecreasing_in_K(self):
        vals = [sample_size_bound(1.0, K, 0.1, 0.1) for K in range(1, 30)]
        assert all(b >= a for a, b in zip(vals, vals[1:]))

    @pytest.mark.parametrize("args", [(1.0, 5, 2.0, 0.1), (1.0, 5, 0.0, 0.1), (1.0, 5, 0.1, 0.6),
                                      (1.0, 5, 0.1, 0.0), (1.0, 0, 0.1, 0.1), (math.inf, 5, 0.1, 0.1)])
    def test_rejects_out_of_range(self, args):
        with pytest.raises(ValueError):
            sample_size_bound(*args)


class TestEstimateB:
    def setup_method(self):
        rng = np.random.default_rng(6)
        self.model = random_mdp(12, 2, 0.9, rng)
        self.Phi = np.column_stack([np.ones(12), rng.standard_normal(12)])
        self.gen = ExplicitConstraints(self.model, BasisSet.from_matrix(self.Phi))
        self.states = rng.integers(0, 12, size=7)

    def test_point_box(self):
        got = estimate_B(np.zeros(2), np.zeros(2), self.states, self.gen)
        assert got == max(0.0, float(np.max(-self.model.costs[np.unique(self.states)])))

    def test_grid_oracle(self):
        lo, hi = np.array([-0.5, -0.3]), np.array([0.5, 0.4])
        g1, g2 = np.meshgrid(np.arange(lo[0], hi[0] + 5e-4, 1e-3), np.arange(lo[1], hi[1] + 5e-4, 1e-3))
        R = np.stack([np.clip(g1.ravel(), lo[0], hi[0]), np.clip(g2.ravel(), lo[1], hi[1])])
        best = 0.0
        m = self.model
        for x in np.unique(self.states):
            for a in range(m.n_actions):
                row = self.Phi[x] - m.discount * m.transitions[a, x] @ self.Phi
                best = max(best, float(np.max(row @ R - m.costs[x, a])))
        assert estimate_B(lo, hi, self.states, self.gen) == pytest.approx(best, abs=1e-9)

    def test_monotone_in_box(self):
        small = estimate_B(-np.ones(2), np.ones(2), self.states, self.gen)
        big = estimate_B(-3 * np.ones(2), 2 * np.ones(2), self.states, self.gen)
        assert big >= small >= 0.0

    def test_identity_basis_at_optimum(self):
        m = self.model
        J = optimal_values(m)
        gen = ExplicitConstraints(m, BasisSet.from_matrix(np.eye(12)))
        assert estimate_B(J, J, np.arange(12), gen) == pytest.approx(0.0, abs=1e-9)
        assert estimate_B(J - 1, J + 1, np.arange(12), gen) > 0

    def test_rejects_infinite_box(self):
        with pytest.raises(ValueError):
            estimate_B(np.full(2, -np.inf), np.ones(2), self.states, self.gen)


class TestSerialisation:
    def test_explicit_round_trip(self, tmp_path):
        s = SampleSet(np.array([3, 1, 4, 1, 5]), "exact-occupancy", 9)
        save_samples(s, tmp_path / "s.ndjson")
        assert load_samples(tmp_path / "s.ndjson") == s

    def test_header_count_checked(self):
        text = dumps_samples(SampleSet(np.array([1, 2]), "exact-occupancy", 0))
        with pytest.raises(ValueError):
            loads_samples("\n".join(text.splitlines()[:-1]))

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            SampleSet(np.array([], dtype=int), "exact-occupancy", 0)
