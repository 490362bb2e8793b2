import numpy as np
import pytest

from conftest import model_from_seed
from helpers_lp import random_sampled_lp
from salp.formulations import (DEFAULT_THETA_SCHEDULE, BasisSet, ExplicitConstraints, build_alp, build_salp,
                               build_salp_penalty, build_sampled_salp, greedy_from_weights,
                               greedy_policy_from_weights, solve_alp, solve_salp, solve_salp_penalty,
                               theta_line_search)
from salp.lp import solve_dense_lp
from salp.mdp import MdpModel, bellman_apply, greedy_policy, occupancy, optimal_values, random_mdp
from salp.structured import solve_salp_structured


def random_basis(n, K, rng):
    return np.column_stack([np.ones(n), rng.standard_normal((n, K - 1))])


def instance(seed, n=30, A=4, K=5, alpha=0.9):
    rng = np.random.default_rng(seed)
    model = random_mdp(n, A, alpha, rng)
    return model, BasisSet.from_matrix(random_basis(n, K, rng)), np.full(n, 1.0 / n)


def bisect_constant(model, lo=-1e3, hi=1e3, iters=200):
    """Largest c with c <= T(c 1) componentwise, by bisection."""
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if np.all(mid <= bellman_apply(np.full(model.n_states, mid), model)):
            lo = mid
        else:
            hi = mid
    return lo


class TestBasis:
    def test_rejects_missing_constant(self):
        with pytest.raises(ValueError):
            BasisSet.from_matrix(np.array([[1.0], [2.0], [3.0]]))

    def test_constant_in_span_accepted(self):
        b = BasisSet.from_matrix(np.array([[1.0, 0.0], [0.0, 1.0]]))
        np.testing.assert_allclose(b.matrix @ b.constant_direction(), 1.0)

    def test_alp_rejects_basis_without_constant(self):
        m = model_from_seed(0, n=3)
        bad = BasisSet.from_matrix(np.array([[1.0], [2.0], [3.0]]), require_constant=False)
        with pytest.raises(ValueError):
            build_alp(m, bad, np.full(3, 1 / 3))


class TestAlp:
    def test_identity_basis_is_exact(self):
        m, _, nu = instance(0)
        r = solve_alp(m, BasisSet.from_matrix(np.eye(30)), nu)
        np.testing.assert_allclose(r, optimal_values(m), atol=1e-8)

    @pytest.mark.parametrize("seed", range(3))
    def test_constant_basis_matches_bisection(self, seed):
        m, _, nu = instance(seed)
        r = solve_alp(m, BasisSet.from_matrix(np.ones((30, 1))), nu)
        assert r[0] == pytest.approx(bisect_constant(m), abs=1e-8)

    @pytest.mark.parametrize("seed", range(5))
    def test_lower_bound(self, seed):
        m, basis, nu = instance(seed)
        r = solve_alp(m, basis, nu)
        assert np.all(basis.matrix @ r <= optimal_values(m) + 1e-7)

    def test_shape(self):
        m, basis, nu = instance(0)
        lp = build_alp(m, basis, nu)
        assert lp.A.shape == (30 * 4, 5)


class TestSalp:
    @pytest.mark.parametrize("seed", range(5))
    def test_theta_zero_equals_alp(self, seed):
        m, basis, nu = instance(seed)
        pi = occupancy(m, greedy_policy(optimal_values(m), m), nu)
        alp_obj = nu @ basis.matrix @ solve_alp(m, basis, nu)
        assert solve_salp(m, basis, nu, pi, 0.0).objective == pytest.approx(alp_obj, abs=1e-8)

    def test_rejects_negative_theta(self):
        m, basis, nu = instance(0)
        with pytest.raises(ValueError):
            build_salp(m, basis, nu, nu, -0.1)

    def test_relaxation_dominates_alp(self):
        m, basis, nu = instance(1)
        r = solve_alp(m, basis, nu)
        alp_obj = nu @ basis.matrix @ r
        for theta in (0.01, 0.1, 1.0):
            sol = solve_salp(m, basis, nu, nu, theta)
            assert sol.objective >= alp_obj - 1e-9
            assert sol.budget_used <= theta + 1e-9
            assert np.all(sol.slacks >= -1e-9)

    def test_two_state_example_strictly_improves(self):
        # one action that stays put; costs 0 and 10; constant basis
        m = MdpModel(np.eye(2)[None], np.array([[0.0], [10.0]]), 0.5)
        basis = BasisSet.from_matrix(np.ones((2, 1)))
        nu = pi = np.array([0.5, 0.5])
        alp = solve_salp(m, basis, nu, pi, 0.0).objective
        gains = [solve_salp(m, basis, nu, pi, t).objective - alp for t in np.linspace(0, 2, 9)]
        assert alp == pytest.approx(0.0, abs=1e-9)
        assert max(gains) > 1.0
        # violating only the cheap state: s(0) = (1 - alpha) c and pi(0) s(0) <= theta give c = 4 theta
        assert gains[1] == pytest.approx(4 * 0.25, abs=1e-8)

    def test_concave_nondecreasing_in_theta(self):
        m, basis, nu = instance(2)
        thetas = np.linspace(0, 0.5, 11)
        vals = [solve_salp(m, basis, nu, nu, t).objective for t in thetas]
        assert all(b >= a - 1e-9 for a, b in zip(vals, vals[1:]))
        for i in range(len(vals) - 2):
            assert vals[i + 1] >= 0.5 * (vals[i] + vals[i + 2]) - 1e-8

    def test_solution_feasible_independently(self):
        m, basis, nu = instance(3)
        sol = solve_salp(m, basis, nu, nu, 0.05)
        Phi = basis.matrix
        J = Phi @ sol.weights
        q = m.costs + m.discount * np.einsum("axy,y->xa", m.transitions, J)
        assert np.all(J[:, None] <= q + sol.slacks[:, None] + 1e-8)
        assert nu @ sol.slacks <= 0.05 + 1e-8


class TestPenalty:
    def test_identity_basis_gives_optimum(self):
        m, _, nu = instance(4)
        J_star = optimal_values(m)
        pi = occupancy(m, greedy_policy(J_star, m), nu)
        sol = solve_salp_penalty(m, BasisSet.from_matrix(np.eye(30)), nu, pi)
        np.testing.assert_allclose(sol.weights, J_star, atol=1e-7)
        np.testing.assert_allclose(sol.slacks, 0.0, atol=1e-8)

    def test_dominates_alp(self):
        m, basis, nu = instance(5)
        J_star = optimal_values(m)
        pi = occupancy(m, greedy_policy(J_star, m), nu)
        alp_obj = nu @ basis.matrix @ solve_alp(m, basis, nu)
        assert solve_salp_penalty(m, basis, nu, pi).objective >= alp_obj - 1e-9

    def test_objective_weights(self):
        m, basis, nu = instance(5)
        lp = build_salp_penalty(m, basis, nu, nu)
        np.testing.assert_allclose(lp.c[basis.K:], -2.0 / (1 - m.discount) * nu)


class TestSampled:
    def test_every_state_once_matches_full(self):
        m, basis, _ = instance(6)
        u = np.full(30, 1 / 30)
        lp = build_sampled_salp(np.arange(30), ExplicitConstraints(m, basis), theta=0.03, box=None)
        sol, _ = solve_salp_structured(lp, tol=1e-10)
        assert sol.objective == pytest.approx(solve_salp(m, basis, u, u, 0.03).objective, abs=1e-8)

    def test_duplicates_use_empirical_measure(self, rng):
        m, basis, _ = instance(7)
        states = rng.integers(0, 30, size=80)
        lp = build_sampled_salp(states, ExplicitConstraints(m, basis), theta=0.02, box=None)
        counts = np.bincount(states, minlength=30)
        assert lp.S == np.count_nonzero(counts)
        # full program restricted to the visited states with the empirical measure on both sides
        rho = counts / counts.sum()
        keep = counts > 0
        Phi = basis.matrix
        from salp.formulations import bellman_rows
        from salp.lp import DenseLp
        A, b = bellman_rows(m, Phi, np.flatnonzero(keep))
        S = int(keep.sum())
        A12 = -np.repeat(np.eye(S), m.n_actions, axis=0)
        G = np.vstack([np.hstack([A, A12]), np.concatenate([np.zeros(basis.K), rho[keep]])])
        lp_ref = DenseLp(np.concatenate([Phi.T @ rho, np.zeros(S)]), G, np.concatenate([b, [0.02]]),
                         np.concatenate([np.full(basis.K, -np.inf), np.zeros(S)]))
        x, _ = solve_dense_lp(lp_ref, tol=1e-10)
        sol, _ = solve_salp_structured(lp, tol=1e-10)
        assert sol.objective == pytest.approx(lp_ref.objective(x), abs=1e-8)

    @pytest.mark.parametrize("seed", range(4))
    def test_penalty_budget_duality(self, seed):
        lp_pen, _, _ = random_sampled_lp(seed, mode="penalty", K=4)
        pen, _ = solve_salp_structured(lp_pen, tol=1e-10)
        lp_bud, _, _ = random_sampled_lp(seed, mode="budget", theta=pen.budget_used, K=4)
        bud, _ = solve_salp_structured(lp_bud, tol=1e-10)
        assert bud.objective == pytest.approx(lp_pen.c_r @ pen.weights, rel=1e-7, abs=1e-7)

    def test_penalty_weight(self):
        lp, model, _ = random_sampled_lp(0, mode="penalty")
        np.testing.assert_allclose(lp.c_s, -2.0 / (1 - model.discount) * lp.slack_measure)

    def test_rejects_unknown_mode(self):
        m, basis, _ = instance(0)
        with pytest.raises(ValueError):
            build_sampled_salp([0, 1], ExplicitConstraints(m, basis), mode="both")


class TestGreedyFromWeights:
    def test_identity_basis_optimal_action(self):
        m, _, _ = instance(8)
        J = optimal_values(m)
        basis = BasisSet.from_matrix(np.eye(30))
        expect = greedy_policy(J, m)
        assert [greedy_from_weights(J, basis, m, x) for x in range(30)] == expect.tolist()
        np.testing.assert_array_equal(greedy_policy_from_weights(J, basis, m), expect)

    def test_constant_basis_minimises_immediate_cost(self):
        m, _, _ = instance(9)
        pol = greedy_policy_from_weights([7.0], BasisSet.from_matrix(np.ones((30, 1))), m)
        np.testing.assert_array_equal(pol, np.argmin(m.costs, axis=1))


class TestLineSearch:
    def test_default_schedule(self):
        assert DEFAULT_THETA_SCHEDULE[0] == 0.0
        assert len(DEFAULT_THETA_SCHEDULE) == 10
        assert DEFAULT_THETA_SCHEDULE[1] == pytest.approx(0.00256)
        assert DEFAULT_THETA_SCHEDULE[7] == pytest.approx(0.16384)
        assert DEFAULT_THETA_SCHEDULE[-1] == pytest.approx(0.65536)

    def test_zero_only_is_sampled_alp(self):
        lp, _, _ = random_sampled_lp(0)
        best, sol, rows = theta_line_search(lp, [0.0], lambda r: (1.0, 0.0))
        ref, _ = solve_salp_structured(lp.with_theta(0.0))
        assert best == 0.0 and len(rows) == 1
        np.testing.assert_array_equal(sol.weights, ref.weights)

    def test_picks_best_and_breaks_ties_low(self):
        lp, _, _ = random_sampled_lp(1)
        scores = iter([1.0, 5.0, 5.0, 2.0])
        best, _, rows = theta_line_search(lp, [0.0, 0.01, 0.02, 0.04], lambda r: (next(scores), 0.1))
        assert best == 0.01
        assert [r.mean_score for r in rows] == [1.0, 5.0, 5.0, 2.0]

    def test_eval_failure_is_recorded(self):
        lp, _, _ = random_sampled_lp(2)
        calls = iter([None, RuntimeError("boom"), None])

        def evaluate(r):
            exc = next(calls)
            if exc:
                raise exc
            return 3.0, 0.0

        best, _, rows = theta_line_search(lp, [0.0, 0.01, 0.02], evaluate)
        assert np.isnan(rows[1].mean_score) and "boom" in rows[1].error
        assert best == 0.0

    def test_rejects_bad_schedule(self):
        lp, _, _ = random_sampled_lp(0)
        with pytest.raises(ValueError):
            theta_line_search(lp, [0.01, 0.02], lambda r: (0, 0))
        with pytest.raises(ValueError):
            theta_line_search(lp, [0.0, 0.02, 0.01], lambda r: (0, 0))
