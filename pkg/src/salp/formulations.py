"""LP formulations: exact ALP, SALP (budget and penalty forms) and sampled SALP.

Full-model builders return :class:`~salp.lp.DenseLp` objects over ``r`` or
``(r, s)``; the sampled builder returns a :class:`~salp.structured.StructuredSalpLp`.
Constraint rows are laid out state-major: row ``x * n_actions + a``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .lp import DenseLp, LpError, solve_dense_lp
from .mdp import MdpModel, check_distribution, q_values
from .structured import (DEFAULT_BOX, SalpSolution, StructuredSalpLp, solve_salp_structured,
                         warm_start_resolve)

log = logging.getLogger(__name__)

# 0 followed by 0.00256 * 2**k, k = 0..8 (0.00256 ... 0.65536)
DEFAULT_THETA_SCHEDULE = (0.0,) + tuple(0.00256 * 2**k for k in range(9))


@dataclass(frozen=True)
class BasisSet:
    """K basis functions; ``evaluate`` maps a state (or batch) to feature rows."""

    K: int
    evaluate: Callable
    constant_index: int | None = None
    matrix: np.ndarray | None = None

    @classmethod
    def from_matrix(cls, Phi, require_constant: bool = True) -> "BasisSet":
        Phi = np.array(Phi, dtype=float)
        if Phi.ndim != 2 or not np.all(np.isfinite(Phi)):
            raise ValueError("basis matrix must be a finite 2-d array")
        Phi.setflags(write=False)
        ones = np.ones(Phi.shape[0])
        const = [j for j in range(Phi.shape[1]) if np.allclose(Phi[:, j], Phi[0, j]) and Phi[0, j] != 0]
        coef, *_ = np.linalg.lstsq(Phi, ones, rcond=None)
        in_span = np.max(np.abs(Phi @ coef - ones)) <= 1e-9
        if require_constant and not in_span:
            raise ValueError("the constant function must lie in the span of the basis")
        return cls(Phi.shape[1], lambda x: Phi[x], const[0] if const else None, Phi)

    def constant_direction(self) -> np.ndarray:
        """Weights u with Phi u = 1."""
        if self.constant_index is not None and self.matrix is None:
            u = np.zeros(self.K)
            u[self.constant_index] = 1.0
            return u
        coef, *_ = np.linalg.lstsq(self.matrix, np.ones(self.matrix.shape[0]), rcond=None)
        return coef


def _constant_in_span(Phi) -> bool:
    coef, *_ = np.linalg.lstsq(Phi, np.ones(Phi.shape[0]), rcond=None)
    return bool(np.max(np.abs(Phi @ coef - 1.0)) <= 1e-9)


def _check_basis(model: MdpModel, basis: BasisSet) -> np.ndarray:
    if basis.matrix is None or basis.matrix.shape[0] != model.n_states:
        raise ValueError("explicit formulations need a basis matrix with one row per state")
    if not _constant_in_span(basis.matrix):
        raise ValueError("the constant function must lie in the span of the basis")
    return basis.matrix


def bellman_rows(model: MdpModel, Phi: np.ndarray, states=None) -> tuple[np.ndarray, np.ndarray]:
    """Rows Phi(x) - alpha P_a(x, .) Phi and right-hand sides g(x, a), state-major."""
    states = np.arange(model.n_states) if states is None else np.asarray(states)
    A = model.n_actions
    nxt = np.einsum("axy,yk->xak", model.transitions[:, states, :], Phi)
    rows = Phi[states][:, None, :] - model.discount * nxt
    return rows.reshape(len(states) * A, Phi.shape[1]), model.costs[states].reshape(-1)


def build_alp(model: MdpModel, basis: BasisSet, nu) -> DenseLp:
    Phi = _check_basis(model, basis)
    nu = check_distribution(nu, model.n_states, "nu")
    A, b = bellman_rows(model, Phi)
    return DenseLp(Phi.T @ nu, A, b)


def _slack_block(model: MdpModel) -> np.ndarray:
    return -np.repeat(np.eye(model.n_states), model.n_actions, axis=0)


def build_salp(model: MdpModel, basis: BasisSet, nu, pi, theta: float) -> DenseLp:
    """Budget-form SALP over x = (r, s)."""
    if theta < 0:
        raise ValueError("theta must be nonnegative")
    Phi = _check_basis(model, basis)
    nu = check_distribution(nu, model.n_states, "nu")
    pi = check_distribution(pi, model.n_states, "pi")
    K, n = Phi.shape[1], model.n_states
    A, b = bellman_rows(model, Phi)
    G = np.vstack([np.hstack([A, _slack_block(model)]), np.concatenate([np.zeros(K), pi])])
    lower = np.concatenate([np.full(K, -np.inf), np.zeros(n)])
    return DenseLp(np.concatenate([Phi.T @ nu, np.zeros(n)]), G, np.concatenate([b, [theta]]), lower)


def build_salp_penalty(model: MdpModel, basis: BasisSet, nu, pi_star_nu) -> DenseLp:
    """Penalty-form SALP: maximise nu^T Phi r - 2/(1 - alpha) pi^T s."""
    Phi = _check_basis(model, basis)
    nu = check_distribution(nu, model.n_states, "nu")
    pi = check_distribution(pi_star_nu, model.n_states, "pi_star_nu")
    K, n = Phi.shape[1], model.n_states
    A, b = bellman_rows(model, Phi)
    G = np.hstack([A, _slack_block(model)])
    lower = np.concatenate([np.full(K, -np.inf), np.zeros(n)])
    c = np.concatenate([Phi.T @ nu, -2.0 / (1.0 - model.discount) * pi])
    return DenseLp(c, G, b, lower)


def solve_alp(model: MdpModel, basis: BasisSet, nu, tol: float = 1e-9) -> np.ndarray:
    r, _ = solve_dense_lp(build_alp(model, basis, nu), tol=tol)
    return r


def _dense_salp_solution(lp: DenseLp, K: int, measure, theta, tol) -> SalpSolution:
    x, report = solve_dense_lp(lp, tol=tol)
    r, s = x[:K], np.maximum(x[K:], 0.0)
    return SalpSolution(r, s, lp.objective(x), float(measure @ s), theta, report=report)


def solve_salp(model: MdpModel, basis: BasisSet, nu, pi, theta: float, tol: float = 1e-9) -> SalpSolution:
    lp = build_salp(model, basis, nu, pi, theta)
    return _dense_salp_solution(lp, basis.K, np.asarray(pi, dtype=float), theta, tol)


def solve_salp_penalty(model: MdpModel, basis: BasisSet, nu, pi_star_nu, tol: float = 1e-9) -> SalpSolution:
    lp = build_salp_penalty(model, basis, nu, pi_star_nu)
    return _dense_salp_solution(lp, basis.K, np.asarray(pi_star_nu, dtype=float), None, tol)


# -- sampled programs ---------------------------------------------------------

class ExplicitConstraints:
    """Constraint generator for sampled states of an explicit MDP (state indices)."""

    def __init__(self, model: MdpModel, basis: BasisSet):
        self.model = model
        self.Phi = _check_basis(model, basis)
        self.basis = basis

    @property
    def discount(self) -> float:
        return self.model.discount

    def distinct(self, states):
        states = np.asarray(states, dtype=np.int64)
        if states.ndim != 1 or np.any(states < 0) or np.any(states >= self.model.n_states):
            raise ValueError("sampled states must be valid state indices")
        return np.unique(states, return_counts=True)

    def features(self, states) -> np.ndarray:
        return self.Phi[np.asarray(states, dtype=np.int64)]

    def constraint_block(self, states):
        """(A11, b, row_state, terminal_mask) for distinct states."""
        A, b = bellman_rows(self.model, self.Phi, states)
        row_state = np.repeat(np.arange(len(states)), self.model.n_actions)
        return A, b, row_state, np.zeros(len(states), dtype=bool)


def build_sampled_salp(states, generator, mode: str = "budget", theta: float = 0.0,
                       discount: float | None = None, objective_weights=None,
                       box: float | tuple | None = DEFAULT_BOX) -> StructuredSalpLp:
    """Sampled SALP over a multiset of states.

    ``mode="budget"``: maximise mean Phi r over the sample subject to the
    empirical slack mass being at most ``theta``.  ``mode="penalty"``: subtract
    2/((1 - alpha) S) times the total slack instead.  Duplicate states share one
    slack whose weight is their empirical frequency.  Terminal states get no
    constraint and no slack; they are dropped with a warning.
    ``objective_weights`` replaces the empirical mean feature vector (e.g. by
    Phi^T nu when nu is known exactly); ``box`` bounds each weight by +-box or
    by explicit (lower, upper) arrays.
    """
    distinct, counts = generator.distinct(states)
    if counts.sum() < 1:
        raise ValueError("need at least one sampled state")
    A11, b, row_state, terminal = generator.constraint_block(distinct)
    if np.any(terminal):
        log.warning("dropping %d terminal sampled states (no legal actions)", int(terminal.sum()))
        keep = ~terminal
        remap = np.cumsum(keep) - 1
        row_keep = keep[row_state]
        A11, b, row_state = A11[row_keep], b[row_keep], remap[row_state[row_keep]]
        distinct, counts = distinct[keep], counts[keep]
    if len(counts) == 0:
        raise ValueError("every sampled state is terminal")
    measure = counts / counts.sum()
    if objective_weights is None:
        c_r = generator.features(distinct).T @ measure
    else:
        c_r = np.asarray(objective_weights, dtype=float)
    K = A11.shape[1]
    if box is None:
        lo = hi = None
    elif np.isscalar(box):
        lo, hi = np.full(K, -float(box)), np.full(K, float(box))
    else:
        lo, hi = (np.asarray(v, dtype=float) for v in box)
    if mode == "budget":
        return StructuredSalpLp(A11, row_state, b, c_r, measure, theta=float(theta), r_lower=lo, r_upper=hi)
    if mode == "penalty":
        if discount is None:
            discount = generator.discount
        return StructuredSalpLp(A11, row_state, b, c_r, measure, penalty=2.0 / (1.0 - discount),
                                r_lower=lo, r_upper=hi)
    raise ValueError(f"unknown mode {mode!r}")


def greedy_from_weights(r, basis: BasisSet, model: MdpModel, state: int) -> int:
    """Action minimising g(x, a) + alpha E[Phi r(x')]; lowest index on ties."""
    Phi = _check_basis(model, basis)
    q = q_values(Phi @ np.asarray(r, dtype=float), model)
    return int(np.argmin(q[state]))


def greedy_policy_from_weights(r, basis: BasisSet, model: MdpModel) -> np.ndarray:
    Phi = _check_basis(model, basis)
    return np.argmin(q_values(Phi @ np.asarray(r, dtype=float), model), axis=1).astype(np.int64)


@dataclass
class LineSearchRow:
    theta: float
    objective: float
    budget_used: float
    mean_score: float
    stderr: float
    solve_time_s: float
    iterations: int
    error: str = ""


CSV_COLUMNS = ("theta", "objective", "budget_used", "mean_score", "stderr", "solve_time_s", "iterations")


def theta_line_search(lp: StructuredSalpLp, schedule, evaluate, tol: float = 1e-8):
    """Warm-started sweep over ``schedule``; ``evaluate(r) -> (mean, stderr)``.

    Scores are "higher is better".  Returns (best_theta, best_solution, rows);
    failures at one theta are recorded in its row and the sweep continues.
    """
    schedule = [float(t) for t in schedule]
    if not schedule or schedule[0] != 0.0 or any(b <= a for a, b in zip(schedule, schedule[1:])):
        raise ValueError("theta schedule must start at 0 and be strictly increasing")
    rows: list[LineSearchRow] = []
    solutions: list[SalpSolution | None] = []
    prev: SalpSolution | None = None
    for theta in schedule:
        try:
            if prev is None:
                sol, rep = solve_salp_structured(lp.with_theta(theta), tol=tol)
            else:
                sol, rep = warm_start_resolve(lp, prev, theta, tol=tol)
            prev = sol
        except (LpError, np.linalg.LinAlgError) as exc:
            rows.append(LineSearchRow(theta, math.nan, math.nan, math.nan, math.nan, math.nan, -1, str(exc)))
            solutions.append(None)
            continue
        try:
            mean, se = evaluate(sol.weights)
            err = ""
        except Exception as exc:  # evaluation failures are per-theta
            mean, se, err = math.nan, math.nan, repr(exc)
        rows.append(LineSearchRow(theta, sol.objective, sol.budget_used, float(mean), float(se),
                                  rep.wall_time, rep.iterations, err))
        solutions.append(sol)
    best = None
    for i, row in enumerate(rows):
        if math.isnan(row.mean_score):
            continue
        if best is None or row.mean_score > rows[best].mean_score:
            best = i
    if best is None:
        return None, None, rows
    return rows[best].theta, solutions[best], rows
