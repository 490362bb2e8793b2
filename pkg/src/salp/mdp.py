"""Explicit finite MDPs and exact dynamic-programming oracles.

Everything here is small-model ground truth: Bellman operators, policy
evaluation by dense LU, value iteration, discounted occupancy measures and the
exact LP.  Value functions, policies and state distributions are plain numpy
vectors; the functions validate shapes and raise ``ValueError`` on mismatch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import scipy.linalg

ROW_SUM_TOL = 1e-12
DIST_SUM_TOL = 1e-12


class MdpFormatError(ValueError):
    """Raised when an MDP file is malformed; ``line`` points into the file."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class MdpModel:
    """Finite discounted cost-minimising MDP.

    ``transitions[a, x, y]`` is P_a(x, y); ``costs[x, a]`` is g(x, a).
    """

    transitions: np.ndarray
    costs: np.ndarray
    discount: float

    def __post_init__(self):
        P = _readonly(self.transitions)
        g = _readonly(self.costs)
        object.__setattr__(self, "transitions", P)
        object.__setattr__(self, "costs", g)
        object.__setattr__(self, "discount", float(self.discount))
        if P.ndim != 3 or P.shape[1] != P.shape[2]:
            raise ValueError(f"transitions must have shape (A, n, n), got {P.shape}")
        n_actions, n_states = P.shape[0], P.shape[1]
        if n_states < 1 or n_actions < 1:
            raise ValueError("need at least one state and one action")
        if g.shape != (n_states, n_actions):
            raise ValueError(f"costs must have shape ({n_states}, {n_actions}), got {g.shape}")
        if not np.all(np.isfinite(g)):
            raise ValueError("costs must be finite")
        if not np.all(np.isfinite(P)) or np.any(P < 0):
            raise ValueError("transition probabilities must be finite and nonnegative")
        worst = np.max(np.abs(P.sum(axis=2) - 1.0))
        if worst > ROW_SUM_TOL:
            raise ValueError(f"transition rows must sum to 1 (worst deviation {worst:.3e})")
        if not 0.0 < self.discount < 1.0:
            raise ValueError(f"discount must lie in (0, 1), got {self.discount}")

    @property
    def n_states(self) -> int:
        return self.transitions.shape[1]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[0]


def _vector(v, n: int, name: str) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape != (n,):
        raise ValueError(f"{name} must have shape ({n},), got {v.shape}")
    return v


def check_policy(policy, model: MdpModel) -> np.ndarray:
    policy = np.asarray(policy)
    if policy.shape != (model.n_states,):
        raise ValueError(f"policy must have shape ({model.n_states},), got {policy.shape}")
    if not np.issubdtype(policy.dtype, np.integer):
        raise ValueError("policy must hold integer action indices")
    if np.any(policy < 0) or np.any(policy >= model.n_actions):
        raise ValueError("policy action index out of range")
    return policy.astype(np.int64)


def check_distribution(nu, n: int, name: str = "distribution") -> np.ndarray:
    nu = _vector(nu, n, name)
    if np.any(nu < 0):
        raise ValueError(f"{name} has negative entries")
    if abs(nu.sum() - 1.0) > DIST_SUM_TOL * max(1, n):
        raise ValueError(f"{name} must sum to 1 (got {nu.sum()!r})")
    return nu


def q_values(J, model: MdpModel) -> np.ndarray:
    """Matrix of g(x, a) + alpha * sum_y P_a(x, y) J(y), shape (n, A)."""
    J = _vector(J, model.n_states, "J")
    return model.costs + model.discount * np.einsum("axy,y->xa", model.transitions, J)


def bellman_apply(J, model: MdpModel) -> np.ndarray:
    return q_values(J, model).min(axis=1)


def policy_matrices(policy, model: MdpModel) -> tuple[np.ndarray, np.ndarray]:
    """Return (P_mu, g_mu)."""
    policy = check_policy(policy, model)
    idx = np.arange(model.n_states)
    return model.transitions[policy, idx, :], model.costs[idx, policy]


def bellman_policy_apply(J, policy, model: MdpModel) -> np.ndarray:
    J = _vector(J, model.n_states, "J")
    P, g = policy_matrices(policy, model)
    return g + model.discount * P @ J


def greedy_policy(J, model: MdpModel) -> np.ndarray:
    """Greedy policy for J; exact ties go to the lowest action index."""
    return np.argmin(q_values(J, model), axis=1).astype(np.int64)


def _resolvent_lu(policy, model: MdpModel):
    P, g = policy_matrices(policy, model)
    M = np.eye(model.n_states) - model.discount * P
    return M, scipy.linalg.lu_factor(M, check_finite=False), g


def _solve_refined(M, lu, rhs, trans: int = 0, tol: float = 1e-10) -> np.ndarray:
    x = scipy.linalg.lu_solve(lu, rhs, trans=trans, check_finite=False)
    A = M.T if trans else M
    for _ in range(3):
        resid = rhs - A @ x
        if np.max(np.abs(resid), initial=0.0) <= tol * max(1.0, np.max(np.abs(rhs), initial=0.0)):
            return x
        x = x + scipy.linalg.lu_solve(lu, resid, trans=trans, check_finite=False)
    resid = rhs - A @ x
    if np.max(np.abs(resid), initial=0.0) > tol * max(1.0, np.max(np.abs(rhs), initial=0.0)):
        raise np.linalg.LinAlgError("linear solve did not reach the residual target")
    return x


def policy_value(policy, model: MdpModel) -> np.ndarray:
    """J_mu, the solution of (I - alpha P_mu) J = g_mu."""
    M, lu, g = _resolvent_lu(policy, model)
    return _solve_refined(M, lu, g)


def resolvent_apply(model: MdpModel, policy, s) -> np.ndarray:
    """(I - alpha P_mu)^{-1} s."""
    s = _vector(s, model.n_states, "s")
    M, lu, _ = _resolvent_lu(policy, model)
    return _solve_refined(M, lu, s)


def occupancy(model: MdpModel, policy, nu) -> np.ndarray:
    """Discounted state-visit distribution (1 - alpha) nu^T (I - alpha P_mu)^{-1}."""
    nu = check_distribution(nu, model.n_states, "nu")
    M, lu, _ = _resolvent_lu(policy, model)
    pi = (1.0 - model.discount) * _solve_refined(M, lu, nu, trans=1)
    return np.maximum(pi, 0.0)


class ValueIterationResult(NamedTuple):
    values: np.ndarray
    iterations: int
    residual: float


def exact_value_iteration(model: MdpModel, tol: float = 1e-12, max_iter: int = 1_000_000) -> ValueIterationResult:
    """Iterate J <- TJ from zero until ||TJ - J||_inf <= tol."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    J = np.zeros(model.n_states)
    for it in range(1, max_iter + 1):
        TJ = bellman_apply(J, model)
        J = TJ
        resid = float(np.max(np.abs(bellman_apply(J, model) - J)))
        if resid <= tol:
            return ValueIterationResult(J, it, resid)
    raise RuntimeError(f"value iteration did not reach tol={tol} in {max_iter} iterations")


def optimal_values(model: MdpModel) -> np.ndarray:
    """J* to working precision: value iteration polished by one exact policy solve."""
    J = exact_value_iteration(model, tol=1e-10).values
    J_pol = policy_value(greedy_policy(J, model), model)
    if np.max(np.abs(bellman_apply(J_pol, model) - J_pol)) <= np.max(np.abs(bellman_apply(J, model) - J)):
        return J_pol
    return J


def solve_exact_lp(model: MdpModel, nu, tol: float = 1e-9) -> np.ndarray:
    """Maximise nu^T J subject to J <= TJ; nu needs full support."""
    from .lp import DenseLp, solve_dense_lp

    nu = check_distribution(nu, model.n_states, "nu")
    if np.any(nu <= 0):
        raise ValueError("exact LP needs state-relevance weights with full support")
    n, A = model.n_states, model.n_actions
    rows = np.repeat(np.eye(n), A, axis=0) - model.discount * model.transitions.transpose(1, 0, 2).reshape(n * A, n)
    lp = DenseLp(c=nu, A=rows, b=model.costs.reshape(-1))
    x, _ = solve_dense_lp(lp, tol=tol)
    return x


def random_mdp(n_states: int, n_actions: int, discount: float, rng: np.random.Generator,
               branching: int | None = None) -> MdpModel:
    """Random MDP with Dirichlet rows (optionally sparse) and U[0, 1) costs."""
    P = np.zeros((n_actions, n_states, n_states))
    for a in range(n_actions):
        for x in range(n_states):
            if branching is None or branching >= n_states:
                P[a, x] = rng.dirichlet(np.ones(n_states))
            else:
                support = rng.choice(n_states, size=branching, replace=False)
                P[a, x, support] = rng.dirichlet(np.ones(branching))
    P /= P.sum(axis=2, keepdims=True)
    return MdpModel(P, rng.random((n_states, n_actions)), discount)


# -- JSON model files ---------------------------------------------------------

def _line_of(text: str, path: tuple) -> int | None:
    """Line number of the JSON value addressed by ``path`` (keys / indices)."""
    dec = json.JSONDecoder()
    ws = " \t\r\n"

    def skip(i):
        while i < len(text) and text[i] in ws:
            i += 1
        return i

    pos = skip(0)
    try:
        for step in path:
            if isinstance(step, str):
                if text[pos] != "{":
                    return None
                pos = skip(pos + 1)
                while text[pos] != "}":
                    key, pos = dec.raw_decode(text, pos)
                    pos = skip(pos)
                    pos = skip(pos + 1)  # ':'
                    if key == step:
                        break
                    _, pos = dec.raw_decode(text, pos)
                    pos = skip(pos)
                    if text[pos] == ",":
                        pos = skip(pos + 1)
                else:
                    return None
            else:
                if text[pos] != "[":
                    return None
                pos = skip(pos + 1)
                for _ in range(step):
                    _, pos = dec.raw_decode(text, pos)
                    pos = skip(pos)
                    if text[pos] != ",":
                        return None
                    pos = skip(pos + 1)
    except (IndexError, json.JSONDecodeError):
        return None
    return text.count("\n", 0, pos) + 1


def loads_mdp(text: str) -> MdpModel:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MdpFormatError(exc.msg, exc.lineno) from exc

    def fail(msg, *path):
        raise MdpFormatError(msg, _line_of(text, path))

    if not isinstance(data, dict):
        fail("top level must be an object")
    for key in ("n_states", "n_actions", "discount", "costs", "transitions"):
        if key not in data:
            fail(f"missing field {key!r}")
    n, A = data["n_states"], data["n_actions"]
    if not isinstance(n, int) or n < 1:
        fail("n_states must be a positive integer", "n_states")
    if not isinstance(A, int) or A < 1:
        fail("n_actions must be a positive integer", "n_actions")
    alpha = data["discount"]
    if not isinstance(alpha, (int, float)) or not 0 < alpha < 1:
        fail("discount must lie in (0, 1)", "discount")

    costs = data["costs"]
    if not isinstance(costs, list) or len(costs) != n:
        fail(f"costs must be a list of {n} rows", "costs")
    for x, row in enumerate(costs):
        if not isinstance(row, list) or len(row) != A:
            fail(f"costs[{x}] must have {A} entries", "costs", x)
        if not all(isinstance(v, (int, float)) and np.isfinite(v) for v in row):
            fail(f"costs[{x}] has a non-finite or non-numeric entry", "costs", x)

    trans = data["transitions"]
    if not isinstance(trans, list) or len(trans) != A:
        fail(f"transitions must hold {A} matrices", "transitions")
    for a, mat in enumerate(trans):
        if not isinstance(mat, list) or len(mat) != n:
            fail(f"transitions[{a}] must have {n} rows", "transitions", a)
        for x, row in enumerate(mat):
            if not isinstance(row, list) or len(row) != n:
                fail(f"transitions[{a}][{x}] must have {n} entries", "transitions", a, x)
            if not all(isinstance(v, (int, float)) and np.isfinite(v) and v >= 0 for v in row):
                fail(f"transitions[{a}][{x}] has a negative or non-numeric entry", "transitions", a, x)
            if abs(sum(row) - 1.0) > ROW_SUM_TOL:
                fail(f"transitions[{a}][{x}] sums to {sum(row)!r}, not 1", "transitions", a, x)
    return MdpModel(np.array(trans, dtype=float), np.array(costs, dtype=float), float(alpha))


def load_mdp(path) -> MdpModel:
    return loads_mdp(Path(path).read_text())


def dumps_mdp(model: MdpModel) -> str:
    data = {
        "n_states": model.n_states,
        "n_actions": model.n_actions,
        "discount": model.discount,
        "costs": model.costs.tolist(),
        "transitions": model.transitions.tolist(),
    }
    # one transition row per line keeps loader errors pointing somewhere useful
    parts = [f'  "{k}": {json.dumps(data[k])}' for k in ("n_states", "n_actions", "discount")]
    parts.append('  "costs": [\n' + ",\n".join("    " + json.dumps(r) for r in data["costs"]) + "\n  ]")
    mats = []
    for mat in data["transitions"]:
        mats.append("    [\n" + ",\n".join("      " + json.dumps(r) for r in mat) + "\n    ]")
    parts.append('  "transitions": [\n' + ",\n".join(mats) + "\n  ]")
    return "{\n" + ",\n".join(parts) + "\n}\n"


def save_mdp(model: MdpModel, path) -> None:
    Path(path).write_text(dumps_mdp(model))
