"""Numerical certification of the SALP approximation and performance bounds.

Every check works on an explicit model with ``J*`` from the exact solver and
returns a :class:`BoundReport` with both sides of the inequality.  Value
functions enter as vectors ``J = Phi r`` over states.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .formulations import BasisSet, _check_basis, solve_alp, solve_salp, solve_salp_penalty
from .lp import DenseLp, UnboundedError, solve_dense_lp
from .mdp import (MdpModel, bellman_apply, check_distribution, greedy_policy, occupancy, optimal_values,
                  policy_value, resolvent_apply)

ABS_TOL = 1e-7
REL_TOL = 1e-9
OMEGA_TOL = 1e-10
LEMMA2_TOL = 1e-8


@dataclass(frozen=True)
class WeightingFunction:
    psi: np.ndarray

    def __post_init__(self):
        psi = np.asarray(self.psi, dtype=float)
        if psi.ndim != 1 or not np.all(np.isfinite(psi)):
            raise ValueError("weighting function must be a finite vector")
        if np.any(psi < 1.0 - 1e-12):
            raise ValueError("weighting functions must satisfy psi >= 1")
        object.__setattr__(self, "psi", np.maximum(psi, 1.0))


@dataclass
class BoundReport:
    name: str
    lhs: float
    rhs: float
    tolerance: float
    digest: str = ""
    details: dict = field(default_factory=dict)

    @property
    def slack(self) -> float:
        return self.rhs - self.lhs

    @property
    def passed(self) -> bool:
        return self.slack >= -self.tolerance

    def as_dict(self) -> dict:
        return {"name": self.name, "lhs": self.lhs, "rhs": self.rhs, "slack": self.slack,
                "passed": self.passed, "tolerance": self.tolerance, "digest": self.digest,
                "details": self.details}


def default_tolerance(rhs: float, abs_tol: float = ABS_TOL, rel_tol: float = REL_TOL) -> float:
    return abs_tol + rel_tol * abs(rhs)


def digest(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(np.asarray(a, dtype=float)).tobytes())
        h.update(b"|")
    return h.hexdigest()[:16]


def _model_digest(model: MdpModel, *extra) -> str:
    return digest(model.transitions, model.costs, [model.discount], *extra)


# -- norms and stability -------------------------------------------------------------

def weighted_norm_inf_inv_psi(J, psi) -> float:
    """max_x |J(x)| / psi(x)."""
    psi = WeightingFunction(psi).psi
    J = np.asarray(J, dtype=float)
    if J.shape != psi.shape:
        raise ValueError("J and psi must have the same length")
    return float(np.max(np.abs(J) / psi))


def weighted_norm_1_nu(J, nu) -> float:
    """sum_x nu(x) |J(x)|."""
    J = np.asarray(J, dtype=float)
    nu = check_distribution(nu, J.shape[0], "nu")
    return float(nu @ np.abs(J))


def beta_psi(model: MdpModel, psi) -> float:
    """max over (x, a) of |(P_a psi)(x) / psi(x)|."""
    psi = WeightingFunction(psi).psi
    if psi.shape != (model.n_states,):
        raise ValueError("psi must have one entry per state")
    return float(np.max(np.abs(model.transitions @ psi) / psi))


# -- ell(r, theta) ------------------------------------------------------------------------

def bellman_error(J, model: MdpModel) -> np.ndarray:
    """J - TJ."""
    J = np.asarray(J, dtype=float)
    return J - bellman_apply(J, model)


def _full_support(pi, n) -> np.ndarray:
    pi = check_distribution(pi, n, "pi")
    if np.any(pi <= 0):
        raise ValueError("pi must have full support")
    return pi


def ell(J, theta: float, model: MdpModel, pi, tol: float = 1e-10) -> tuple[float, np.ndarray]:
    """min gamma/(1-alpha) s.t. J - TJ <= s + gamma 1, pi^T s <= theta, s >= 0.

    Returns the optimal value and the slack component s.
    """
    if theta < 0:
        raise ValueError("theta must be nonnegative")
    n = model.n_states
    pi = _full_support(pi, n)
    E = bellman_error(J, model)
    # variables (gamma, s); maximise -gamma/(1-alpha)
    c = np.concatenate([[-1.0 / (1.0 - model.discount)], np.zeros(n)])
    A = np.vstack([np.column_stack([-np.ones(n), -np.eye(n)]), np.concatenate([[0.0], pi])])
    b = np.concatenate([-E, [theta]])
    lower = np.concatenate([[-np.inf], np.zeros(n)])
    x, _ = solve_dense_lp(DenseLp(c, A, b, lower=lower), tol=tol)
    return float(x[0] / (1.0 - model.discount)), x[1:]


def omega_set(J, model: MdpModel, tol: float = OMEGA_TOL) -> np.ndarray:
    """States whose Bellman error J - TJ is within ``tol`` of its maximum."""
    E = bellman_error(J, model)
    return np.flatnonzero(E >= E.max() - tol)


def ell_right_derivative(J, model: MdpModel, pi) -> float:
    """-1 / ((1 - alpha) pi(Omega))."""
    pi = _full_support(pi, model.n_states)
    mass = float(pi[omega_set(J, model)].sum())
    return -1.0 / ((1.0 - model.discount) * mass)


def ell_small_budget(J, delta: float, model: MdpModel, pi):
    """Closed-form ell for small budgets.

    With E = J - TJ, gamma_0 = max E and Omega its argmax set, s = delta/pi(Omega)
    on Omega (0 elsewhere) and gamma = gamma_0 - delta/pi(Omega) are optimal
    while delta <= (gamma_0 - max_{x not in Omega} E(x)) pi(Omega).
    Returns (value, s, threshold); the threshold is inf when Omega is everything.
    """
    pi = _full_support(pi, model.n_states)
    E = bellman_error(J, model)
    omega = omega_set(J, model)
    mass = float(pi[omega].sum())
    rest = np.delete(E, omega)
    threshold = (E.max() - rest.max()) * mass if rest.size else np.inf
    if delta < 0 or delta > threshold:
        raise ValueError("delta outside the range where the closed form holds")
    s = np.zeros(model.n_states)
    s[omega] = delta / mass
    gamma = E.max() - delta / mass
    return gamma / (1.0 - model.discount), s, threshold


# -- best approximations ----------------------------------------------------------------

def _chebyshev(J_star, Phi, psi=None, lexicographic: bool = True, tol: float = 1e-10):
    """min_r max_x |J*(x) - (Phi r)(x)| / psi(x); ties broken by lexicographically smallest r."""
    n, K = Phi.shape
    psi = np.ones(n) if psi is None else psi
    # J* in the span: the exact fit beats the LP's tolerance-level residual
    r_ls = np.linalg.lstsq(Phi, J_star, rcond=None)[0]
    err_ls = float(np.max(np.abs(J_star - Phi @ r_ls) / psi))
    exact = err_ls <= 1e-12 * (1.0 + float(np.max(np.abs(J_star))))
    if exact and (not lexicographic or K == np.linalg.matrix_rank(Phi)):
        return r_ls, err_ls
    # variables (r, t); maximise -t
    A = np.vstack([np.column_stack([Phi, -psi]), np.column_stack([-Phi, -psi])])
    b = np.concatenate([J_star, -J_star])
    lower = np.concatenate([np.full(K, -np.inf), [0.0]])
    c = np.concatenate([np.zeros(K), [-1.0]])
    x, _ = solve_dense_lp(DenseLp(c, A, b, lower=lower), tol=tol)
    t = float(x[K])
    if not lexicographic:
        return x[:K], t
    # fix t at its optimum and minimise r_1, r_2, ... in turn
    upper = np.concatenate([np.full(K, np.inf), [t + tol * (1.0 + t)]])
    lo = lower.copy()
    for j in range(K):
        cj = np.zeros(K + 1)
        cj[j] = -1.0
        try:
            xj, _ = solve_dense_lp(DenseLp(cj, A, b, lower=lo, upper=upper), tol=tol)
        except UnboundedError:
            break
        x = xj
        upper[j] = xj[j] + tol * (1.0 + abs(xj[j]))
    r = x[:K]
    return r, float(np.max(np.abs(J_star - Phi @ r) / psi))


def best_uniform_weights(model: MdpModel, basis, J_star=None) -> tuple[np.ndarray, float]:
    """r* minimising ||J* - Phi r||_inf and the attained error."""
    Phi = _phi(model, basis)
    J_star = optimal_values(model) if J_star is None else np.asarray(J_star, dtype=float)
    return _chebyshev(J_star, Phi)


def _phi(model: MdpModel, basis) -> np.ndarray:
    if isinstance(basis, BasisSet):
        return _check_basis(model, basis)
    Phi = np.asarray(basis, dtype=float)
    if Phi.ndim != 2 or Phi.shape[0] != model.n_states:
        raise ValueError("basis matrix must have one row per state")
    return Phi


def _basis(basis) -> BasisSet:
    return basis if isinstance(basis, BasisSet) else BasisSet.from_matrix(basis)


# -- SALP error bound ---------------------------------------------------------------

def _pi_star(model: MdpModel, nu, J_star):
    return occupancy(model, greedy_policy(J_star, model), nu)


def check_theorem1(model: MdpModel, basis, nu, theta: float, tol: float = 1e-10) -> BoundReport:
    """||J* - Phi r_SALP||_{1,nu} <= ||J* - Phi r*||_inf + ell(r*, theta) + 2 theta/(1-alpha)."""
    Phi = _phi(model, basis)
    nu = check_distribution(nu, model.n_states, "nu")
    J_star = optimal_values(model)
    pi = _pi_star(model, nu, J_star)
    sol = solve_salp(model, _basis(basis), nu, pi, theta, tol=tol)
    lhs = weighted_norm_1_nu(J_star - Phi @ sol.weights, nu)
    r_star, err = _chebyshev(J_star, Phi)
    ell_val, _ = ell(Phi @ r_star, theta, model, pi, tol=tol)
    rhs = err + ell_val + 2.0 * theta / (1.0 - model.discount)
    return BoundReport("theorem1", lhs, rhs, default_tolerance(rhs), _model_digest(model, Phi, nu, [theta]),
                       {"theta": theta, "uniform_error": err, "ell": ell_val})


def u_salp_curve(model: MdpModel, basis, nu, thetas, fd_fraction: float = 0.5, tol: float = 1e-10):
    """U_SALP(theta) on a grid plus the right derivative at 0.

    Returns (rows, derivative) where rows are (theta, U) pairs and derivative is
    a dict with the analytic value, a finite difference taken at
    ``fd_fraction`` times the linear-range threshold, and that threshold.
    """
    Phi = _phi(model, basis)
    nu = check_distribution(nu, model.n_states, "nu")
    J_star = optimal_values(model)
    pi = _pi_star(model, nu, J_star)
    r_star, err = _chebyshev(J_star, Phi)
    J = Phi @ r_star
    alpha = model.discount

    def U(theta):
        return err + ell(J, theta, model, pi, tol=tol)[0] + 2.0 * theta / (1.0 - alpha)

    rows = [(float(t), U(float(t))) for t in thetas]
    mass = float(pi[omega_set(J, model)].sum())
    analytic = (2.0 - 1.0 / mass) / (1.0 - alpha)
    _, _, threshold = ell_small_budget(J, 0.0, model, pi)
    delta = fd_fraction * (threshold if np.isfinite(threshold) else 1.0)
    fd = (U(delta) - U(0.0)) / delta
    return rows, {"analytic": analytic, "finite_difference": fd, "delta": delta, "threshold": threshold,
                  "omega_mass": mass}


# -- slack bound -------------------------------------------------------------------------

def check_lemma2(model: MdpModel, J, s, J_star=None, tol: float = LEMMA2_TOL) -> BoundReport:
    """J <= J* + Delta* s componentwise, reported as max(J - J* - Delta* s) <= 0."""
    J = np.asarray(J, dtype=float)
    s = np.asarray(s, dtype=float)
    J_star = optimal_values(model) if J_star is None else J_star
    mu_star = greedy_policy(J_star, model)
    gap = J - J_star - resolvent_apply(model, mu_star, s)
    return BoundReport("lemma2", float(gap.max()), 0.0, tol, _model_digest(model, J, s),
                       {"worst_state": int(np.argmax(gap))})


# -- uniform-error bound ------------------------------------------------------------------------

def theorem2_factor(model: MdpModel, psi, nu, pi) -> float:
    """nu^T psi + 2 (pi^T psi + 1)(alpha beta(psi) + 1)/(1 - alpha)."""
    psi = WeightingFunction(psi).psi
    a = model.discount
    return float(nu @ psi + 2.0 * (pi @ psi + 1.0) * (a * beta_psi(model, psi) + 1.0) / (1.0 - a))


def default_psi_candidates(model: MdpModel, basis, nu, J_star=None) -> dict[str, np.ndarray]:
    """psi = 1, J* + 1 rescaled to min 1, and Phi r_ALP shifted to min 1."""
    J_star = optimal_values(model) if J_star is None else J_star
    v = J_star + 1.0
    psi_j = v / v.min() if v.min() > 0 else v - v.min() + 1.0
    Phi = _phi(model, basis)
    J_alp = Phi @ solve_alp(model, _basis(basis), nu)
    return {"ones": np.ones(model.n_states), "value": psi_j, "alp": J_alp - J_alp.min() + 1.0}


def check_theorem2(model: MdpModel, basis, nu, candidate_psis=None, tol: float = 1e-10) -> BoundReport:
    """Penalty-form SALP error against the weighted bound at the best candidate psi.

    For each psi the weighted Chebyshev fit gives the r minimising
    ||J* - Phi r||_{inf,1/psi}; each candidate upper-bounds the infimum.
    """
    Phi = _phi(model, basis)
    nu = check_distribution(nu, model.n_states, "nu")
    J_star = optimal_values(model)
    pi = _pi_star(model, nu, J_star)
    if candidate_psis is None:
        candidate_psis = default_psi_candidates(model, basis, nu, J_star)
    if not isinstance(candidate_psis, dict):
        candidate_psis = {str(i): p for i, p in enumerate(candidate_psis)}
    if not candidate_psis:
        raise ValueError("need at least one candidate psi")
    sol = solve_salp_penalty(model, _basis(basis), nu, pi, tol=tol)
    lhs = weighted_norm_1_nu(J_star - Phi @ sol.weights, nu)
    per_psi = {}
    for name, psi in candidate_psis.items():
        psi = WeightingFunction(psi).psi
        _, err = _chebyshev(J_star, Phi, psi, lexicographic=False, tol=tol)
        per_psi[name] = err * theorem2_factor(model, psi, nu, pi)
    best = min(per_psi, key=per_psi.get)
    rhs = per_psi[best]
    return BoundReport("theorem2", lhs, rhs, default_tolerance(rhs), _model_digest(model, Phi, nu),
                       {"per_psi": per_psi, "best_psi": best})


def alp_lyapunov_bound(model: MdpModel, basis, nu, psi) -> float:
    """min_r ||J* - Phi r||_{inf,1/psi} * 2 nu^T psi / (1 - alpha beta(psi)); inf if alpha beta >= 1."""
    Phi = _phi(model, basis)
    psi = WeightingFunction(psi).psi
    nu = check_distribution(nu, model.n_states, "nu")
    ab = model.discount * beta_psi(model, psi)
    if ab >= 1.0:
        return float("inf")
    _, err = _chebyshev(optimal_values(model), Phi, psi, lexicographic=False)
    return float(err * 2.0 * (nu @ psi) / (1.0 - ab))


# -- Lyapunov bound ----------------------------------------------------------------------------

def check_theorem3(model: MdpModel, J, eta, J_star=None) -> BoundReport:
    """||J_{mu_J} - J*||_{1,eta} against the greedy-policy performance bound."""
    J = np.asarray(J, dtype=float)
    eta = check_distribution(eta, model.n_states, "eta")
    J_star = optimal_values(model) if J_star is None else J_star
    a = model.discount
    mu_J = greedy_policy(J, model)
    lhs = weighted_norm_1_nu(policy_value(mu_J, model) - J_star, eta)
    nu_eta = occupancy(model, mu_J, eta)
    pi = occupancy(model, greedy_policy(J_star, model), nu_eta)
    viol = np.maximum(bellman_error(J, model), 0.0)
    rhs = float((nu_eta @ (J_star - J) + 2.0 / (1.0 - a) * (pi @ viol)) / (1.0 - a))
    return BoundReport("theorem3", lhs, rhs, default_tolerance(rhs), _model_digest(model, J, eta))
