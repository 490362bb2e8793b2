"""Primal-dual path-following LP solver with Mehrotra predictor-corrector.

Problems are taken in inequality form

    minimise f^T x   subject to   G x <= h,

with primal slacks w = h - G x > 0 and duals z > 0.  Eliminating w and z from
the Newton system leaves the normal equations (G^T D G) dx = rhs with
D = diag(z / w).  The operator object owns G and the way those normal
equations are factored, so the same iteration drives the dense reference path
and the block-structured SALP path.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .lp import DEFAULT_MAX_ITER, DEFAULT_TOL, LpError, NumericalError, SolverReport, UnboundedError, InfeasibleError

log = logging.getLogger(__name__)

STEP_FRACTION = 0.995
# refinement only pays once D is badly scaled near the optimum
REFINE_GAP = 1e-3
# Gondzio centrality correctors: count, trial-step growth, target box
N_CORRECTORS = 2
CORRECTOR_GROW, CORRECTOR_ADD = 1.5, 0.1
CENTRAL_LOW, CENTRAL_HIGH = 0.1, 10.0


@dataclass
class IpmState:
    x: np.ndarray
    w: np.ndarray
    z: np.ndarray
    # earlier, well-centred iterate kept for warm starts
    snapshot: "IpmState | None" = None

    def copy(self) -> "IpmState":
        return IpmState(self.x.copy(), self.w.copy(), self.z.copy())


def cholesky_solver(H: np.ndarray):
    """Cholesky factor H, regularising the diagonal if it is numerically indefinite."""
    scale = max(float(np.max(np.abs(np.diag(H)), initial=0.0)), 1e-300)
    reg = 0.0
    for _ in range(8):
        try:
            c = scipy.linalg.cho_factor(H + reg * np.eye(H.shape[0]), lower=True, check_finite=False)
            return lambda rhs: scipy.linalg.cho_solve(c, rhs, check_finite=False)
        except np.linalg.LinAlgError:
            reg = scale * (1e-14 if reg == 0.0 else reg / scale * 100.0)
    raise NumericalError("normal-equations matrix is not positive definite")


class DenseOperator:
    """Explicit constraint matrix; normal equations formed and factored densely."""

    def __init__(self, G: np.ndarray, n_bound_rows: int = 0):
        self.G = np.asarray(G, dtype=float)
        self.m, self.n = self.G.shape
        self.residual_rows = np.arange(self.m - n_bound_rows)

    def matvec(self, x):
        return self.G @ x

    def rmatvec(self, z):
        return self.G.T @ z

    def factor(self, d):
        return cholesky_solver(self.G.T @ (d[:, None] * self.G))


def _max_step(v, dv) -> float:
    neg = dv < 0
    if not np.any(neg):
        return np.inf
    return float(np.min(-v[neg] / dv[neg]))


def _norm(v) -> float:
    return float(np.max(np.abs(v), initial=0.0))


def initial_point(op, f, h) -> IpmState:
    """Least-squares start shifted into the positive orthant, duals centred on w."""
    solve = op.factor(np.ones(op.m))
    x = solve(op.rmatvec(h))
    w = h - op.matvec(x)
    # minimum-norm z with G^T z = -f
    z = -op.matvec(solve(f))
    shift_w = -np.min(w)
    if shift_w >= -1e-8 * (1 + _norm(w)):
        w = w + 1.0 + max(shift_w, 0.0)
    shift_z = -np.min(z)
    if shift_z >= -1e-8 * (1 + _norm(z)):
        z = z + 1.0 + max(shift_z, 0.0)
    # equalise the products w*z so rows with huge slack (loose bounds) start with small duals
    z = float(np.median(w * z)) / w
    return IpmState(x, w, z)


def _measures(op, f, h, st: IpmState):
    rp = op.matvec(st.x) + st.w - h
    rd = f + op.rmatvec(st.z)
    pcost = float(f @ st.x)
    hs = 1.0 + _norm(h[op.residual_rows])
    pres = _norm(rp[op.residual_rows]) / hs
    if len(rp) > len(op.residual_rows):
        bmask = np.ones(len(rp), dtype=bool)
        bmask[op.residual_rows] = False
        pres = max(pres, _norm(rp[bmask]) / (1.0 + _norm(h[bmask])))
    dres = _norm(rd) / (1.0 + _norm(f))
    gap = float(st.w @ st.z) / (1.0 + abs(pcost))
    return rp, rd, pres, dres, gap


def predictor_corrector(op, f, h, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
                        start: IpmState | None = None, solver_name: str = "ipm",
                        snapshot_gap: float | None = None):
    """Run the path-following iteration; returns (IpmState, SolverReport).

    With ``snapshot_gap`` set, the first iterate whose relative gap falls below
    it is copied to ``state.snapshot`` for later warm starts.
    """
    t0 = time.perf_counter()
    f = np.asarray(f, dtype=float)
    h = np.asarray(h, dtype=float)
    st = initial_point(op, f, h) if start is None else start.copy()
    m = op.m

    def report(it, status, gap, pres, dres):
        return SolverReport(it, gap, pres, dres, time.perf_counter() - t0, status, solver_name)

    it = 0
    snap = None
    while True:
        rp, rd, pres, dres, gap = _measures(op, f, h, st)
        if snapshot_gap is not None and snap is None and max(gap, pres, dres) <= snapshot_gap:
            snap = st.copy()
        if pres <= tol and dres <= tol and gap <= tol:
            st.snapshot = snap if snap is not None else st.copy()
            return st, report(it, "optimal", gap, pres, dres)
        if it >= max_iter:
            break
        if _norm(st.x) > 1e13:
            raise UnboundedError("primal iterates diverge", report(it, "numerical-failure", gap, pres, dres))
        if _norm(st.z) > 1e13:
            raise InfeasibleError("dual iterates diverge", report(it, "numerical-failure", gap, pres, dres))
        it += 1

        d = st.z / st.w
        refine = gap < REFINE_GAP
        try:
            solve = op.factor(d)
        except NumericalError as exc:
            raise NumericalError(str(exc), report(it, "numerical-failure", gap, pres, dres)) from exc

        def newton(rc):
            rhs = -rd - op.rmatvec(d * rp - rc / st.w)
            dx = solve(rhs)
            if refine:
                # one step of iterative refinement on the normal equations
                dx = dx + solve(rhs - op.rmatvec(d * op.matvec(dx)))
            dz = d * (op.matvec(dx) + rp) - rc / st.w
            dw = (-rc - st.w * dz) / st.z
            return dx, dw, dz

        mu = float(st.w @ st.z) / m
        rc = st.w * st.z
        dx_a, dw_a, dz_a = newton(rc)
        ap = min(1.0, _max_step(st.w, dw_a))
        ad = min(1.0, _max_step(st.z, dz_a))
        mu_aff = float((st.w + ap * dw_a) @ (st.z + ad * dz_a)) / m
        sigma = min(1.0, (mu_aff / mu) ** 3) if mu > 0 else 0.0

        rc = st.w * st.z + dw_a * dz_a - sigma * mu
        dx, dw, dz = newton(rc)
        ap = min(1.0, STEP_FRACTION * _max_step(st.w, dw))
        ad = min(1.0, STEP_FRACTION * _max_step(st.z, dz))
        target = sigma * mu
        for _ in range(N_CORRECTORS):
            a = min(ap, ad)
            trial = min(1.0, CORRECTOR_GROW * a + CORRECTOR_ADD)
            v = (st.w + trial * dw) * (st.z + trial * dz)
            t = np.clip(v, CENTRAL_LOW * target, CENTRAL_HIGH * target) - v
            t = np.maximum(t, -CENTRAL_HIGH * target)
            dx2, dw2, dz2 = newton(rc - t)
            ap2 = min(1.0, STEP_FRACTION * _max_step(st.w, dw2))
            ad2 = min(1.0, STEP_FRACTION * _max_step(st.z, dz2))
            if min(ap2, ad2) < 1.01 * a:
                break
            dx, dw, dz, ap, ad, rc = dx2, dw2, dz2, ap2, ad2, rc - t
        if not (np.all(np.isfinite(dx)) and np.all(np.isfinite(dz))):
            raise NumericalError("non-finite Newton direction", report(it, "numerical-failure", gap, pres, dres))
        log.debug("it %d gap %.2e pres %.2e dres %.2e sigma %.2e steps %.3f %.3f", it, gap, pres, dres, sigma, ap, ad)
        st.x = st.x + ap * dx
        st.w = st.w + ap * dw
        st.z = st.z + ad * dz
        # guard against underflow to exact zero
        np.maximum(st.w, 1e-300, out=st.w)
        np.maximum(st.z, 1e-300, out=st.z)

    raise LpError(f"no convergence in {max_iter} iterations", report(it, "max-iter", gap, pres, dres))
