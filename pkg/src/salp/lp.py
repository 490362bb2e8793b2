"""Dense LPs in maximisation form and the reference solvers for them."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 500


class LpError(RuntimeError):
    def __init__(self, message: str, report: "SolverReport | None" = None):
        super().__init__(message)
        self.report = report


class InfeasibleError(LpError):
    pass


class UnboundedError(LpError):
    pass


class NumericalError(LpError):
    pass


@dataclass
class SolverReport:
    iterations: int
    gap: float
    primal_residual: float
    dual_residual: float
    wall_time: float
    status: str  # "optimal" | "max-iter" | "numerical-failure"
    solver: str = ""

    def __post_init__(self):
        self.gap = abs(float(self.gap))
        self.primal_residual = abs(float(self.primal_residual))
        self.dual_residual = abs(float(self.dual_residual))


@dataclass
class DenseLp:
    """maximise c^T x  s.t.  A x <= b,  lower <= x <= upper."""

    c: np.ndarray
    A: np.ndarray
    b: np.ndarray
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float)
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.b = np.asarray(self.b, dtype=float)
        n = self.c.shape[0]
        if self.A.shape != (self.b.shape[0], n):
            raise ValueError(f"A has shape {self.A.shape}, expected ({self.b.shape[0]}, {n})")
        self.lower = np.full(n, -np.inf) if self.lower is None else np.asarray(self.lower, dtype=float)
        self.upper = np.full(n, np.inf) if self.upper is None else np.asarray(self.upper, dtype=float)
        if self.lower.shape != (n,) or self.upper.shape != (n,):
            raise ValueError("bound vectors must match the number of variables")
        for name, arr in (("c", self.c), ("A", self.A), ("b", self.b)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be finite")
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound exceeds upper bound")

    @property
    def n_vars(self) -> int:
        return self.c.shape[0]

    @property
    def n_rows(self) -> int:
        return self.b.shape[0]

    def objective(self, x) -> float:
        return float(self.c @ x)

    def violation(self, x) -> float:
        x = np.asarray(x, dtype=float)
        v = np.max(self.A @ x - self.b, initial=0.0)
        v = max(v, np.max(self.lower - x, initial=0.0), np.max(x - self.upper, initial=0.0))
        return float(max(v, 0.0))

    def as_inequalities(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(G, h, n_bound_rows) with finite bounds appended as rows of G x <= h."""
        n = self.n_vars
        eye = np.eye(n)
        up = np.isfinite(self.upper)
        lo = np.isfinite(self.lower)
        G = np.vstack([self.A, eye[up], -eye[lo]])
        h = np.concatenate([self.b, self.upper[up], -self.lower[lo]])
        return G, h, int(up.sum() + lo.sum())


def solve_dense_lp(lp: DenseLp, tol: float = DEFAULT_TOL, method: str = "highs",
                   max_iter: int = DEFAULT_MAX_ITER) -> tuple[np.ndarray, SolverReport]:
    """Solve a small LP to relative gap ``tol``.

    ``method="highs"`` uses the HiGHS simplex/IPM through scipy and returns a
    vertex; ``method="ipm"`` runs the in-house predictor-corrector on dense
    normal equations.
    """
    if method == "ipm":
        from .ipm import DenseOperator, predictor_corrector

        G, h, nb = lp.as_inequalities()
        op = DenseOperator(G, n_bound_rows=nb)
        state, report = predictor_corrector(op, -lp.c, h, tol=tol, max_iter=max_iter)
        return state.x, report
    if method != "highs":
        raise ValueError(f"unknown method {method!r}")

    t0 = time.perf_counter()
    ftol = max(min(tol, 1e-7), 1e-10)
    res = linprog(
        -lp.c,
        A_ub=lp.A if lp.n_rows else None,
        b_ub=lp.b if lp.n_rows else None,
        bounds=np.column_stack([np.where(np.isfinite(lp.lower), lp.lower, -np.inf),
                                np.where(np.isfinite(lp.upper), lp.upper, np.inf)]),
        method="highs",
        options={"primal_feasibility_tolerance": ftol, "dual_feasibility_tolerance": ftol,
                 "presolve": True},
    )
    wall = time.perf_counter() - t0
    if res.status == 2:
        raise InfeasibleError(res.message)
    if res.status == 3:
        raise UnboundedError(res.message)
    if res.status == 1:
        report = SolverReport(int(res.nit), np.inf, np.inf, np.inf, wall, "max-iter", "highs")
        raise LpError(res.message, report)
    if res.status != 0:
        report = SolverReport(int(res.nit), np.inf, np.inf, np.inf, wall, "numerical-failure", "highs")
        raise NumericalError(res.message, report)

    x = res.x
    primal = lp.objective(x)
    # HiGHS marginals are sensitivities of the minimisation objective
    y = -res.ineqlin.marginals if lp.n_rows else np.zeros(0)
    zl, zu = res.lower.marginals, -res.upper.marginals
    dual = float(lp.b @ y) if lp.n_rows else 0.0
    dual += float(np.sum(np.where(np.isfinite(lp.upper), lp.upper, 0.0) * zu))
    dual -= float(np.sum(np.where(np.isfinite(lp.lower), lp.lower, 0.0) * zl))
    dres = np.max(np.abs(lp.A.T @ y + zu - zl - lp.c), initial=0.0)
    report = SolverReport(
        iterations=int(res.nit),
        gap=abs(primal - dual) / (1.0 + abs(primal)),
        primal_residual=lp.violation(x),
        dual_residual=dres / (1.0 + np.max(np.abs(lp.c), initial=0.0)),
        wall_time=wall,
        status="optimal",
        solver="highs",
    )
    return x, report
