"""Block-structured sampled SALP programs.

The sampled SALP

    maximise   c_r^T r + c_s^T s
    subject to A11 r + A12 s <= b,   d^T s <= theta,   s >= 0,   lo <= r <= hi

has one slack per distinct sampled state and every row of A12 is a single -1
in the column of that row's state.  In the normal equations of the interior
point method this makes the slack-slack block diagonal plus (in budget mode)
one rank-one term from the budget row, so the slacks can be eliminated with
Sherman-Morrison and only a K x K system is factored.  A Newton step then costs
O(K^2 S + K^3) instead of O((K + S)^3).
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numba
import numpy as np

from .ipm import DenseOperator, IpmState, cholesky_solver, predictor_corrector
from .lp import DEFAULT_MAX_ITER, DEFAULT_TOL, DenseLp, NumericalError, SolverReport

DEFAULT_BOX = 1e6
WARM_SNAPSHOT_GAP = 1.0
FACTOR_CHUNK = 2048


@numba.njit(cache=True)
def _centre_rows(A, Dm, ptr, C, U, wsum):
    """Per state: U = -sum D a, wsum = sum D, C = sqrt(D) (a - abar) with abar the D-weighted mean row."""
    K = A.shape[1]
    abar = np.empty(K)
    base = ptr[0]
    for i in range(ptr.shape[0] - 1):
        a, b = ptr[i], ptr[i + 1]
        w = 0.0
        abar[:] = 0.0
        for j in range(a, b):
            w += Dm[j]
            for k in range(K):
                abar[k] += Dm[j] * A[j, k]
        wsum[i] = w
        for k in range(K):
            U[i, k] = -abar[k]
            abar[k] /= w
        for j in range(a, b):
            sq = np.sqrt(Dm[j])
            for k in range(K):
                C[j - base, k] = (A[j, k] - abar[k]) * sq


@dataclass
class SalpSolution:
    weights: np.ndarray
    slacks: np.ndarray
    objective: float
    budget_used: float
    theta: float | None = None
    state: IpmState | None = field(default=None, repr=False)
    report: SolverReport | None = field(default=None, repr=False)


@dataclass
class StructuredSalpLp:
    """Sampled SALP data with rows grouped by the state whose slack they use.

    ``slack_measure`` is the empirical weight of each distinct state.  In
    budget mode (``theta`` not None) it is the budget row d and ``c_s`` is zero;
    in penalty mode ``c_s = -penalty * slack_measure`` and there is no budget
    row.  Rows are re-sorted by state on construction.
    """

    A11: np.ndarray
    row_state: np.ndarray
    b: np.ndarray
    c_r: np.ndarray
    slack_measure: np.ndarray
    theta: float | None = None
    penalty: float | None = None
    r_lower: np.ndarray | None = None
    r_upper: np.ndarray | None = None

    def __post_init__(self):
        A11 = np.ascontiguousarray(self.A11, dtype=float)
        row_state = np.asarray(self.row_state, dtype=np.int64)
        b = np.asarray(self.b, dtype=float)
        self.c_r = np.asarray(self.c_r, dtype=float)
        self.slack_measure = np.asarray(self.slack_measure, dtype=float)
        m, K = A11.shape
        S = self.slack_measure.shape[0]
        if row_state.shape != (m,) or b.shape != (m,) or self.c_r.shape != (K,):
            raise ValueError("inconsistent block dimensions")
        if np.any(row_state < 0) or np.any(row_state >= S):
            raise ValueError("row_state out of range")
        if not (np.all(np.isfinite(A11)) and np.all(np.isfinite(b))):
            raise ValueError("constraint data must be finite")
        if np.any(self.slack_measure < 0):
            raise ValueError("slack measure must be nonnegative")
        counts = np.bincount(row_state, minlength=S)
        if np.any(counts == 0):
            raise ValueError("every slack column must be referenced by at least one row")
        if (self.theta is None) == (self.penalty is None):
            raise ValueError("exactly one of theta (budget mode) or penalty must be given")
        if self.theta is not None and self.theta < 0:
            raise ValueError("theta must be nonnegative")
        order = np.argsort(row_state, kind="stable")
        self.A11, self.row_state, self.b = A11[order], row_state[order], b[order]
        self.state_ptr = np.concatenate([[0], np.cumsum(counts)])
        for name in ("r_lower", "r_upper"):
            v = getattr(self, name)
            if v is not None:
                v = np.broadcast_to(np.asarray(v, dtype=float), (K,)).copy()
                setattr(self, name, v)

    @property
    def K(self) -> int:
        return self.A11.shape[1]

    @property
    def S(self) -> int:
        return self.slack_measure.shape[0]

    @property
    def n_rows(self) -> int:
        return self.A11.shape[0]

    @property
    def budget_mode(self) -> bool:
        return self.theta is not None

    @property
    def c_s(self) -> np.ndarray:
        if self.budget_mode:
            return np.zeros(self.S)
        return -self.penalty * self.slack_measure

    def with_theta(self, theta: float | None) -> "StructuredSalpLp":
        """Same program with a new budget; ``inf`` or None drops the budget row."""
        if not self.budget_mode:
            raise ValueError("budget changes only apply to budget-mode programs")
        if theta is None or np.isinf(theta):
            return replace(self, theta=None, penalty=0.0)
        return replace(self, theta=float(theta))

    # -- objective / feasibility checks --------------------------------------

    def objective(self, r, s) -> float:
        return float(self.c_r @ r + self.c_s @ s)

    def violation(self, r, s) -> float:
        v = np.max(self.A11 @ r - s[self.row_state] - self.b, initial=0.0)
        v = max(v, np.max(-s, initial=0.0))
        if self.budget_mode:
            v = max(v, float(self.slack_measure @ s) - self.theta)
        if self.r_upper is not None:
            v = max(v, np.max(r - self.r_upper, initial=0.0))
        if self.r_lower is not None:
            v = max(v, np.max(self.r_lower - r, initial=0.0))
        return float(max(v, 0.0))

    def to_dense(self) -> DenseLp:
        """Equivalent dense LP over x = (r, s); only sensible for small S."""
        m, K, S = self.n_rows, self.K, self.S
        A12 = np.zeros((m, S))
        A12[np.arange(m), self.row_state] = -1.0
        A = np.hstack([self.A11, A12])
        b = self.b
        if self.budget_mode:
            A = np.vstack([A, np.concatenate([np.zeros(K), self.slack_measure])])
            b = np.concatenate([b, [self.theta]])
        lower = np.concatenate([self.r_lower if self.r_lower is not None else np.full(K, -np.inf), np.zeros(S)])
        upper = np.concatenate([self.r_upper if self.r_upper is not None else np.full(K, np.inf), np.full(S, np.inf)])
        return DenseLp(np.concatenate([self.c_r, self.c_s]), A, b, lower, upper)

    # -- binary dump -----------------------------------------------------------
    # header: magic, K, S, m, flags (bit0 budget, bit1 lower, bit2 upper),
    # theta/penalty as float64; then c_r, slack_measure, A11 (row-major), b,
    # A12 as COO (rows int64, cols int64, vals float64), optional bounds.

    MAGIC = b"SALPLP01"

    def dump(self, path) -> None:
        flags = ((1 if self.budget_mode else 0) | (2 if self.r_lower is not None else 0)
                 | (4 if self.r_upper is not None else 0))
        scalar = self.theta if self.budget_mode else self.penalty
        with open(path, "wb") as fh:
            fh.write(self.MAGIC)
            fh.write(struct.pack("<qqqqd", self.K, self.S, self.n_rows, flags, scalar))
            for arr in (self.c_r, self.slack_measure, self.A11.ravel(), self.b):
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
            fh.write(np.arange(self.n_rows, dtype="<i8").tobytes())
            fh.write(self.row_state.astype("<i8").tobytes())
            fh.write(np.full(self.n_rows, -1.0, dtype="<f8").tobytes())
            for v in (self.r_lower, self.r_upper):
                if v is not None:
                    fh.write(v.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "StructuredSalpLp":
        data = Path(path).read_bytes()
        if data[:8] != cls.MAGIC:
            raise ValueError("not a structured SALP dump")
        K, S, m, flags, scalar = struct.unpack_from("<qqqqd", data, 8)
        off = 8 + struct.calcsize("<qqqqd")

        def take(count, dtype):
            nonlocal off
            arr = np.frombuffer(data, dtype=dtype, count=count, offset=off).copy()
            off += count * 8
            return arr

        c_r, measure = take(K, "<f8"), take(S, "<f8")
        A11 = take(m * K, "<f8").reshape(m, K)
        b = take(m, "<f8")
        _rows, cols, vals = take(m, "<i8"), take(m, "<i8"), take(m, "<f8")
        if np.any(vals != -1.0):
            raise ValueError("A12 entries must all be -1")
        lower = take(K, "<f8") if flags & 2 else None
        upper = take(K, "<f8") if flags & 4 else None
        budget = bool(flags & 1)
        return cls(A11, cols, b, c_r, measure, theta=scalar if budget else None,
                   penalty=None if budget else scalar, r_lower=lower, r_upper=upper)


def newton_step_structured(H11, H12, h22_diag, rank1_weight, rank1_vec, g) -> np.ndarray:
    """Solve H [dr; ds] = -g for H = [[H11, H12], [H12^T, diag(h22) + w v v^T]].

    The slack block is eliminated with Sherman-Morrison and the K x K Schur
    complement is Cholesky-factored.
    """
    H11 = np.asarray(H11, dtype=float)
    H12 = np.asarray(H12, dtype=float)
    delta = np.asarray(h22_diag, dtype=float)
    v = np.asarray(rank1_vec, dtype=float)
    g = np.asarray(g, dtype=float)
    K = H11.shape[0]
    if np.any(delta <= 0):
        raise NumericalError("diagonal of the slack block must be positive")
    g_r, g_s = -g[:K], -g[K:]
    v_d = v / delta
    kappa = rank1_weight / (1.0 + rank1_weight * float(v @ v_d))

    def h22_inv(y):
        return y / delta - kappa * float(v_d @ y) * v_d

    u = H12 @ v_d
    M = H11 - (H12 / delta) @ H12.T + kappa * np.outer(u, u)
    solve = cholesky_solver(M)
    dr = solve(g_r - H12 @ h22_inv(g_s))
    ds = h22_inv(g_s - H12.T @ dr)
    return np.concatenate([dr, ds])


class StructuredOperator:
    """Constraint operator for the IPM over x = (r, s).

    Row blocks: main constraints (m), budget row (0 or 1), s >= 0 (S),
    r <= hi (K or 0), -r <= -lo (K or 0).
    """

    def __init__(self, lp: StructuredSalpLp):
        self.lp = lp
        K, S, mm = lp.K, lp.S, lp.n_rows
        self.nb = 1 if lp.budget_mode else 0
        self.nu = K if lp.r_upper is not None else 0
        self.nl = K if lp.r_lower is not None else 0
        self.m = mm + self.nb + S + self.nu + self.nl
        self.n = K + S
        self.residual_rows = np.arange(mm + self.nb + S)
        self._starts = lp.state_ptr[:-1]

    def h(self) -> np.ndarray:
        lp = self.lp
        parts = [lp.b]
        if self.nb:
            parts.append([lp.theta])
        parts.append(np.zeros(lp.S))
        if self.nu:
            parts.append(lp.r_upper)
        if self.nl:
            parts.append(-lp.r_lower)
        return np.concatenate(parts)

    def f(self) -> np.ndarray:
        return -np.concatenate([self.lp.c_r, self.lp.c_s])

    def _split(self, z):
        lp = self.lp
        mm, S = lp.n_rows, lp.S
        i = 0
        z_main = z[i:i + mm]; i += mm
        z_b = z[i:i + self.nb]; i += self.nb
        z_nn = z[i:i + S]; i += S
        z_up = z[i:i + self.nu]; i += self.nu
        z_lo = z[i:i + self.nl]
        return z_main, z_b, z_nn, z_up, z_lo

    def matvec(self, x):
        lp = self.lp
        r, s = x[:lp.K], x[lp.K:]
        parts = [lp.A11 @ r - s[lp.row_state]]
        if self.nb:
            parts.append([lp.slack_measure @ s])
        parts.append(-s)
        if self.nu:
            parts.append(r)
        if self.nl:
            parts.append(-r)
        return np.concatenate(parts)

    def rmatvec(self, z):
        lp = self.lp
        z_main, z_b, z_nn, z_up, z_lo = self._split(z)
        gr = lp.A11.T @ z_main
        if self.nu:
            gr = gr + z_up
        if self.nl:
            gr = gr - z_lo
        gs = -np.add.reduceat(z_main, self._starts) - z_nn
        if self.nb:
            gs = gs + z_b[0] * lp.slack_measure
        return np.concatenate([gr, gs])

    def factor(self, d):
        """Factor G^T D G by slack elimination; returns a solver for the full system."""
        lp = self.lp
        K = lp.K
        D_main, D_b, D_nn, D_up, D_lo = self._split(d)
        S = lp.S
        wsum = np.empty(S)
        U = np.empty((S, K))  # H21
        M = np.zeros((K, K))
        ptr = lp.state_ptr
        C = np.empty((min(ptr[-1], ptr[min(FACTOR_CHUNK, S)] if S else 0), K))
        # chunks of states keep the temporaries cache-sized
        for lo in range(0, S, FACTOR_CHUNK):
            hi = min(lo + FACTOR_CHUNK, S)
            a, b = ptr[lo], ptr[hi]
            if C.shape[0] < b - a:
                C = np.empty((b - a, K))
            Cc = C[:b - a]
            # per-state centred form avoids cancellation in H11 - H12 H22^-1 H21
            _centre_rows(lp.A11, D_main, ptr[lo:hi + 1], Cc, U[lo:hi], wsum[lo:hi])
            M += Cc.T @ Cc
        delta = wsum + D_nn
        abar = -U / wsum[:, None]
        M += (abar * (wsum * D_nn / delta)[:, None]).T @ abar
        diag = np.zeros(K)
        if self.nu:
            diag += D_up
        if self.nl:
            diag += D_lo
        M[np.diag_indices(K)] += diag
        rho = float(D_b[0]) if self.nb else 0.0
        v = lp.slack_measure
        v_d = v / delta
        kappa = rho / (1.0 + rho * float(v @ v_d)) if self.nb else 0.0
        if self.nb:
            u = U.T @ v_d
            M += kappa * np.outer(u, u)
        solve_M = cholesky_solver(M)

        def h22_inv(y):
            out = y / delta
            if self.nb:
                out -= kappa * float(v_d @ y) * v_d
            return out

        def solve(rhs):
            g_r, g_s = rhs[:K], rhs[K:]
            dr = solve_M(g_r - U.T @ h22_inv(g_s))
            ds = h22_inv(g_s - U @ dr)
            return np.concatenate([dr, ds])

        return solve

    def hessian_blocks(self, d):
        """Explicit (H11, H12, h22_diag, rank1_weight, rank1_vec) for G^T D G."""
        lp = self.lp
        D_main, D_b, D_nn, D_up, D_lo = self._split(d)
        H11 = lp.A11.T @ (D_main[:, None] * lp.A11)
        if self.nu:
            H11[np.diag_indices(lp.K)] += D_up
        if self.nl:
            H11[np.diag_indices(lp.K)] += D_lo
        H12 = -np.add.reduceat(D_main[:, None] * lp.A11, self._starts, axis=0).T
        h22 = np.add.reduceat(D_main, self._starts) + D_nn
        rho = float(D_b[0]) if self.nb else 0.0
        return H11, H12, h22, rho, lp.slack_measure


def _solution(lp: StructuredSalpLp, st: IpmState, report: SolverReport) -> SalpSolution:
    r, s = st.x[:lp.K].copy(), st.x[lp.K:].copy()
    return SalpSolution(
        weights=r,
        slacks=s,
        objective=lp.objective(r, s),
        budget_used=float(lp.slack_measure @ s),
        theta=lp.theta,
        state=st,
        report=report,
    )


def solve_salp_structured(lp: StructuredSalpLp, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
                          start: IpmState | None = None) -> tuple[SalpSolution, SolverReport]:
    if lp.budget_mode and lp.theta == 0.0:
        return _solve_zero_budget(lp, tol, max_iter)
    op = StructuredOperator(lp)
    st, report = predictor_corrector(op, op.f(), op.h(), tol=tol, max_iter=max_iter, start=start,
                                     solver_name="ipm-structured", snapshot_gap=WARM_SNAPSHOT_GAP)
    return _solution(lp, st, report), report


def _solve_zero_budget(lp: StructuredSalpLp, tol: float, max_iter: int):
    """theta = 0 forces s = 0 (the slack face has no interior), leaving an LP in r alone."""
    eye = np.eye(lp.K)
    blocks, rhs = [lp.A11], [lp.b]
    if lp.r_upper is not None:
        blocks.append(eye)
        rhs.append(lp.r_upper)
    if lp.r_lower is not None:
        blocks.append(-eye)
        rhs.append(-lp.r_lower)
    op = DenseOperator(np.vstack(blocks), n_bound_rows=sum(len(v) for v in rhs[1:]))
    st, report = predictor_corrector(op, -lp.c_r, np.concatenate(rhs), tol=tol, max_iter=max_iter,
                                     solver_name="ipm-structured")
    r = st.x.copy()
    s = np.zeros(lp.S)
    # no slack-space iterate to warm-start from
    return SalpSolution(r, s, lp.objective(r, s), 0.0, theta=0.0, state=None, report=report), report


def _warm_state(old: StructuredSalpLp, new: StructuredSalpLp, prev: IpmState) -> IpmState:
    """Map a stored iterate of ``old`` onto ``new``, which differs only in theta."""
    base = prev.snapshot if prev.snapshot is not None else prev
    x, w, z = base.x.copy(), base.w.copy(), base.z.copy()
    mm = old.n_rows
    if old.budget_mode and not new.budget_mode:
        keep = np.ones(w.shape[0], dtype=bool)
        keep[mm] = False
        w, z = w[keep], z[keep]
    elif new.budget_mode:
        # x unchanged, so the budget row's slack absorbs the extra budget
        w[mm] += new.theta - old.theta
    return IpmState(x, w, z)


def warm_start_resolve(lp: StructuredSalpLp, previous: SalpSolution, theta_new: float,
                       tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER):
    """Re-solve ``lp`` at a larger budget starting from ``previous``'s iterate."""
    if not lp.budget_mode:
        raise ValueError("warm starts over theta need a budget-mode program")
    old_theta = previous.theta if previous.theta is not None else lp.theta
    if theta_new < old_theta:
        raise ValueError("warm starts only move to a larger budget")
    new = lp.with_theta(theta_new)
    if previous.state is None:
        return solve_salp_structured(new, tol=tol, max_iter=max_iter)
    old = lp.with_theta(old_theta)
    if theta_new == old_theta:
        start = previous.state.copy()
    else:
        start = _warm_state(old, new, previous.state)
    return solve_salp_structured(new, tol=tol, max_iter=max_iter, start=start)


def time_newton_step(lp: StructuredSalpLp, repeats: int = 5, seed: int = 0) -> float:
    """Median wall time of one structured factor + solve at a random positive scaling."""
    op = StructuredOperator(lp)
    rng = np.random.default_rng(seed)
    times = []
    for _ in range(repeats):
        d = np.exp(rng.normal(size=op.m))
        rhs = rng.normal(size=op.n)
        t0 = time.perf_counter()
        op.factor(d)(rhs)
        times.append(time.perf_counter() - t0)
    return float(np.median(times))
