"""Dense primal active-set solver for small convex QPs.

    minimize    1/2 x'Qx + c'x
    subject to  A_in x <= b_in,  A_eq x = b_eq,  lo <= x <= hi

Equalities are eliminated through a null-space basis; the remaining
inequalities (general rows and finite bounds) are handled by a primal
active-set loop started from a phase-1 point. Duals follow the convention
Qx + c + A_in'l + A_eq'v + (mu_hi - mu_lo) = 0 with l, mu >= 0.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

KKT_TOL = 1e-8
FEAS_TOL = 1e-9
REG = 1e-10


@dataclass
class QuadProgram:
    hessian: np.ndarray
    linear: np.ndarray
    ineq_a: np.ndarray | None = None
    ineq_b: np.ndarray | None = None
    eq_a: np.ndarray | None = None
    eq_b: np.ndarray | None = None
    lo: np.ndarray | None = None
    hi: np.ndarray | None = None

    def __post_init__(self):
        self.hessian = np.atleast_2d(np.asarray(self.hessian, dtype=float))
        self.linear = np.atleast_1d(np.asarray(self.linear, dtype=float))
        n = self.linear.size
        if self.hessian.shape != (n, n):
            raise ValueError(f"hessian shape {self.hessian.shape} does not match dim {n}")
        if not np.allclose(self.hessian, self.hessian.T, atol=1e-12, rtol=0):
            raise ValueError("hessian must be symmetric")
        self.ineq_a, self.ineq_b = _rows(self.ineq_a, self.ineq_b, n, "ineq")
        self.eq_a, self.eq_b = _rows(self.eq_a, self.eq_b, n, "eq")
        self.lo = np.full(n, -np.inf) if self.lo is None else np.asarray(self.lo, dtype=float).copy()
        self.hi = np.full(n, np.inf) if self.hi is None else np.asarray(self.hi, dtype=float).copy()
        if self.lo.shape != (n,) or self.hi.shape != (n,):
            raise ValueError("bounds must have one entry per variable")
        if np.any(self.lo > self.hi):
            raise ValueError("lower bound above upper bound")

    @property
    def dim(self) -> int:
        return self.linear.size

    def objective(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ self.hessian @ x + self.linear @ x)

    def dump(self) -> str:
        """Plain-text dump for replaying a program in a debugger."""
        with np.printoptions(precision=17, floatmode="unique", linewidth=200):
            parts = [f"dim {self.dim}", f"Q\n{self.hessian}", f"c\n{self.linear}",
                     f"A_in\n{self.ineq_a}", f"b_in\n{self.ineq_b}",
                     f"A_eq\n{self.eq_a}", f"b_eq\n{self.eq_b}",
                     f"lo\n{self.lo}", f"hi\n{self.hi}"]
        return "\n".join(parts) + "\n"


def _rows(a, b, n, name):
    if a is None:
        return np.zeros((0, n)), np.zeros(0)
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    if a.size == 0:
        return np.zeros((0, n)), np.zeros(0)
    if a.shape[1] != n or a.shape[0] != b.size:
        raise ValueError(f"{name} rows have shape {a.shape} for dim {n} and {b.size} rhs")
    return a, b


@dataclass
class QpSolution:
    x: np.ndarray
    status: str  # optimal | infeasible | unbounded | iteration-limit
    objective: float
    duals_ineq: np.ndarray = field(default_factory=lambda: np.zeros(0))
    duals_eq: np.ndarray = field(default_factory=lambda: np.zeros(0))
    duals_lo: np.ndarray = field(default_factory=lambda: np.zeros(0))
    duals_hi: np.ndarray = field(default_factory=lambda: np.zeros(0))
    iterations: int = 0
    active: tuple[int, ...] = ()
    violated_rows: tuple[int, ...] = ()

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


def kkt_residuals(prog: QuadProgram, sol: QpSolution) -> dict[str, float]:
    """Stationarity, primal feasibility and complementarity residuals (max-abs)."""
    x = sol.x
    grad = prog.hessian @ x + prog.linear
    grad = grad + prog.ineq_a.T @ sol.duals_ineq + prog.eq_a.T @ sol.duals_eq
    grad = grad + sol.duals_hi - sol.duals_lo
    slack_in = prog.ineq_b - prog.ineq_a @ x
    feas = [np.max(-slack_in, initial=0.0),
            np.max(np.abs(prog.eq_a @ x - prog.eq_b), initial=0.0),
            np.max(prog.lo - x, initial=0.0), np.max(x - prog.hi, initial=0.0)]
    fin_lo = np.isfinite(prog.lo)
    fin_hi = np.isfinite(prog.hi)
    comp = [np.max(np.abs(sol.duals_ineq * slack_in), initial=0.0),
            np.max(np.abs(sol.duals_lo[fin_lo] * (x - prog.lo)[fin_lo]), initial=0.0),
            np.max(np.abs(sol.duals_hi[fin_hi] * (prog.hi - x)[fin_hi]), initial=0.0)]
    dual_sign = min(np.min(sol.duals_ineq, initial=0.0), np.min(sol.duals_lo, initial=0.0),
                    np.min(sol.duals_hi, initial=0.0))
    return {"stationarity": float(np.max(np.abs(grad), initial=0.0)),
            "feasibility": float(max(feas)),
            "complementarity": float(max(comp)),
            "dual_sign": float(-dual_sign)}


class ActiveSetSolver:
    """Solver bound to one constraint set; the linear term may change between solves.

    Keeps the equality elimination and the last working set so repeated solves
    (ADMM local steps) warm start.
    """

    def __init__(self, prog: QuadProgram):
        self.prog = prog
        n = prog.dim
        self._max_iter = 50 * max(n, 1)
        # all inequalities as G x <= h: general rows, then finite upper, then finite lower bounds
        hi_idx = np.flatnonzero(np.isfinite(prog.hi))
        lo_idx = np.flatnonzero(np.isfinite(prog.lo))
        eye = np.eye(n)
        self._hi_idx, self._lo_idx = hi_idx, lo_idx
        self._G = np.vstack([prog.ineq_a, eye[hi_idx], -eye[lo_idx]])
        self._h = np.concatenate([prog.ineq_b, prog.hi[hi_idx], -prog.lo[lo_idx]])

        self._consistent = True
        if prog.eq_a.shape[0]:
            u, s, vt = np.linalg.svd(prog.eq_a)
            tol = max(prog.eq_a.shape) * np.finfo(float).eps * (s[0] if s.size else 0.0) * 10
            rank = int(np.sum(s > max(tol, 1e-12)))
            x_p = vt[:rank].T @ ((u[:, :rank].T @ prog.eq_b) / s[:rank])
            if np.max(np.abs(prog.eq_a @ x_p - prog.eq_b)) > 1e-9 * (1 + np.max(np.abs(prog.eq_b))):
                self._consistent = False
            self._x_p = x_p
            self._Z = vt[rank:].T
        else:
            self._x_p = np.zeros(n)
            self._Z = np.eye(n)
        Z = self._Z
        self._H = Z.T @ prog.hessian @ Z
        self._H_flat = None  # unregularized reduced Hessian, kept only when singular
        if self._H.size:
            self._H = 0.5 * (self._H + self._H.T)
            if np.linalg.eigvalsh(self._H)[0] < REG:
                self._H_flat = self._H
                self._H = self._H + REG * np.eye(self._H.shape[0])
        self._Gz = self._G @ Z
        self._x_last: np.ndarray | None = None
        self._work_last: list[int] = []

    # -- public -------------------------------------------------------------
    def solve(self, linear: np.ndarray | None = None, warm_start: bool = True) -> QpSolution:
        prog = self.prog
        c = prog.linear if linear is None else np.asarray(linear, dtype=float)
        n = prog.dim
        if not self._consistent:
            return self._fail("infeasible", np.full(n, np.nan), ())
        Z, x_p = self._Z, self._x_p
        hz = self._h - self._G @ x_p
        gz_lin = Z.T @ (prog.hessian @ x_p + c)
        k = Z.shape[1]

        y0 = None
        work: list[int] = []
        if warm_start and self._x_last is not None:
            y_try = Z.T @ (self._x_last - x_p)
            if np.all(self._Gz @ y_try <= hz + FEAS_TOL):
                y0 = y_try
                work = self._independent([i for i in self._work_last
                                          if abs(self._Gz[i] @ y0 - hz[i]) <= FEAS_TOL])
        if y0 is None:
            y0, viol = self._phase_one(hz, k)
            if y0 is None:
                return self._fail("infeasible", np.full(n, np.nan), viol)

        y, work, status, iters, lam = self._active_set(y0, work, gz_lin, hz)
        x = x_p + Z @ y
        if status != "optimal":
            return self._fail(status, x, (), iters)
        self._x_last, self._work_last = x.copy(), list(work)
        return self._package(x, c, work, lam, iters)

    # -- internals ----------------------------------------------------------
    def _fail(self, status, x, violated, iters=0):
        prog = self.prog
        obj = prog.objective(x) if np.all(np.isfinite(x)) else float("nan")
        return QpSolution(x, status, obj, np.zeros(prog.ineq_a.shape[0]), np.zeros(prog.eq_a.shape[0]),
                          np.zeros(prog.dim), np.zeros(prog.dim), iters, (), tuple(violated))

    def _independent(self, rows: list[int]) -> list[int]:
        keep: list[int] = []
        for i in rows:
            cand = self._Gz[keep + [i]]
            if np.linalg.matrix_rank(cand, tol=1e-10) == len(keep) + 1:
                keep.append(i)
        return keep

    def _phase_one(self, hz: np.ndarray, k: int):
        """Feasible point of {y : Gz y <= hz} via an elastic auxiliary QP.

        Returns (y, ()) on success or (None, violated general-row indices).
        """
        m = hz.size
        m_in = self.prog.ineq_a.shape[0]
        if k == 0:
            bad = np.flatnonzero(hz < -FEAS_TOL)
            if bad.size:
                return None, tuple(int(i) for i in bad if i < m_in)
            return np.zeros(0), ()
        y = np.zeros(k)
        if m == 0 or np.max(self._Gz @ y - hz) <= 0:
            return y, ()
        # variables (y, t): min t + d/2 (|y|^2 + t^2)  s.t.  Gz y - t <= hz, -t <= 0
        d = 1e-6
        G1 = np.vstack([np.hstack([self._Gz, -np.ones((m, 1))]),
                        np.hstack([np.zeros((1, k)), -np.ones((1, 1))])])
        h1 = np.concatenate([hz, [0.0]])
        H1 = d * np.eye(k + 1)
        g1 = np.zeros(k + 1)
        g1[-1] = 1.0
        z0 = np.concatenate([y, [float(np.max(self._Gz @ y - hz))]])
        z, _, status, _, _ = self._active_set_generic(z0, [], g1, H1, G1, h1, 100 * (k + m + 1))
        y = z[:k]
        viol = self._Gz @ y - hz
        if status == "optimal" and np.max(viol) <= FEAS_TOL:
            return y, ()
        bad = np.flatnonzero(viol > FEAS_TOL)
        return None, tuple(int(i) for i in bad if i < m_in)

    def _active_set(self, y0, work, gz_lin, hz):
        return self._active_set_generic(y0, work, gz_lin, self._H, self._Gz, hz, self._max_iter, self._H_flat)

    @staticmethod
    def _active_set_generic(y, work, g_lin, H, G, h, max_iter, H_flat=None):
        """Primal active-set loop (Nocedal & Wright Alg. 16.3) on min 1/2 y'Hy + g'y, Gy <= h."""
        k = y.size
        work = list(work)
        lam = np.zeros(0)
        if k == 0:
            return y, work, "optimal", 0, np.zeros(0)
        # after an unblocked full step y already minimizes over the working set
        at_min = False
        for it in range(1, max_iter + 1):
            g = H @ y + g_lin
            m = len(work)
            C = G[work] if m else np.zeros((0, k))
            kkt = np.zeros((k + m, k + m))
            kkt[:k, :k] = H
            kkt[:k, k:] = C.T
            kkt[k:, :k] = C
            rhs = np.concatenate([-g, np.zeros(m)])
            try:
                sol = np.linalg.solve(kkt, rhs)
            except np.linalg.LinAlgError:
                sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
            p, lam = sol[:k], sol[k:]
            scale = 1.0 + np.max(np.abs(y))
            if at_min or np.max(np.abs(p)) <= 1e-12 * scale:
                at_min = False
                if m == 0 or np.min(lam) >= -1e-12:
                    return y, work, "optimal", it, lam
                # drop the most negative multiplier; lowest index wins ties
                j = int(np.argmin(lam))
                work.pop(j)
                continue
            if np.max(np.abs(p)) > 1e12:
                return y, work, "unbounded", it, lam
            alpha = 1.0
            block = -1
            gp = G @ p
            slack = h - G @ y
            wset = set(work)
            for i in range(G.shape[0]):
                if i in wset or gp[i] <= 1e-14:
                    continue
                a = max(slack[i], 0.0) / gp[i]
                if a < alpha:
                    alpha, block = a, i
            if block < 0 and H_flat is not None and p @ H_flat @ p <= 1e-8 * (p @ p) and g @ p < 0:
                # unblocked descent along a direction the regularization alone made finite
                return y, work, "unbounded", it, lam
            y = y + alpha * p
            if block >= 0:
                work.append(block)
            else:
                at_min = True
        return y, work, "iteration-limit", max_iter, lam

    def _package(self, x, c, work, lam_w, iters):
        prog = self.prog
        m_in = prog.ineq_a.shape[0]
        n_hi = self._hi_idx.size
        lam_all = np.zeros(self._G.shape[0])
        # multipliers of the reduced problem are those of the full one for the G rows
        for idx, l in zip(work, lam_w):
            lam_all[idx] = max(l, 0.0)
        duals_in = lam_all[:m_in]
        duals_hi = np.zeros(prog.dim)
        duals_lo = np.zeros(prog.dim)
        duals_hi[self._hi_idx] = lam_all[m_in:m_in + n_hi]
        duals_lo[self._lo_idx] = lam_all[m_in + n_hi:]
        # snap active rows onto their boundary to clean up round-off
        if work:
            x = self._polish(x, work)
        r = prog.hessian @ x + c + self._G.T @ lam_all
        if prog.eq_a.shape[0]:
            duals_eq = np.linalg.lstsq(prog.eq_a.T, -r, rcond=None)[0]
        else:
            duals_eq = np.zeros(0)
        sol = QpSolution(x, "optimal", float(0.5 * x @ prog.hessian @ x + c @ x), duals_in, duals_eq,
                         duals_lo, duals_hi, iters, tuple(int(i) for i in sorted(work)))
        return sol

    def _polish(self, x, work):
        prog = self.prog
        rows = [self._G[work]]
        rhs = [self._h[work]]
        if prog.eq_a.shape[0]:
            rows.append(prog.eq_a)
            rhs.append(prog.eq_b)
        A = np.vstack(rows)
        r = np.concatenate(rhs) - A @ x
        dx = np.linalg.lstsq(A, r, rcond=None)[0]
        if np.max(np.abs(dx), initial=0.0) < 1e-8:
            return x + dx
        return x


def solve_qp(prog: QuadProgram) -> QpSolution:
    return ActiveSetSolver(prog).solve(warm_start=False)
