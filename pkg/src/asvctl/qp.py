"""Operator-splitting (ADMM) solver for convex quadratic programs

    minimize    1/2 x'Hx + g'x
    subject to  lower <= Ax <= upper

The iteration follows the OSQP scheme: Ruiz equilibration, a fixed penalty
``rho`` with over-relaxation ``alpha``, and a final active-set polish that
recovers a high-accuracy KKT point.  The polish is also attempted directly
from a warm start, which lets receding-horizon controllers skip the ADMM
iterations entirely when the active set does not change between cycles.

Dual sign convention: ``y_i < 0`` on an active lower bound and ``y_i > 0`` on
an active upper bound, so stationarity reads ``Hx + g + A'y = 0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np
import scipy.linalg as sla

SOLVED = "solved"
MAX_ITER = "max_iter"
PRIMAL_INFEASIBLE = "primal_infeasible"

_INF = 1e20


class MaxIterations(RuntimeError):
    """Raised by :func:`solve_or_raise` when the iteration cap is hit."""


class DetectedInfeasible(RuntimeError):
    """Raised by :func:`solve_or_raise` on a primal infeasibility certificate."""


@dataclass(frozen=True)
class QuadraticProgram:
    hessian: np.ndarray
    gradient: np.ndarray
    constraint_matrix: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    # True when the constraint matrix is the identity (simple bounds on x)
    is_box: bool = field(default=False, compare=False, repr=False)

    @classmethod
    def box(cls, hessian, gradient, lower, upper, check: bool = True) -> "QuadraticProgram":
        """Simple bounds ``lower <= x <= upper``.

        ``check=False`` skips validation for trusted callers that already
        hold float arrays of matching shapes (the MPC builds one per cycle).
        """
        n = np.asarray(gradient).size
        if check:
            return cls(hessian, gradient, _identity(n), lower, upper, True)
        qp = object.__new__(cls)
        for name, value in (("hessian", hessian), ("gradient", gradient),
                            ("constraint_matrix", _identity(n)), ("lower", lower),
                            ("upper", upper), ("is_box", True)):
            object.__setattr__(qp, name, value)
        return qp

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.hessian, dtype=float))
        g = np.asarray(self.gradient, dtype=float).reshape(-1)
        A = np.asarray(self.constraint_matrix, dtype=float)
        n = g.size
        if A.size == 0:
            A = A.reshape(0, n)
        A = np.atleast_2d(A)
        lo = np.asarray(self.lower, dtype=float).reshape(-1)
        up = np.asarray(self.upper, dtype=float).reshape(-1)
        if H.shape != (n, n):
            raise ValueError(f"hessian shape {H.shape} does not match gradient size {n}")
        if A.shape[1] != n or lo.size != A.shape[0] or up.size != A.shape[0]:
            raise ValueError("constraint dimensions are inconsistent")
        if np.max(np.abs(H - H.T), initial=0.0) > 1e-10 * max(1.0, np.abs(H).max(initial=0.0)):
            raise ValueError("hessian must be symmetric")
        if np.any(lo > up):
            raise ValueError("lower must not exceed upper")
        for name, value in (("hessian", H), ("gradient", g), ("constraint_matrix", A),
                            ("lower", lo), ("upper", up)):
            object.__setattr__(self, name, value)

    @property
    def n(self) -> int:
        return self.gradient.size

    @property
    def m(self) -> int:
        return self.lower.size

    def objective(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return 0.5 * float(x @ self.hessian @ x) + float(self.gradient @ x)


_IDENTITIES: dict[int, np.ndarray] = {}


def _identity(n: int) -> np.ndarray:
    eye = _IDENTITIES.get(n)
    if eye is None:
        eye = np.eye(n)
        eye.setflags(write=False)
        _IDENTITIES[n] = eye
    return eye


@dataclass
class QpSolution:
    primal: np.ndarray
    dual: np.ndarray
    status: str
    iterations: int
    primal_residual: float
    dual_residual: float
    polished: bool = False
    objective: float = float("nan")


@dataclass
class QpSettings:
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    eps_abs: float = 1e-6
    eps_rel: float = 0.0
    eps_prim_inf: float = 1e-6
    max_iter: int = 4000
    scaling_iter: int = 10
    check_interval: int = 25
    polish: bool = True
    polish_refine: int = 3
    polish_delta: float = 1e-9


def kkt_residuals(qp: QuadraticProgram, x, y):
    """Return (primal, dual, complementarity) infinity-norm residuals."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    Ax = qp.constraint_matrix @ x
    viol = np.maximum(qp.lower - Ax, 0.0) + np.maximum(Ax - qp.upper, 0.0)
    prim = float(np.max(viol, initial=0.0))
    dual = float(np.max(np.abs(qp.hessian @ x + qp.gradient + qp.constraint_matrix.T @ y),
                        initial=0.0))
    # y- (Ax - l) and y+ (u - Ax); infinite bounds contribute only via a nonzero dual
    y_neg = np.minimum(y, 0.0)
    y_pos = np.maximum(y, 0.0)
    gap_l = np.where(np.isfinite(qp.lower), Ax - qp.lower, np.where(y_neg < 0, np.inf, 0.0))
    gap_u = np.where(np.isfinite(qp.upper), qp.upper - Ax, np.where(y_pos > 0, np.inf, 0.0))
    comp = np.concatenate([np.abs(y_neg * np.where(y_neg < 0, gap_l, 0.0)),
                           np.abs(y_pos * np.where(y_pos > 0, gap_u, 0.0))])
    return prim, dual, float(np.max(comp, initial=0.0))


class AdmmSolver:
    """Dense ADMM solver with a cached factorization.

    A single instance owns its factorization cache and is not safe for
    concurrent use; create one solver per controller.
    """

    def __init__(self, settings: QpSettings | None = None):
        self.settings = settings or QpSettings()
        self._cache_key = None
        self._cache = None

    # -- public ----------------------------------------------------------

    def solve(self, qp: QuadraticProgram, warm_start=None) -> QpSolution:
        s = self.settings
        n, m = qp.n, qp.m
        if warm_start is not None:
            x0 = np.asarray(warm_start[0], dtype=float).reshape(n)
            y0 = (np.zeros(m) if warm_start[1] is None
                  else np.asarray(warm_start[1], dtype=float).reshape(m))
        else:
            x0, y0 = np.zeros(n), np.zeros(m)

        if s.polish:
            sol = self._polish(qp, x0, y0, iterations=0)
            if sol is not None:
                return sol

        work = self._workspace(qp)
        return self._admm(qp, work, x0, y0)

    # -- scaling / factorization -------------------------------------------

    def _workspace(self, qp):
        key = (qp.hessian.tobytes(), qp.constraint_matrix.tobytes(),
               qp.lower.tobytes(), qp.upper.tobytes(), qp.hessian.shape,
               qp.constraint_matrix.shape)
        if key == self._cache_key:
            return self._cache
        s = self.settings
        H, A = qp.hessian, qp.constraint_matrix
        n, m = qp.n, qp.m
        D = np.ones(n)
        E = np.ones(m)
        Hs, As = H.copy(), A.copy()
        c = 1.0
        for _ in range(s.scaling_iter):
            col_h = np.max(np.abs(Hs), axis=0, initial=0.0)
            col_a = np.max(np.abs(As), axis=0, initial=0.0)
            dn = np.maximum(col_h, col_a)
            row_a = np.max(np.abs(As), axis=1, initial=0.0)
            dn = 1.0 / np.sqrt(np.where(dn < 1e-4, 1.0, np.minimum(dn, 1e4)))
            dm = 1.0 / np.sqrt(np.where(row_a < 1e-4, 1.0, np.minimum(row_a, 1e4)))
            Hs = dn[:, None] * Hs * dn[None, :]
            As = dm[:, None] * As * dn[None, :]
            D *= dn
            E *= dm
        mean_col = np.mean(np.max(np.abs(Hs), axis=0, initial=0.0)) if n else 1.0
        c = 1.0 / max(mean_col, 1e-4)
        c = min(c, 1e4)
        Hs *= c

        lo = np.where(np.isfinite(qp.lower), qp.lower, -_INF)
        up = np.where(np.isfinite(qp.upper), qp.upper, _INF)
        ls = np.where(lo > -_INF, E * lo, -_INF)
        us = np.where(up < _INF, E * up, _INF)
        rho = np.where(np.abs(up - lo) < 1e-12, 1e3 * s.rho, s.rho)
        K = Hs + s.sigma * np.eye(n) + As.T @ (rho[:, None] * As)
        factor = sla.cho_factor(K, lower=True, check_finite=False)
        work = dict(D=D, E=E, c=c, H=Hs, A=As, l=ls, u=us, rho=rho, factor=factor)
        self._cache_key = key
        self._cache = work
        return work

    # -- ADMM -------------------------------------------------------------

    def _admm(self, qp, work, x0, y0):
        s = self.settings
        D, E, c = work["D"], work["E"], work["c"]
        A, l, u, rho = work["A"], work["l"], work["u"], work["rho"]
        factor = work["factor"]
        q = c * D * qp.gradient
        x = x0 / D
        z = np.clip(A @ x, l, u)
        y = c * y0 / E
        alpha, sigma = s.alpha, s.sigma
        best = None
        it = 0
        while it < s.max_iter:
            it += 1
            y_prev = y
            rhs = sigma * x - q + A.T @ (rho * z - y)
            xt = sla.cho_solve(factor, rhs, check_finite=False)
            zt = A @ xt
            x = alpha * xt + (1.0 - alpha) * x
            zr = alpha * zt + (1.0 - alpha) * z
            z_new = np.clip(zr + y / rho, l, u)
            y = y + rho * (zr - z_new)
            z = z_new

            if it % s.check_interval and it != s.max_iter:
                continue
            xu, yu = D * x, E * y / c
            prim, dual, _ = kkt_residuals(qp, xu, yu)
            zu = z / np.where(E == 0, 1.0, E)
            Axu = qp.constraint_matrix @ xu
            prim_admm = float(np.max(np.abs(Axu - zu), initial=0.0))
            if best is None or max(prim, dual) < max(best[2], best[3]):
                best = (xu.copy(), yu.copy(), prim, dual)
            tol_p = s.eps_abs + s.eps_rel * max(np.max(np.abs(Axu), initial=0.0),
                                                np.max(np.abs(zu), initial=0.0))
            tol_d = s.eps_abs + s.eps_rel * np.max(np.abs(qp.gradient), initial=0.0)
            if s.polish:
                sol = self._polish(qp, xu, yu, iterations=it)
                if sol is not None:
                    return sol
            if prim_admm <= tol_p and prim <= tol_p and dual <= tol_d:
                return QpSolution(xu, yu, SOLVED, it, prim, dual, False, qp.objective(xu))
            if self._primal_infeasible(qp, work, y - y_prev):
                return QpSolution(xu, yu, PRIMAL_INFEASIBLE, it, prim, dual, False,
                                  qp.objective(xu))
        xb, yb, prim, dual = best
        return QpSolution(xb, yb, MAX_ITER, it, prim, dual, False, qp.objective(xb))

    def _primal_infeasible(self, qp, work, dy):
        eps = self.settings.eps_prim_inf
        E = work["E"]
        dy_u = E * dy  # certificate in original units, up to a positive factor
        norm = np.max(np.abs(dy_u), initial=0.0)
        if norm < 1e-30:
            return False
        if np.max(np.abs(qp.constraint_matrix.T @ dy_u), initial=0.0) > eps * norm:
            return False
        pos = dy_u > eps * norm
        neg = dy_u < -eps * norm
        if np.any(pos & ~np.isfinite(qp.upper)) or np.any(neg & ~np.isfinite(qp.lower)):
            return False
        support = (np.sum(qp.upper[pos] * dy_u[pos]) + np.sum(qp.lower[neg] * dy_u[neg]))
        return support < -eps * norm

    # -- polish -----------------------------------------------------------

    def _polish(self, qp, x, y, iterations):
        if qp.is_box:
            sol = self._polish_box(qp, x, y, iterations)
            if sol is not None:
                return sol
        s = self.settings
        A, H, g = qp.constraint_matrix, qp.hessian, qp.gradient
        n = qp.n
        z = np.clip(A @ x, qp.lower, qp.upper)
        low = (z - qp.lower < -y) & np.isfinite(qp.lower)
        upp = (qp.upper - z < y) & np.isfinite(qp.upper) & ~low
        act = np.flatnonzero(low | upp)
        Aa = A[act]
        b = np.where(low[act], qp.lower[act], qp.upper[act])
        k = act.size
        K = np.zeros((n + k, n + k))
        K[:n, :n] = H
        K[:n, n:] = Aa.T
        K[n:, :n] = Aa
        delta = s.polish_delta
        Kd = K.copy()
        Kd[:n, :n] += delta * np.eye(n)
        Kd[n:, n:] -= delta * np.eye(k)
        rhs = np.concatenate([-g, b])
        try:
            lu = sla.lu_factor(Kd, check_finite=False)
        except (ValueError, sla.LinAlgError):
            return None
        sol = sla.lu_solve(lu, rhs, check_finite=False)
        for _ in range(s.polish_refine):
            sol = sol + sla.lu_solve(lu, rhs - K @ sol, check_finite=False)
        if not np.all(np.isfinite(sol)):
            return None
        xp = sol[:n]
        yp = np.zeros(qp.m)
        yp[act] = sol[n:]
        # dual signs must match the bound they act on (equalities are exempt)
        eq = np.abs(qp.upper - qp.lower) < 1e-12
        tol = s.eps_abs
        if np.any((yp[low] > tol) & ~eq[low]) or np.any((yp[upp] < -tol) & ~eq[upp]):
            return None
        prim, dual, comp = kkt_residuals(qp, xp, yp)
        if prim <= s.eps_abs and dual <= s.eps_abs and comp <= s.eps_abs:
            # clip tiny sign violations so the returned dual is exactly consistent
            yp[low & ~eq] = np.minimum(yp[low & ~eq], 0.0)
            yp[upp & ~eq] = np.maximum(yp[upp & ~eq], 0.0)
            prim, dual, comp = kkt_residuals(qp, xp, yp)
            if prim <= s.eps_abs and dual <= s.eps_abs and comp <= s.eps_abs:
                return QpSolution(xp, yp, SOLVED, iterations, prim, dual, True,
                                  qp.objective(xp))
        return None


    def _polish_box(self, qp, x, y, iterations):
        """Bound-constrained polish: fix the guessed active bounds and solve the
        reduced Newton system on the free variables by Cholesky."""
        ok, xp, yp, prim, dual = _box_polish_kernel(
            qp.hessian, qp.gradient, qp.lower, qp.upper, np.asarray(x, dtype=float),
            np.asarray(y, dtype=float), self.settings.eps_abs)
        if ok:
            return QpSolution(xp, yp, SOLVED, iterations, prim, dual, True,
                              qp.objective(xp))
        return None


@numba.njit(cache=True)
def _box_polish_kernel(H, g, lo, up, x, y, tol):
    n = g.shape[0]
    fixed = np.zeros(n, dtype=np.bool_)
    low = np.zeros(n, dtype=np.bool_)
    xp = np.zeros(n)
    for i in range(n):
        z = min(max(x[i], lo[i]), up[i])
        if np.isfinite(lo[i]) and z - lo[i] < -y[i]:
            low[i] = True
            fixed[i] = True
            xp[i] = lo[i]
        elif np.isfinite(up[i]) and up[i] - z < y[i]:
            fixed[i] = True
            xp[i] = up[i]
    free = np.flatnonzero(~fixed)
    nf = free.shape[0]
    yp = np.zeros(n)
    if nf > 0:
        rhs = np.empty(nf)
        L = np.zeros((nf, nf))
        for a in range(nf):
            i = free[a]
            acc = -g[i]
            for j in range(n):
                if fixed[j]:
                    acc -= H[i, j] * xp[j]
            rhs[a] = acc
            for b in range(a + 1):
                L[a, b] = H[i, free[b]]
        # in-place Cholesky of the free block
        for a in range(nf):
            d = L[a, a]
            for k in range(a):
                d -= L[a, k] * L[a, k]
            if not d > 0.0:
                return False, xp, yp, np.inf, np.inf
            d = np.sqrt(d)
            L[a, a] = d
            for b in range(a + 1, nf):
                acc = L[b, a]
                for k in range(a):
                    acc -= L[b, k] * L[a, k]
                L[b, a] = acc / d
        sol = np.zeros(nf)
        r = rhs.copy()
        for _ in range(2):
            # forward then backward substitution, then one refinement pass
            t = np.empty(nf)
            for a in range(nf):
                acc = r[a]
                for k in range(a):
                    acc -= L[a, k] * t[k]
                t[a] = acc / L[a, a]
            for a in range(nf - 1, -1, -1):
                acc = t[a]
                for k in range(a + 1, nf):
                    acc -= L[k, a] * t[k]
                t[a] = acc / L[a, a]
            for a in range(nf):
                sol[a] += t[a]
            for a in range(nf):
                acc = rhs[a]
                i = free[a]
                for b in range(nf):
                    acc -= H[i, free[b]] * sol[b]
                r[a] = acc
        for a in range(nf):
            xp[free[a]] = sol[a]
    prim = 0.0
    dual = 0.0
    for i in range(n):
        grad = g[i]
        for j in range(n):
            grad += H[i, j] * xp[j]
        if fixed[i]:
            yi = -grad
            if low[i]:
                if yi > tol:
                    return False, xp, yp, np.inf, np.inf
                yi = min(yi, 0.0)
            else:
                if yi < -tol:
                    return False, xp, yp, np.inf, np.inf
                yi = max(yi, 0.0)
            yp[i] = yi
        dual = max(dual, abs(grad + yp[i]))
        prim = max(prim, lo[i] - xp[i], xp[i] - up[i])
    ok = prim <= tol and dual <= tol
    return ok, xp, yp, prim, dual


def solve(qp: QuadraticProgram, warm_start=None, settings: QpSettings | None = None):
    return AdmmSolver(settings).solve(qp, warm_start)


def solve_or_raise(qp, warm_start=None, settings=None) -> QpSolution:
    sol = solve(qp, warm_start, settings)
    if sol.status == MAX_ITER:
        raise MaxIterations(f"no convergence after {sol.iterations} iterations")
    if sol.status == PRIMAL_INFEASIBLE:
        raise DetectedInfeasible("primal infeasibility certificate found")
    return sol


# -- plain-text dump -----------------------------------------------------
#
# A dump is a sequence of blocks.  Each block starts with a header line
#     <name> <rows> <cols>
# followed by <rows> lines of <cols> whitespace-separated values.  Infinite
# bounds are written as inf / -inf.  Lines starting with '#' are comments.

_BLOCKS = ("hessian", "gradient", "constraint_matrix", "lower", "upper")


def dump_qp(qp: QuadraticProgram, path, comment: str | None = None) -> None:
    lines = ["# quadratic program: min 1/2 x'Hx + g'x  s.t.  lower <= Ax <= upper"]
    if comment:
        lines.extend("# " + c for c in comment.splitlines())
    for name in _BLOCKS:
        value = np.atleast_2d(getattr(qp, name))
        if name in ("gradient", "lower", "upper"):
            value = value.reshape(-1, 1)
        lines.append(f"{name} {value.shape[0]} {value.shape[1]}")
        lines.extend(" ".join(f"{v:.17g}" for v in row) for row in value)
    Path(path).write_text("\n".join(lines) + "\n")


def load_qp(path) -> QuadraticProgram:
    rows = [ln for ln in Path(path).read_text().splitlines()
            if ln.strip() and not ln.startswith("#")]
    blocks = {}
    i = 0
    while i < len(rows):
        name, r, c = rows[i].split()
        r, c = int(r), int(c)
        data = np.array([[float(v) for v in rows[i + 1 + j].split()] for j in range(r)])
        blocks[name] = data.reshape(r, c)
        i += 1 + r
    return QuadraticProgram(
        blocks["hessian"], blocks["gradient"].reshape(-1),
        blocks["constraint_matrix"], blocks["lower"].reshape(-1),
        blocks["upper"].reshape(-1),
    )
