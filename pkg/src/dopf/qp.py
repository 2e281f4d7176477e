"""Operator-splitting solver for sparse convex QPs and LPs.

ADMM over the constraint set ``l <= M x <= u`` where M stacks equalities,
inequalities, variable boxes and per-pair disc constraints. The x-update
factors ``P + sigma I + rho M'M`` once (sparse LDL via SuperLU); the
z-update projects onto intervals and discs. Ruiz equilibration conditions
the data before iterating. No external solver dependency.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


@dataclass(frozen=True)
class SolverSettings:
    rho: float = 1.0
    sigma: float = 1e-6
    eps_abs: float = 1e-6
    eps_rel: float = 1e-6
    max_iter: int = 20000
    lp_regularization: float = 1e-6
    polish: bool = True
    check_every: int = 25
    adaptive_rho: bool = True     # rebalance rho when residuals diverge
    max_refactor: int = 20

    def __post_init__(self):
        for name in ("rho", "sigma", "eps_abs", "eps_rel", "max_iter",
                     "lp_regularization", "check_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class QpProblem:
    """min 1/2 x'Hx + f'x  s.t.  Aeq x = beq, G x <= h, lb <= x <= ub,
    and (x[ip], x[iq]) inside a disc of given radius for each entry of
    ``discs``."""
    H: sp.spmatrix | None
    f: np.ndarray
    A: sp.spmatrix | None = None
    b: np.ndarray | None = None
    G: sp.spmatrix | None = None
    h: np.ndarray | None = None
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None
    discs: list = field(default_factory=list)   # (ip, iq, radius)

    @property
    def n(self) -> int:
        return len(self.f)

    def validate(self, rng=None):
        n = self.n
        if self.H is not None:
            if self.H.shape != (n, n):
                raise ValueError("H dimension mismatch")
            rng = rng or np.random.default_rng(0)
            Hc = self.H.tocsc()
            asym = abs(Hc - Hc.T)
            if asym.nnz and asym.max() > 1e-9:
                raise ValueError("H must be symmetric")
            for _ in range(8):
                v = rng.standard_normal(n)
                if v @ (Hc @ v) < -1e-9 * (v @ v):
                    raise ValueError("H is not positive semidefinite")
        for mat, vec, name in ((self.A, self.b, "A/b"), (self.G, self.h, "G/h")):
            if (mat is None) != (vec is None):
                raise ValueError(f"{name}: matrix and rhs must come together")
            if mat is not None and (mat.shape[1] != n or mat.shape[0] != len(vec)):
                raise ValueError(f"{name} dimension mismatch")
        for ip, iq, r in self.discs:
            if not (0 <= ip < n and 0 <= iq < n):
                raise ValueError("disc index out of range")
            if r <= 0:
                raise ValueError("disc radius must be positive")


@dataclass
class SolverResult:
    status: str         # optimal | max-iter | primal-infeasible | unbounded
    x: np.ndarray
    y: np.ndarray                # multipliers for stacked constraints
    objective: float
    iterations: int
    primal_residual: float
    dual_residual: float

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


def project_disc(p_val: float, q_val: float, radius: float):
    """Euclidean projection of (p, q) onto the disc of the given radius."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    norm = np.hypot(p_val, q_val)
    if norm <= radius:
        return float(p_val), float(q_val)
    scale = radius / norm
    return float(p_val * scale), float(q_val * scale)


def _stack_constraints(p: QpProblem):
    """Build M, l, u and the list of disc row pairs in stacked coordinates."""
    n = p.n
    blocks = []
    lo = []
    hi = []
    if p.A is not None and p.A.shape[0]:
        blocks.append(sp.csc_matrix(p.A))
        lo.append(np.asarray(p.b, float))
        hi.append(np.asarray(p.b, float))
    if p.G is not None and p.G.shape[0]:
        blocks.append(sp.csc_matrix(p.G))
        lo.append(np.full(p.G.shape[0], -np.inf))
        hi.append(np.asarray(p.h, float))
    lb = np.full(n, -np.inf) if p.lb is None else np.asarray(p.lb, float)
    ub = np.full(n, np.inf) if p.ub is None else np.asarray(p.ub, float)
    box_rows = np.where(np.isfinite(lb) | np.isfinite(ub))[0]
    if len(box_rows):
        E = sp.csc_matrix((np.ones(len(box_rows)), (np.arange(len(box_rows)), box_rows)),
                          shape=(len(box_rows), n))
        blocks.append(E)
        lo.append(lb[box_rows])
        hi.append(ub[box_rows])
    disc_pairs = []
    for ip, iq, r in p.discs:
        row0 = sum(bk.shape[0] for bk in blocks)
        E = sp.csc_matrix((np.ones(2), (np.arange(2), [ip, iq])), shape=(2, n))
        blocks.append(E)
        lo.append(np.full(2, -np.inf))
        hi.append(np.full(2, np.inf))
        disc_pairs.append((row0, row0 + 1, float(r)))
    if not blocks:
        M = sp.csc_matrix((0, n))
        return M, np.zeros(0), np.zeros(0), disc_pairs
    M = sp.vstack(blocks, format="csc")
    return M, np.concatenate(lo), np.concatenate(hi), disc_pairs


def _ruiz_equilibrate(P, q, M, passes=10):
    """Symmetric Ruiz scaling of [[P, M'], [M, 0]]; returns D, E, c scales."""
    n = P.shape[0]
    m = M.shape[0]
    d = np.ones(n)
    e = np.ones(m)
    Pw = P.copy()
    Mw = M.copy()
    qw = q.copy()
    for _ in range(passes):
        cols = np.sqrt(np.maximum(
            np.maximum(np.abs(Pw).max(axis=0).toarray().ravel() if Pw.nnz else np.zeros(n),
                       np.abs(Mw).max(axis=0).toarray().ravel() if Mw.nnz else np.zeros(n)),
            1e-12))
        rows = np.sqrt(np.maximum(
            np.abs(Mw).max(axis=1).toarray().ravel() if Mw.nnz else np.zeros(m), 1e-12))
        cols[cols < 1e-6] = 1.0
        rows[rows < 1e-6] = 1.0
        Dc = sp.diags(1.0 / cols)
        Er = sp.diags(1.0 / rows)
        Pw = (Dc @ Pw @ Dc).tocsc()
        Mw = (Er @ Mw @ Dc).tocsc()
        qw = qw / cols
        d /= cols
        e /= rows
    # one cost scaling pass keeps gradients near unit magnitude
    gmax = max(float(np.abs(Pw).max()) if Pw.nnz else 0.0,
               float(np.abs(qw).max()) if len(qw) else 0.0)
    c = 1.0 / gmax if gmax > 1.0 else 1.0
    Pw = (Pw * c).tocsc()
    qw = qw * c
    return Pw, qw, Mw, d, e, c


class QpSolver:
    """Reusable factorized solver; rebuild only when matrices change.

    ``update_vectors`` swaps b/h/box values in place so repeated solves of
    the same sparsity (one per macro-iteration) skip refactorization.
    """

    def __init__(self, problem: QpProblem, settings: SolverSettings | None = None):
        self.problem = problem
        self.settings = settings or SolverSettings()
        problem.validate()
        n = problem.n
        H = problem.H if problem.H is not None else sp.csc_matrix((n, n))
        self._P = sp.csc_matrix(H)
        self._q = np.asarray(problem.f, float).copy()
        M, lo, hi, discs = _stack_constraints(problem)
        self._M = M
        self._lo = lo
        self._hi = hi
        self._discs = discs
        (self._Ps, self._qs, self._Ms,
         self._d, self._e, self._c) = _ruiz_equilibrate(self._P, self._q, M)
        rho = self.settings.rho
        sigma = self.settings.sigma
        n_eq = problem.A.shape[0] if problem.A is not None else 0
        self._eq_boost = np.ones(M.shape[0])
        self._eq_boost[:n_eq] = 1e3     # stiffer penalty on equality rows
        self._rho = rho
        self._factor(rho)
        self._x = np.zeros(n)
        self._z = np.zeros(M.shape[0])
        self._y = np.zeros(M.shape[0])

    def _factor(self, rho: float):
        n = self.problem.n
        self._rho = rho
        self._rho_vec = rho * self._eq_boost
        K = (self._Ps + self.settings.sigma * sp.eye(n, format="csc")
             + self._Ms.T @ sp.diags(self._rho_vec) @ self._Ms).tocsc()
        self._solve_kkt = spla.factorized(K)

    def update_vectors(self, b=None, h=None, lb=None, ub=None):
        p = self.problem
        n_eq = p.A.shape[0] if p.A is not None else 0
        n_in = p.G.shape[0] if p.G is not None else 0
        if b is not None:
            self._lo[:n_eq] = b
            self._hi[:n_eq] = b
            p.b = np.asarray(b, float)
        if h is not None:
            self._hi[n_eq:n_eq + n_in] = h
            p.h = np.asarray(h, float)
        if lb is not None or ub is not None:
            lbv = p.lb if lb is None else np.asarray(lb, float)
            ubv = p.ub if ub is None else np.asarray(ub, float)
            p.lb, p.ub = lbv, ubv
            box_rows = np.where(np.isfinite(lbv) | np.isfinite(ubv))[0]
            self._lo[n_eq + n_in:n_eq + n_in + len(box_rows)] = lbv[box_rows]
            self._hi[n_eq + n_in:n_eq + n_in + len(box_rows)] = ubv[box_rows]

    def _project(self, w: np.ndarray) -> np.ndarray:
        elo = self._lo * self._e
        ehi = self._hi * self._e
        z = np.clip(w, elo, ehi)
        for rp, rq, radius in self._discs:
            # disc lives in unscaled coordinates
            pv = w[rp] / self._e[rp]
            qv = w[rq] / self._e[rq]
            pv, qv = project_disc(pv, qv, radius)
            z[rp] = pv * self._e[rp]
            z[rq] = qv * self._e[rq]
        return z

    def solve(self, x0: np.ndarray | None = None,
              trace: list | None = None) -> SolverResult:
        """Run the splitting iteration; ``trace`` (optional list) collects
        (iteration, primal residual, dual residual) at check intervals."""
        st = self.settings
        n = self.problem.n
        sigma = st.sigma
        M, P, q = self._Ms, self._Ps, self._qs
        x = self._x if x0 is None else np.asarray(x0, float) / self._d
        z = self._z
        y = self._y
        alpha = 1.6

        status = "max-iter"
        it = 0
        rp = rd = np.inf
        refactors = 0
        y_prev_check = y.copy()
        for it in range(1, st.max_iter + 1):
            rho_vec = self._rho_vec
            rhs = sigma * x - q + M.T @ (rho_vec * z - y)
            xt = self._solve_kkt(rhs)
            zt = M @ xt
            x = alpha * xt + (1 - alpha) * x
            z_prev = z
            w = alpha * zt + (1 - alpha) * z_prev
            z = self._project(w + y / rho_vec)
            y = y + rho_vec * (w - z)

            if it % st.check_every == 0 or it == st.max_iter:
                # residuals in unscaled coordinates
                xs = self._d * x
                zs = z / self._e
                ys = (self._e * y) / self._c
                Mxs = self._M @ xs
                rp = float(np.max(np.abs(Mxs - zs))) if len(zs) else 0.0
                grad = self._P @ xs + self._q + self._M.T @ ys
                rd = float(np.max(np.abs(grad))) if n else 0.0
                p_norm = max(np.max(np.abs(Mxs)) if len(zs) else 0.0,
                             np.max(np.abs(zs)) if len(zs) else 0.0)
                d_norm = max(np.max(np.abs(self._P @ xs)) if n else 0.0,
                             np.max(np.abs(self._M.T @ ys)) if len(zs) else 0.0,
                             np.max(np.abs(self._q)) if n else 0.0)
                if trace is not None:
                    trace.append((it, rp, rd))
                if rp <= st.eps_abs + st.eps_rel * p_norm and \
                        rd <= st.eps_abs + st.eps_rel * d_norm:
                    status = "optimal"
                    break
                # diverging iterates with a decreasing objective: unbounded
                if np.max(np.abs(xs)) > 1e9:
                    status = "unbounded"
                    break
                # primal infeasibility certificate: y drifts along a
                # direction in the nullspace of M' with negative support
                dy = y - y_prev_check
                y_prev_check = y.copy()
                dy_norm = float(np.max(np.abs(dy), initial=0.0))
                if dy_norm > 1e-10:
                    dyu = (self._e * dy) / self._c
                    scale_y = float(np.max(np.abs(dyu)))
                    mty = float(np.max(np.abs(self._M.T @ dyu)))
                    open_up = np.any((dyu > 1e-8 * scale_y) & ~np.isfinite(self._hi))
                    open_dn = np.any((dyu < -1e-8 * scale_y) & ~np.isfinite(self._lo))
                    support = float(
                        np.sum(np.where(np.isfinite(self._hi), self._hi, 0.0)
                               * np.maximum(dyu, 0.0))
                        + np.sum(np.where(np.isfinite(self._lo), self._lo, 0.0)
                                 * np.minimum(dyu, 0.0)))
                    if (not open_up and not open_dn and mty <= 1e-8 * scale_y
                            and support < -1e-8 * scale_y):
                        status = "primal-infeasible"
                        break
                if (st.adaptive_rho and refactors < st.max_refactor
                        and it % (st.check_every * 8) == 0):
                    ratio = np.sqrt((rp / max(p_norm, 1e-12))
                                    / max(rd / max(d_norm, 1e-12), 1e-12))
                    new_rho = float(np.clip(self._rho * ratio, 1e-6, 1e6))
                    if new_rho > 5 * self._rho or new_rho < self._rho / 5:
                        self._factor(new_rho)
                        refactors += 1
                # mid-run rescue: a certified polish of the current iterate
                # ends a stall without waiting out the full budget
                if st.polish and not self._discs and it % (st.check_every * 40) == 0:
                    for ts in (1.0, 10.0, 100.0):
                        xp, yp = self._polish(xs, ys, ts)
                        if xp is not None and self._kkt_certified(xp, yp):
                            self._x, self._z, self._y = x, z, y
                            obj = float(0.5 * xp @ (self._P @ xp) + self._q @ xp)
                            rpp, rdp = self._residuals(xp, yp)
                            return SolverResult(status="optimal", x=xp, y=yp,
                                                objective=obj, iterations=it,
                                                primal_residual=rpp,
                                                dual_residual=rdp)

        self._x, self._z, self._y = x, z, y
        xs = self._d * x
        ys = (self._e * y) / self._c
        if st.polish and not self._discs and status in ("optimal", "max-iter"):
            for tol_scale in (1.0, 10.0, 100.0, 1000.0):
                xs2, ys2 = self._polish(xs, ys, tol_scale)
                if xs2 is None:
                    continue
                if status == "optimal":
                    xs, ys = xs2, ys2
                    break
                if self._kkt_certified(xs2, ys2):
                    status = "optimal"
                    rp, rd = self._residuals(xs2, ys2)
                    xs, ys = xs2, ys2
                    break
        obj = float(0.5 * xs @ (self._P @ xs) + self._q @ xs)
        return SolverResult(status=status, x=xs, y=ys, objective=obj,
                            iterations=it, primal_residual=rp, dual_residual=rd)

    def _residuals(self, xs, ys):
        Mxs = self._M @ xs
        over = np.where(np.isfinite(self._hi), Mxs - self._hi, -np.inf)
        under = np.where(np.isfinite(self._lo), self._lo - Mxs, -np.inf)
        rp = max(float(np.max(over, initial=0.0)), float(np.max(under, initial=0.0)))
        grad = self._P @ xs + self._q + self._M.T @ ys
        rd = float(np.max(np.abs(grad))) if len(grad) else 0.0
        return rp, rd

    def _kkt_certified(self, xs, ys) -> bool:
        """Exact KKT check for a polished candidate (feasibility,
        stationarity, multiplier signs, complementary slackness)."""
        st = self.settings
        rp, rd = self._residuals(xs, ys)
        scale = 1.0 + float(np.max(np.abs(xs), initial=0.0))
        if rp > 10 * st.eps_abs * scale or rd > 100 * st.eps_abs * scale:
            return False
        Mxs = self._M @ xs
        n_eq = self.problem.A.shape[0] if self.problem.A is not None else 0
        tol = 100 * st.eps_abs * scale
        for i in range(n_eq, self._M.shape[0]):
            if self._lo[i] == self._hi[i]:
                continue
            yi = ys[i]
            if yi > tol:      # pushes at the upper bound
                if not np.isfinite(self._hi[i]) or Mxs[i] < self._hi[i] - tol:
                    return False
            elif yi < -tol:   # pushes at the lower bound
                if not np.isfinite(self._lo[i]) or Mxs[i] > self._lo[i] + tol:
                    return False
        return True

    def _polish(self, xs, ys, tol_scale=1.0):
        """Re-solve the KKT system on the detected active set."""
        p = self.problem
        n = p.n
        act_rows = []
        act_vals = []
        n_eq = p.A.shape[0] if p.A is not None else 0
        Mx = self._M @ xs
        scale = 1.0 + (np.max(np.abs(Mx)) if len(Mx) else 0.0)
        tol = max(1e-5, 50.0 * self.settings.eps_abs) * scale * tol_scale
        y_tol = 1e-6 * (1.0 + np.max(np.abs(ys), initial=0.0))
        for i in range(self._M.shape[0]):
            if i < n_eq or self._lo[i] == self._hi[i]:
                act_rows.append(i)
                act_vals.append(self._lo[i])
            elif np.isfinite(self._hi[i]) and (Mx[i] >= self._hi[i] - tol
                                               or ys[i] > y_tol):
                act_rows.append(i)
                act_vals.append(self._hi[i])
            elif np.isfinite(self._lo[i]) and (Mx[i] <= self._lo[i] + tol
                                               or ys[i] < -y_tol):
                act_rows.append(i)
                act_vals.append(self._lo[i])

        def viol(v):
            Mv = self._M @ v
            lo_v = np.where(np.isfinite(self._lo), self._lo - Mv, -np.inf)
            hi_v = np.where(np.isfinite(self._hi), Mv - self._hi, -np.inf)
            return max(float(np.max(lo_v, initial=0.0)), float(np.max(hi_v, initial=0.0)))

        def obj(v):
            return float(0.5 * v @ (self._P @ v) + self._q @ v)

        if act_rows:
            Aact = self._M[act_rows]
            KKT = sp.bmat([[self._P + 1e-10 * sp.eye(n), Aact.T],
                           [Aact, -1e-10 * sp.eye(len(act_rows))]], format="csc")
            rhs = np.concatenate([-self._q, act_vals])
        else:
            if self._P.nnz == 0:
                return None, None
            KKT = (self._P + 1e-12 * sp.eye(n, format="csc"))
            rhs = -self._q
        try:
            sol = spla.spsolve(KKT, rhs)
        except Exception:
            return None, None
        sol = np.atleast_1d(sol)
        if not np.all(np.isfinite(sol)):
            return None, None
        xs2 = sol[:n]
        # accept only (near-)exactly feasible polished points; a violated
        # inactive row means the active-set guess was wrong
        v_in = viol(xs)
        ok = viol(xs2) <= 1e-8 * scale
        if ok and v_in <= 100 * self.settings.eps_abs:
            ok = obj(xs2) <= obj(xs) + v_in * scale + 1e-7 * (1 + abs(obj(xs)))
        if ok:
            # complementary slackness: only active rows carry multipliers
            ys2 = np.zeros_like(ys)
            if act_rows:
                ys2[act_rows] = sol[n:]
            return xs2, ys2
        return None, None


def write_solver_trace(path, trace) -> None:
    """Dump a residual trace collected by ``QpSolver.solve`` as CSV."""
    import csv
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "primal_residual", "dual_residual"])
        for it, rp, rd in trace:
            w.writerow([it, f"{rp:.6e}", f"{rd:.6e}"])


def solve_qp(problem: QpProblem, settings: SolverSettings | None = None,
             x0: np.ndarray | None = None,
             trace: list | None = None) -> SolverResult:
    return QpSolver(problem, settings).solve(x0=x0, trace=trace)


def solve_lp(f, A=None, b=None, G=None, h=None, lb=None, ub=None,
             settings: SolverSettings | None = None) -> SolverResult:
    """LP via the epsilon-regularized QP; objective reported as c.x."""
    settings = settings or SolverSettings()
    n = len(f)
    H = settings.lp_regularization * sp.eye(n, format="csc")
    prob = QpProblem(H=H, f=np.asarray(f, float),
                     A=None if A is None else sp.csc_matrix(A),
                     b=b, G=None if G is None else sp.csc_matrix(G),
                     h=h, lb=lb, ub=ub)
    res = solve_qp(prob, settings)
    res.objective = float(np.asarray(f) @ res.x)
    # a solution at the regularization scale means the LP itself had an
    # unbounded descent direction
    if res.status == "optimal" and len(res.x) and \
            float(np.max(np.abs(res.x))) >= 0.1 / settings.lp_regularization:
        res.status = "unbounded"
    return res
