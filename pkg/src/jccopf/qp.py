"""Convex quadratic programming.

Problems have the form

    minimize    1/2 x'Px + q'x
    subject to  A_eq x  = b_eq
                A_ineq x <= b_ineq        (rows carry stable ids)
                lb <= x <= ub

and are solved with a Mehrotra predictor-corrector primal-dual interior
point method, followed by an active-set polish that re-solves the KKT system
on the identified active set. Infeasibility is certified by an elastic
phase-one problem. :func:`lazy_solve` adds inequality rows on demand.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg
import scipy.sparse as sp

__all__ = ["QPProblem", "QPSolution", "QPError", "MatrixPool", "solve", "lazy_solve", "dump_triplets"]

log = logging.getLogger(__name__)

OPTIMAL = "optimal"
INFEASIBLE = "primal-infeasible"
ITERATION_LIMIT = "iteration-limit"


class QPError(RuntimeError):
    pass


def _as2d(a, ncol):
    if a is None:
        return np.zeros((0, ncol))
    if sp.issparse(a):
        return a.tocsr()
    a = np.asarray(a, dtype=float)
    return a.reshape(-1, ncol)


@dataclass
class QPProblem:
    P: np.ndarray
    q: np.ndarray
    A_eq: np.ndarray | sp.spmatrix | None = None
    b_eq: np.ndarray | None = None
    A_ineq: np.ndarray | sp.spmatrix | None = None
    b_ineq: np.ndarray | None = None
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None
    ineq_ids: np.ndarray | None = None

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float).reshape(-1)
        n = len(self.q)
        P = self.P.toarray() if sp.issparse(self.P) else np.asarray(self.P, dtype=float)
        P = np.zeros((n, n)) if P.size == 0 else P.reshape(n, n)
        self.P = 0.5 * (P + P.T)
        self.A_eq = _as2d(self.A_eq, n)
        self.b_eq = np.zeros(0) if self.b_eq is None else np.asarray(self.b_eq, dtype=float).reshape(-1)
        self.A_ineq = _as2d(self.A_ineq, n)
        self.b_ineq = np.zeros(0) if self.b_ineq is None else np.asarray(self.b_ineq, dtype=float).reshape(-1)
        self.lb = np.full(n, -np.inf) if self.lb is None else np.asarray(self.lb, dtype=float).reshape(-1).copy()
        self.ub = np.full(n, np.inf) if self.ub is None else np.asarray(self.ub, dtype=float).reshape(-1).copy()
        if self.ineq_ids is None:
            self.ineq_ids = np.arange(self.A_ineq.shape[0])
        self.ineq_ids = np.asarray(self.ineq_ids)
        if self.A_eq.shape[0] != len(self.b_eq):
            raise ValueError("A_eq and b_eq disagree in row count")
        if self.A_ineq.shape[0] != len(self.b_ineq) or len(self.ineq_ids) != len(self.b_ineq):
            raise ValueError("A_ineq, b_ineq and ineq_ids disagree in row count")
        if self.lb.shape != (n,) or self.ub.shape != (n,):
            raise ValueError("bounds must have one entry per variable")
        if np.any(self.lb > self.ub):
            raise ValueError("lb > ub")

    @property
    def n(self) -> int:
        return len(self.q)

    def objective(self, x) -> float:
        return float(0.5 * x @ self.P @ x + self.q @ x)

    def rows(self, idx) -> "QPProblem":
        """Same problem keeping only the inequality rows at positions ``idx``."""
        idx = np.asarray(idx, dtype=int)
        return replace(self, A_ineq=self.A_ineq[idx], b_ineq=self.b_ineq[idx], ineq_ids=self.ineq_ids[idx])

    def check_psd(self, tol: float = 1e-9) -> bool:
        if self.n == 0:
            return True
        shift = tol * max(1.0, np.abs(self.P).max())
        try:
            np.linalg.cholesky(self.P + shift * np.eye(self.n))
            return True
        except np.linalg.LinAlgError:
            return False


@dataclass
class QPSolution:
    x: np.ndarray
    y_eq: np.ndarray
    z_ineq: np.ndarray
    z_lb: np.ndarray
    z_ub: np.ndarray
    status: str
    objective: float
    iterations: int = 0
    residuals: dict = field(default_factory=dict)
    ineq_ids: np.ndarray | None = None

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


def _gram(G, w):
    """G' diag(w) G as a dense array."""
    if sp.issparse(G):
        return (G.T @ sp.diags(w) @ G).toarray()
    return (G.T * w) @ G


def _stack_rows(prob: QPProblem):
    """Inequality rows plus finite bounds as one ``G x <= h`` block."""
    n = prob.n
    iu = np.flatnonzero(np.isfinite(prob.ub))
    il = np.flatnonzero(np.isfinite(prob.lb))
    Eu = sp.csr_matrix((np.ones(len(iu)), (np.arange(len(iu)), iu)), shape=(len(iu), n))
    El = sp.csr_matrix((-np.ones(len(il)), (np.arange(len(il)), il)), shape=(len(il), n))
    A = prob.A_ineq
    if sp.issparse(A) or A.shape[0] * n > 200_000:
        G = sp.vstack([sp.csr_matrix(A), Eu, El]).tocsr()
    else:
        G = np.vstack([A, Eu.toarray(), El.toarray()])
    h = np.concatenate([prob.b_ineq, prob.ub[iu], -prob.lb[il]])
    return G, h, iu, il


class _KKT:
    """Factorization of [[H, A'], [A, 0]] via Cholesky of H and the Schur complement."""

    def __init__(self, H, A, reg, scale=None):
        n = H.shape[0]
        self.A = A
        self.p = A.shape[0]
        if scale is None:
            scale = max(1.0, np.abs(H).max()) if n else 1.0
        self.cho = None
        hmax = max(scale, float(np.abs(np.diag(H)).max(initial=0.0)))
        for shift in (reg * scale, 1e-8 * scale, 1e-6 * scale, 1e-12 * hmax, 1e-9 * hmax):
            try:
                self.cho = scipy.linalg.cho_factor(H + shift * np.eye(n), lower=True, check_finite=False)
                break
            except (np.linalg.LinAlgError, ValueError):
                continue
        if self.cho is None:
            raise np.linalg.LinAlgError("KKT matrix is not positive definite")
        self.H = H
        if self.p:
            HiA = scipy.linalg.cho_solve(self.cho, A.T, check_finite=False)
            S = A @ HiA
            S = 0.5 * (S + S.T)
            sreg = 1e-13 * max(1.0, np.abs(S).max())
            self.S = scipy.linalg.lu_factor(S + sreg * np.eye(self.p), check_finite=False)
            self.HiA = HiA

    def _solve_once(self, r1, r2):
        u = scipy.linalg.cho_solve(self.cho, r1, check_finite=False)
        if not self.p:
            return u, np.zeros(0)
        dy = scipy.linalg.lu_solve(self.S, self.A @ u - r2, check_finite=False)
        return u - self.HiA @ dy, dy

    def solve(self, r1, r2, refine=3):
        dx, dy = self._solve_once(r1, r2)
        for _ in range(refine):
            e1 = r1 - self.H @ dx - (self.A.T @ dy if self.p else 0.0)
            e2 = r2 - (self.A @ dx if self.p else np.zeros(0))
            cx, cy = self._solve_once(e1, e2)
            dx, dy = dx + cx, dy + cy
        return dx, dy


def _step_len(v, dv):
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return min(1.0, float(np.min(-v[neg] / dv[neg])))


def _ipm(P, q, A, b, G, h, x0=None, z0=None, tol=1e-9, maxiter=100):
    """Mehrotra predictor-corrector. Returns ``(x, y, z, s, iterations, converged)``."""
    n, p, m = len(q), A.shape[0], G.shape[0]
    qn = 1.0 + np.abs(q).max(initial=0.0)
    bn = 1.0 + np.abs(b).max(initial=0.0)
    hn = 1.0 + np.abs(h).max(initial=0.0)

    if x0 is None:
        kkt = _KKT(P + _gram(G, np.ones(m)), A, 1e-10)
        x, y = kkt.solve(-q + G.T @ h, b)
        s = h - G @ x
        z = s.copy()
        z = -z
        a_s = -s.min(initial=1.0)
        s = s + (1.0 + a_s) if a_s >= 0 else s
        a_z = -z.min(initial=1.0)
        z = z + (1.0 + a_z) if a_z >= 0 else z
    else:
        x = np.asarray(x0, dtype=float).copy()
        y = np.zeros(p)
        s = np.maximum(h - G @ x, 1e-2)
        z = np.ones(m) if z0 is None else np.maximum(np.asarray(z0, dtype=float), 1e-2)

    pscale = max(1.0, np.abs(P).max()) if n else 1.0
    converged = False
    best = None
    stall = 0
    it = 0
    for it in range(1, maxiter + 1):
        rd = P @ x + q + (A.T @ y if p else 0.0) + G.T @ z
        rp = A @ x - b if p else np.zeros(0)
        ri = G @ x + s - h
        mu = s @ z / m if m else 0.0
        merit = max(np.abs(rd).max(initial=0.0) / qn, np.abs(rp).max(initial=0.0) / bn,
                    np.abs(ri).max(initial=0.0) / hn, mu)
        if best is None or merit < best[0]:
            best = (merit, x.copy(), y.copy(), z.copy(), s.copy())
            stall = 0
        else:
            stall += 1
        if merit <= tol:
            converged = True
            break
        if stall >= 8 or not np.isfinite(merit):
            break
        if m == 0:
            kkt = _KKT(P, A, 1e-12, pscale)
            dx, dy = kkt.solve(-rd, -rp)
            x, y = x + dx, y + dy
            continue
        w = z / s
        kkt = _KKT(P + _gram(G, w), A, 1e-13, pscale)

        def direction(rc):
            r1 = -rd - G.T @ ((z * ri - rc) / s)
            dx, dy = kkt.solve(r1, -rp)
            ds = -ri - G @ dx
            dz = (-rc - z * ds) / s
            return dx, dy, ds, dz

        # predictor
        rc = s * z
        dx, dy, ds, dz = direction(rc)
        ap = _step_len(s, ds)
        ad = _step_len(z, dz)
        mu_aff = (s + ap * ds) @ (z + ad * dz) / m
        sigma = min(1.0, (mu_aff / mu) ** 3) if mu > 0 else 0.0
        # corrector
        rc = s * z + ds * dz - sigma * mu
        dx, dy, ds, dz = direction(rc)
        step = min(1.0, 0.99 * _step_len(s, ds), 0.99 * _step_len(z, dz))
        x = x + step * dx
        s = s + step * ds
        y = y + step * dy
        z = z + step * dz
    if not converged and best is not None:
        _, x, y, z, s = best
    return x, y, z, s, it, converged


def _residuals(prob, G, h, x, y, z):
    rd = prob.P @ x + prob.q + (prob.A_eq.T @ y if len(y) else 0.0) + G.T @ z
    rp = np.abs(prob.A_eq @ x - prob.b_eq).max(initial=0.0) if len(prob.b_eq) else 0.0
    slack = h - G @ x
    viol = max(0.0, -slack.min(initial=0.0))
    comp = np.abs(z * slack).max(initial=0.0)
    dual_inf = max(0.0, -z.min(initial=0.0))
    pobj = prob.objective(x)
    dobj = -0.5 * x @ prob.P @ x - prob.b_eq @ y - h @ z
    return {
        "stationarity": float(np.abs(rd).max(initial=0.0)),
        "primal": float(max(rp, viol)),
        "complementarity": float(comp),
        "dual_infeasibility": float(dual_inf),
        "duality_gap": float(pobj - dobj),
    }


def _scaled_ok(res, prob, h, tol):
    qn = 1.0 + np.abs(prob.q).max(initial=0.0)
    hn = 1.0 + max(np.abs(h).max(initial=0.0), np.abs(prob.b_eq).max(initial=0.0))
    return (res["stationarity"] <= tol * qn and res["primal"] <= tol * hn
            and res["complementarity"] <= tol * qn and res["dual_infeasibility"] <= tol * qn)


def _polish(prob, G, h, x, z, s):
    """Solve the equality-constrained KKT system on the apparent active set."""
    active = z > s
    Ga = G[active] if not sp.issparse(G) else G[np.flatnonzero(active)].toarray()
    ha = h[active]
    A, b = prob.A_eq, prob.b_eq
    C = np.vstack([A, Ga]) if Ga.shape[0] else A
    d = np.concatenate([b, ha])
    n, k = prob.n, C.shape[0]
    K = np.zeros((n + k, n + k))
    K[:n, :n] = prob.P
    K[:n, n:] = C.T
    K[n:, :n] = C
    rhs = np.concatenate([-prob.q, d])
    reg = 1e-12 * max(1.0, np.abs(K).max())
    Kr = K.copy()
    Kr[:n, :n] += reg * np.eye(n)
    Kr[n:, n:] -= reg * np.eye(k)
    # start from the interior point iterate so directions the active set leaves
    # undetermined (zero-cost free variables) keep their interior values
    sol = np.concatenate([x, np.zeros(k)])
    try:
        sol = sol + scipy.linalg.solve(Kr, rhs - K @ sol, check_finite=False)
    except (np.linalg.LinAlgError, ValueError):
        return None
    for _ in range(3):
        sol = sol + scipy.linalg.solve(Kr, rhs - K @ sol, check_finite=False)
    xp = sol[:n]
    y = sol[n:n + len(b)]
    za = sol[n + len(b):]
    zp = np.zeros(len(h))
    zp[active] = za
    return xp, y, zp


def _phase_one(prob, G, h, tol, maxiter):
    """Minimum total constraint violation; returns that minimum."""
    n, p, m = prob.n, len(prob.b_eq), len(h)
    # variables: x, t_eq+ (p), t_eq- (p), t_in (m)
    nv = n + 2 * p + m
    A = np.hstack([np.asarray(prob.A_eq.toarray() if sp.issparse(prob.A_eq) else prob.A_eq),
                   np.eye(p), -np.eye(p), np.zeros((p, m))]) if p else np.zeros((0, nv))
    Gd = G.toarray() if sp.issparse(G) else G
    G1 = np.vstack([
        np.hstack([Gd, np.zeros((m, 2 * p)), -np.eye(m)]),
        np.hstack([np.zeros((2 * p + m, n)), -np.eye(2 * p + m)]),
    ])
    h1 = np.concatenate([h, np.zeros(2 * p + m)])
    c = np.concatenate([np.zeros(n), np.ones(2 * p + m)])
    P1 = np.zeros((nv, nv))
    P1[:n, :n] = 1e-10 * np.eye(n)  # keeps the x block bounded
    x, *_ = _ipm(P1, c, A, prob.b_eq, G1, h1, tol=tol, maxiter=maxiter)
    return float(c @ x)


def solve(problem: QPProblem, warm: QPSolution | None = None, tol: float = 1e-8,
          maxiter: int = 100, polish: bool = True) -> QPSolution:
    """Solve a convex QP; see the module docstring for the problem form.

    ``warm`` seeds the primal iterate and inequality multipliers (matched by
    row id). Warm starting changes the iteration count, not the optimum.
    """
    prob = problem
    G, h, iu, il = _stack_rows(prob)
    x0 = z0 = None
    if warm is not None and len(warm.x) == prob.n:
        x0 = warm.x
        z0 = np.ones(len(h))
        if warm.ineq_ids is not None and len(warm.z_ineq):
            pos = {k: i for i, k in enumerate(warm.ineq_ids.tolist())}
            for r, k in enumerate(prob.ineq_ids.tolist()):
                if k in pos:
                    z0[r] = max(warm.z_ineq[pos[k]], 1e-2)
    A = prob.A_eq.toarray() if sp.issparse(prob.A_eq) else prob.A_eq
    try:
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            x, y, z, s, it, conv = _ipm(prob.P, prob.q, A, prob.b_eq, G, h, x0, z0,
                                        tol=min(tol, 1e-9), maxiter=maxiter)
    except np.linalg.LinAlgError as exc:
        raise QPError(f"linear algebra failure in interior point iterations: {exc}") from exc

    res = _residuals(prob, G, h, x, y, z)
    if polish and np.all(np.isfinite(x)):
        out = _polish(prob, G, h, x, z, s)
        if out is not None:
            xp, yp, zp = out
            rp = _residuals(prob, G, h, xp, yp, zp)
            better = _scaled_ok(rp, prob, h, tol) and (
                not _scaled_ok(res, prob, h, tol)
                or max(rp["stationarity"], rp["primal"], rp["complementarity"])
                <= max(res["stationarity"], res["primal"], res["complementarity"]))
            if better:
                x, y, z, res = xp, yp, zp, rp
                conv = True
    if _scaled_ok(res, prob, h, tol):
        status = OPTIMAL
    elif conv:
        status = OPTIMAL if _scaled_ok(res, prob, h, 10 * tol) else ITERATION_LIMIT
    else:
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            viol = _phase_one(prob, G, h, 1e-9, maxiter)
        hn = 1.0 + max(np.abs(h).max(initial=0.0), np.abs(prob.b_eq).max(initial=0.0))
        status = INFEASIBLE if viol > 1e-6 * hn else ITERATION_LIMIT
    r = len(prob.b_ineq)
    z_in = z[:r]
    z_ub = np.zeros(prob.n)
    z_ub[iu] = z[r:r + len(iu)]
    z_lb = np.zeros(prob.n)
    z_lb[il] = z[r + len(iu):]
    return QPSolution(x=x, y_eq=y, z_ineq=z_in, z_lb=z_lb, z_ub=z_ub, status=status,
                      objective=prob.objective(x), iterations=it, residuals=res,
                      ineq_ids=prob.ineq_ids.copy())


class MatrixPool:
    """Inequality pool stored as an explicit matrix."""

    def __init__(self, A, b, ids=None):
        self.A = A
        self.b = np.asarray(b, dtype=float)
        self.ids = np.arange(len(self.b)) if ids is None else np.asarray(ids)

    def __len__(self):
        return len(self.b)

    def rows(self, idx):
        return self.A[idx], self.b[idx]

    def values(self, x):
        return self.A @ x - self.b


def lazy_solve(problem: QPProblem, active_ids, threshold: float, *, pool=None, select=None,
               tol: float = 1e-8, feas_tol: float = 1e-7, warm: QPSolution | None = None,
               max_rounds: int | None = None):
    """Solve with a growing subset of an inequality pool.

    The pool defaults to the inequality rows of ``problem``; any object with
    ``ids``, ``rows(idx) -> (A, b)``, ``values(x) -> A x - b`` and ``len()``
    may be passed instead, so large pools never need to be stored. Other
    inequality rows of ``problem`` are then always kept.

    Rows whose value exceeds ``-threshold`` at the current solution are
    activated until no new row qualifies. ``select(x, active)`` may replace
    that rule; it receives the boolean activity mask and returns positions of
    rows to add. Returns ``(solution, active_ids)``; the solution's
    ``z_ineq`` spans the whole pool, with zeros for rows never activated.
    """
    if pool is None:
        pool = MatrixPool(problem.A_ineq, problem.b_ineq, problem.ineq_ids)
        fixed = problem.rows(np.zeros(0, dtype=int))
    else:
        fixed = problem
    nfix = len(fixed.b_ineq)
    ids = np.asarray(pool.ids)
    pos = {k: i for i, k in enumerate(ids.tolist())}
    active = np.zeros(len(pool), dtype=bool)
    for k in active_ids:
        if k in pos:
            active[pos[k]] = True
    rounds = 0
    limit = len(pool) + 1 if max_rounds is None else max_rounds
    sol = warm
    while True:
        rounds += 1
        idx = np.flatnonzero(active)
        A, b = pool.rows(idx)
        if sp.issparse(fixed.A_ineq) or sp.issparse(A):
            A_all = sp.vstack([sp.csr_matrix(fixed.A_ineq), sp.csr_matrix(A)]).tocsr()
        else:
            A_all = np.vstack([fixed.A_ineq, np.asarray(A).reshape(-1, problem.n)])
        sub = replace(fixed, A_ineq=A_all, b_ineq=np.concatenate([fixed.b_ineq, b]),
                      ineq_ids=np.concatenate([fixed.ineq_ids, ids[idx]]))
        sol = solve(sub, warm=sol, tol=tol)
        if sol.status == INFEASIBLE:
            break
        if select is None:
            vals = pool.values(sol.x)
            new = np.flatnonzero(~active & (vals > -threshold))
        else:
            new = np.asarray(select(sol.x, active), dtype=int)
            new = new[~active[new]] if len(new) else new
        if len(new) == 0 or rounds >= limit:
            break
        active[new] = True
    z_full = np.zeros(len(pool))
    z_full[np.flatnonzero(active)] = sol.z_ineq[nfix:]
    sol.z_ineq = np.concatenate([sol.z_ineq[:nfix], z_full])
    sol.ineq_ids = np.concatenate([fixed.ineq_ids, ids])
    if sol.status == OPTIMAL and len(pool):
        worst = float(pool.values(sol.x).max())
        sol.residuals["pool_violation"] = max(worst, 0.0)
        if worst > feas_tol * (1.0 + np.abs(sol.x).max()):
            raise QPError(f"lazy solve ended with pool violation {worst:.3g}")
    sol.residuals["rounds"] = rounds
    return sol, set(ids[active].tolist())


def dump_triplets(problem: QPProblem) -> str:
    """Plain-text sparse triplet dump (one ``name i j value`` per line)."""
    lines = [f"n {problem.n}"]

    def emit(name, M):
        M = sp.coo_matrix(M)
        lines.append(f"{name} {M.shape[0]} {M.shape[1]} {M.nnz}")
        lines.extend(f"{i} {j} {v!r}" for i, j, v in zip(M.row, M.col, M.data))

    def vec(name, v):
        lines.append(f"{name} {len(v)}")
        lines.extend(repr(float(x)) for x in v)

    emit("P", problem.P)
    vec("q", problem.q)
    emit("A_eq", problem.A_eq)
    vec("b_eq", problem.b_eq)
    emit("A_ineq", problem.A_ineq)
    vec("b_ineq", problem.b_ineq)
    vec("lb", problem.lb)
    vec("ub", problem.ub)
    return "\n".join(lines) + "\n"
