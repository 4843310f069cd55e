"""Trust-region sequential l1-penalty QP solver for the smoothed joint chance constraint.

The problem solved is

    minimize    cost(g) + 1/2 V(Omega) beta'M beta
    subject to  sum(g) = sum(d),  sum(beta) = 1,  Q_eps(C^N(g, beta)) <= t

where ``C^N`` is the vector of per-scenario constraint maxima. Each
iteration minimizes a piecewise-quadratic model of the penalty function

    phi(g, beta) = expected cost + pi * |V(g, beta)|_1

inside an infinity-norm trust region; the model is written as a convex QP
with elastic slacks ``u, v, w`` and per-scenario epigraph variables ``z``.

Generators with ``pmin == pmax`` are fixed at that output with zero
participation: any nonzero participation would violate one of their two
limits in every scenario with ``Omega != 0``. Their rows are identically
zero and are left out of the smooth quantile.

The objective is divided by ``cost_scale`` (by default an upper bound on the
marginal generation cost) so that the penalty weight is dimensionless.
Reported objective values are in $/h.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from . import qp
from .cons import ConstraintSystem, DispatchPoint
from .netcase import GridCase
from .squantile import DegenerateQuantileError, QuantileEval, psd_project, quantile_derivatives, solve_quantile

__all__ = [
    "PenaltyConfig",
    "IterateState",
    "SolveReport",
    "ChanceProblem",
    "expected_cost",
    "penalty",
    "build_hessian",
    "assemble_qp",
    "stationarity",
    "solve",
    "write_trace",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PenaltyConfig:
    pi: float = 10.0
    delta_max: float = 1e6
    delta0: float = 1.0
    eta: float = 1e-8
    tau1: float = 0.5
    tau2: float = 2.0
    kappa1: float = 1e-6
    kappa2: float = 0.1
    max_iter: int = 500
    min_radius: float = 1e-12
    lazy: bool = True
    cost_scale: float | None = None

    def __post_init__(self):
        if not 0 < self.eta < 1:
            raise ValueError("eta must lie in (0, 1)")
        if not 0 < self.tau1 < 1 < self.tau2:
            raise ValueError("need 0 < tau1 < 1 < tau2")
        if 1.0 / self.tau2 > self.tau1:
            raise ValueError("need 1/tau2 <= tau1")
        for name in ("pi", "delta_max", "delta0", "kappa1", "kappa2", "min_radius"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.delta0 > self.delta_max:
            raise ValueError("delta0 exceeds delta_max")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")


@dataclass
class IterateState:
    """Point, multipliers and trust radius carried between iterations.

    ``mubar`` holds one row per scenario: nonnegative weights over the
    constraint rows summing to one.
    """

    point: DispatchPoint
    nu: np.ndarray
    lam: float
    mubar: np.ndarray
    delta: float
    active: set = field(default_factory=set)


@dataclass
class SolveReport:
    point: DispatchPoint
    objective: float
    cost: float
    quantile: float
    iterations: int
    qp_solves: int
    wall_time: float
    reason: str
    stationarity: float
    violation: np.ndarray
    active_pairs: int
    qp_pairs: int
    state: IterateState
    trace: list = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.reason in ("converged", "zero-step")

    @property
    def feasible(self) -> bool:
        return bool(np.max(self.violation) <= 1e-6)


def expected_cost(point: DispatchPoint, case: GridCase, var_omega: float):
    """``cost(g) + 1/2 V(Omega) beta'M beta`` and its gradient in ``(g, beta)``."""
    M = case.cost_quad
    b = point.beta
    val = case.cost(point.g) + 0.5 * var_omega * b @ (M * b)
    grad = np.concatenate([case.cost_grad(point.g), var_omega * M * b])
    return val, grad


def penalty(cost_value: float, pi: float, q: float, residuals) -> float:
    """``cost + pi * (|balance| + |sum(beta) - 1| + max(0, q))``.

    ``residuals`` holds the two equality residuals; ``q`` is the quantile
    excess over its right-hand side.
    """
    r = np.asarray(residuals, dtype=float)
    return float(cost_value + pi * (np.abs(r).sum() + max(0.0, q)))


class ChanceProblem:
    """A case bound to a training sample, smoothing width and right-hand side."""

    def __init__(self, case: GridCase, W, eps: float, alpha: float, t: float = 0.0,
                 var_omega: float | None = None, system: ConstraintSystem | None = None,
                 cost_scale: float | None = None):
        if not eps > 0:
            raise ValueError("eps must be positive")
        self.case = case
        self.system = system if system is not None else ConstraintSystem(case)
        W = np.atleast_2d(np.asarray(W, dtype=float))
        self.omega = W.sum(axis=1)
        self.flow_noise = self.system.flow_noise(W)
        self.N = len(self.omega)
        self.eps = float(eps)
        self.alpha = float(alpha)
        self.t = float(t)
        if var_omega is None:
            var_omega = float(np.var(self.omega)) if self.N > 1 else 0.0
        self.var_omega = float(var_omega)

        ng = case.n_gen
        span = case.gen_pmax - case.gen_pmin
        self.fixed = np.flatnonzero(span <= 1e-9 * np.maximum(1.0, np.abs(case.gen_pmax)))
        self.free = np.setdiff1d(np.arange(ng), self.fixed)
        if len(self.free) == 0:
            raise ValueError("every generator is fixed; nothing can balance fluctuations")
        self.xfree = np.concatenate([self.free, ng + self.free])
        nf = self.system.n_flow
        gen_rows = np.concatenate([2 * nf + self.free, 2 * nf + ng + self.free])
        self.rows = np.concatenate([np.arange(2 * nf), gen_rows])
        self.a = self.system.a[self.rows][:, self.free]
        self.b = self.system.b[self.rows][:, self.free]
        self.a_all = self.system.a[self.rows]  # fixed generators still inject power
        self.k = self.system.k[self.rows]
        self.m = len(self.rows)
        if cost_scale is None:
            marg = np.abs(case.cost_lin) + case.cost_quad * np.abs(case.gen_pmax)
            cost_scale = max(1.0, float(marg[self.free].max()))
        self.cost_scale = float(cost_scale)

    def with_t(self, t: float) -> "ChanceProblem":
        out = object.__new__(ChanceProblem)
        out.__dict__.update(self.__dict__)
        out.t = float(t)
        return out

    # -- constraint arithmetic on the kept rows --------------------------
    def values(self, point: DispatchPoint, idx=None) -> np.ndarray:
        """Constraint values for scenarios ``idx`` (all by default), shape ``(n, m)``."""
        om = self.omega if idx is None else self.omega[idx]
        fn = self.flow_noise if idx is None else self.flow_noise[idx]
        bf = point.beta[self.free]
        base = self.a_all @ point.g + self.k
        slope = self.b @ bf
        out = base[None, :] + om[:, None] * slope[None, :]
        nf = self.system.n_flow
        out[:, :nf] += fn
        out[:, nf:2 * nf] -= fn
        return out

    def initial_point(self, g) -> DispatchPoint:
        g = np.array(g, dtype=float)
        g[self.fixed] = self.case.gen_pmin[self.fixed]
        beta = np.zeros(self.case.n_gen)
        beta[self.free] = 1.0 / len(self.free)
        return DispatchPoint(g, beta)

    def quantile(self, C) -> QuantileEval:
        Q = solve_quantile(C, self.eps, self.alpha)
        try:
            return quantile_derivatives(C, self.eps, self.alpha, Q)
        except DegenerateQuantileError:
            return QuantileEval(Q, np.zeros(len(C)), np.zeros(0, dtype=int), np.zeros((0, 0)))

    def residuals(self, point: DispatchPoint) -> np.ndarray:
        return np.array([point.g.sum() - self.case.load.sum(), point.beta.sum() - 1.0])

    def scaled_cost(self, point: DispatchPoint):
        val, grad = expected_cost(point, self.case, self.var_omega)
        return val / self.cost_scale, grad[self.xfree] / self.cost_scale

    def phi(self, point: DispatchPoint, Q: float, pi: float) -> float:
        val, _ = self.scaled_cost(point)
        return penalty(val, pi, Q - self.t, self.residuals(point))


def _argmax_weights(vals: np.ndarray) -> np.ndarray:
    out = np.zeros_like(vals)
    out[np.arange(vals.shape[0]), np.argmax(vals, axis=1)] = 1.0
    return out


def _aggregated_gradients(prob: ChanceProblem, mubar_w: np.ndarray, window: np.ndarray) -> np.ndarray:
    """Columns ``sum_j mubar_ij grad c_j(.; omega_i)`` for scenarios in ``window``."""
    cg = prob.a.T @ mubar_w.T
    cb = (prob.b.T @ mubar_w.T) * prob.omega[window][None, :]
    return np.vstack([cg, cb])


def build_hessian(prob: ChanceProblem, state: IterateState, quant: QuantileEval) -> np.ndarray:
    """``H_E + lam * Cbar Qhat Cbar'`` on the free coordinates (scaled units)."""
    M = prob.case.cost_quad[prob.free]
    H = np.diag(np.concatenate([M, prob.var_omega * M])) / prob.cost_scale
    if state.lam > 0 and len(quant.window):
        Cbar = _aggregated_gradients(prob, state.mubar[quant.window], quant.window)
        Qhat = psd_project(quant.hess_window)
        H = H + state.lam * (Cbar @ Qhat @ Cbar.T)
    return 0.5 * (H + H.T)


@dataclass
class _QPLayout:
    window: np.ndarray
    pairs: np.ndarray  # (k, 2) array of (window position, row)
    nd: int

    @property
    def nz(self) -> int:
        return len(self.window)

    @property
    def n(self) -> int:
        return self.nd + self.nz + 5


def assemble_qp(prob: ChanceProblem, point: DispatchPoint, C_vals: np.ndarray, quant: QuantileEval,
                H: np.ndarray, delta: float, pairs, pi: float) -> tuple[qp.QPProblem, _QPLayout]:
    """Trust-region subproblem for the active pairs ``(window position, row)``.

    Variables are ``(d, z, u1, u2, v1, v2, w)``. ``C_vals`` holds the current
    constraint values for the window scenarios, shape ``(len(window), m)``.
    """
    if H.shape != (len(prob.xfree),) * 2:
        raise ValueError("Hessian has the wrong size")
    window = quant.window
    pairs = np.asarray(sorted(pairs), dtype=int).reshape(-1, 2)
    nd = len(prob.xfree)
    lay = _QPLayout(window, pairs, nd)
    nz, n = lay.nz, lay.n
    half = nd // 2
    iu, iv, iw = nd + nz, nd + nz + 2, nd + nz + 4

    P = np.zeros((n, n))
    P[:nd, :nd] = H
    _, grad = prob.scaled_cost(point)
    q = np.zeros(n)
    q[:nd] = grad
    q[iu:iw + 1] = pi

    r = prob.residuals(point)
    A_eq = np.zeros((2, n))
    A_eq[0, :half] = 1.0
    A_eq[1, half:nd] = 1.0
    A_eq[0, iu], A_eq[0, iv] = -1.0, 1.0
    A_eq[1, iu + 1], A_eq[1, iv + 1] = -1.0, 1.0
    b_eq = -r

    k = len(pairs)
    wpos, rows = pairs[:, 0], pairs[:, 1]
    om = prob.omega[window][wpos]
    blocks_g = prob.a[rows]
    blocks_b = prob.b[rows] * om[:, None]
    data = np.hstack([blocks_g, blocks_b, -np.ones((k, 1))]).ravel()
    cols = np.hstack([np.tile(np.arange(nd), (k, 1)), (nd + wpos)[:, None]]).ravel()
    ridx = np.repeat(np.arange(k), nd + 1)
    grad_w = quant.grad[window]
    C_w = C_vals.max(axis=1) if nz else np.zeros(0)
    w_row_cols = np.concatenate([nd + np.arange(nz), [iw]])
    w_row_vals = np.concatenate([grad_w, [-1.0]])
    A_in = sp.csr_matrix(
        (np.concatenate([data, w_row_vals]),
         (np.concatenate([ridx, np.full(nz + 1, k)]), np.concatenate([cols, w_row_cols]))),
        shape=(k + 1, n))
    b_in = np.concatenate([-C_vals[wpos, rows], [grad_w @ C_w - quant.value + prob.t]])
    ids = np.concatenate([window[wpos] * prob.m + rows, [-1]])

    lb = np.full(n, -np.inf)
    ub = np.full(n, np.inf)
    lb[:nd], ub[:nd] = -delta, delta
    lb[iu:] = 0.0
    return qp.QPProblem(P, q, A_eq, b_eq, A_in, b_in, lb, ub, ineq_ids=ids), lay


def _model_value(prob, point, quant, C_vals, H, d, pi):
    """Penalty model at step ``d`` (``d = 0`` gives the current penalty)."""
    val, grad = prob.scaled_cost(point)
    half = len(d) // 2
    r = prob.residuals(point)
    lin = quant.value - prob.t
    if len(quant.window):
        dg, db = d[:half], d[half:]
        om = prob.omega[quant.window]
        Cn = (C_vals + (prob.a @ dg)[None, :] + om[:, None] * (prob.b @ db)[None, :]).max(axis=1)
        lin += quant.grad[quant.window] @ (Cn - C_vals.max(axis=1))
    return (val + grad @ d + 0.5 * d @ H @ d
            + pi * (abs(r[0] + d[:half].sum()) + abs(r[1] + d[half:].sum()) + max(0.0, lin)))


def stationarity(prob: ChanceProblem, point: DispatchPoint, state: IterateState,
                 quant: QuantileEval) -> float:
    """Infinity norm of the Lagrangian gradient on the free coordinates (scaled units)."""
    _, grad = prob.scaled_cost(point)
    half = len(prob.free)
    g = grad.copy()
    g[:half] += state.nu[0]
    g[half:] += state.nu[1]
    if state.lam > 0 and len(quant.window):
        Cbar = _aggregated_gradients(prob, state.mubar[quant.window], quant.window)
        g += state.lam * Cbar @ quant.grad[quant.window]
    return float(np.abs(g).max())


def _to_full(prob: ChanceProblem, base: DispatchPoint, d: np.ndarray) -> DispatchPoint:
    x = base.x.copy()
    x[prob.xfree] += d
    return DispatchPoint.from_x(x)


def initial_state(prob: ChanceProblem, g0, config: PenaltyConfig) -> IterateState:
    point = prob.initial_point(g0)
    C_all = prob.values(point)
    return IterateState(point, np.zeros(2), 0.0, _argmax_weights(C_all), config.delta0)


def solve(prob: ChanceProblem, g0=None, config: PenaltyConfig = PenaltyConfig(),
          state: IterateState | None = None, trace: bool = False) -> SolveReport:
    """Run the trust-region penalty QP iteration from ``state`` (or from ``g0``)."""
    t_start = time.perf_counter()
    if state is None:
        if g0 is None:
            raise ValueError("either g0 or an initial state is required")
        state = initial_state(prob, g0, config)
    else:
        point = prob.initial_point(state.point.g)
        point = DispatchPoint(point.g, np.where(np.isin(np.arange(len(point.g)), prob.free),
                                                state.point.beta, 0.0))
        state = replace(state, point=point, mubar=state.mubar.copy(), delta=config.delta0,
                        active=set(state.active))
    if config.cost_scale is not None:
        prob = replace_scale(prob, config.cost_scale)
    pi = config.pi
    nd = len(prob.xfree)
    half = nd // 2

    C_all = prob.values(state.point)
    Cmax = C_all.max(axis=1)
    quant = prob.quantile(Cmax)
    phi = prob.phi(state.point, quant.value, pi)
    rows_trace = []
    qp_solves = 0
    reason = "iteration-limit"
    it = 0
    stat = np.inf
    last_pairs = 0

    for it in range(1, config.max_iter + 1):
        win = quant.window
        C_w = C_all[win]
        H = build_hessian(prob, state, quant)

        if config.lazy:
            cand = C_w > -config.kappa2
            cand[np.arange(len(win)), np.argmax(C_w, axis=1)] = True
        else:
            cand = np.ones_like(C_w, dtype=bool)
        pairs = set(zip(*np.nonzero(cand)))
        t_qp = time.perf_counter()
        sol = None
        while True:
            problem, lay = assemble_qp(prob, state.point, C_w, quant, H, state.delta, pairs, pi)
            sol = qp.solve(problem, warm=sol if sol is not None and len(sol.x) == lay.n else None)
            qp_solves += 1
            if sol.status != qp.OPTIMAL:
                raise qp.QPError(f"trust-region subproblem ended with status {sol.status} "
                                 f"at iteration {it} ({len(pairs)} pairs, radius {state.delta:.3g})")
            d = np.clip(sol.x[:nd], -state.delta, state.delta)
            if not len(win):
                break
            z = sol.x[nd:nd + lay.nz]
            om = prob.omega[win]
            Cn = C_w + (prob.a @ d[:half])[None, :] + om[:, None] * (prob.b @ d[half:])[None, :]
            tol = 1e-9 * (1.0 + np.abs(Cn).max())
            add = (Cn > z[:, None] + tol)
            if config.lazy:
                add |= Cn > -config.kappa2
            new = set(zip(*np.nonzero(add))) - pairs
            if not new:
                break
            pairs |= new
        qp_time = time.perf_counter() - t_qp
        last_pairs = len(pairs)

        step = float(np.abs(d).max()) if nd else 0.0
        xscale = max(1.0, float(np.abs(state.point.x).max()))
        rec = {"k": it, "phi": phi, "Q": quant.value, "Delta": state.delta, "rho": np.nan,
               "J": int(np.count_nonzero(C_all > -config.kappa2)), "qp_pairs": len(pairs),
               "qp_time": qp_time, "step": step, "accepted": False}
        if step <= 1e-12 * xscale:
            rows_trace.append(rec)
            reason = "zero-step"
            break

        m0 = _model_value(prob, state.point, quant, C_w, H, np.zeros(nd), pi)
        md = _model_value(prob, state.point, quant, C_w, H, d, pi)
        pred = m0 - md
        trial = _to_full(prob, state.point, d)
        C_new = prob.values(trial)
        Cmax_new = C_new.max(axis=1)
        Q_new = solve_quantile(Cmax_new, prob.eps, prob.alpha)
        phi_new = prob.phi(trial, Q_new, pi)
        ared = phi - phi_new
        # below this the subproblem optimum is indistinguishable from d = 0
        floor = 1e-9 * (1.0 + abs(phi))
        if pred <= floor:
            if pred >= -floor:
                rec.update(pred=pred, ared=ared)
                rows_trace.append(rec)
                reason = "zero-step"
                break
            rho = -np.inf
        else:
            rho = ared / pred
        rec.update(rho=rho, pred=pred, ared=ared)

        if rho >= config.eta:
            rec["accepted"] = True
            # multipliers from the subproblem
            y = sol.y_eq
            zin = sol.z_ineq
            lam = float(zin[-1])
            mu = zin[:-1]
            gw = quant.grad[win]
            mubar = _argmax_weights(C_new)
            if lam > 0 and len(win):
                acc = np.zeros((len(win), prob.m))
                np.add.at(acc, (lay.pairs[:, 0], lay.pairs[:, 1]), np.clip(mu, 0.0, None))
                rs = acc.sum(axis=1)
                good = (lam * gw > 1e-12) & (rs > 1e-14)
                mubar[win[good]] = acc[good] / rs[good][:, None]
            quant_new = prob.quantile(Cmax_new)
            new_delta = state.delta
            if abs(step - state.delta) <= 1e-6 * state.delta:
                new_delta = min(config.tau2 * state.delta, config.delta_max)
            state = IterateState(trial, np.asarray(y, dtype=float).copy(), lam, mubar, new_delta,
                                 {(int(win[i]), int(j)) for i, j in pairs})
            C_all, Cmax, quant, phi = C_new, Cmax_new, quant_new, phi_new
            stat = stationarity(prob, state.point, state, quant)
            viol = np.abs(np.concatenate([prob.residuals(state.point),
                                          [max(0.0, quant.value - prob.t)]])).max()
            rec.update(stationarity=stat, violation=viol)
            rows_trace.append(rec)
            if stat <= config.kappa1 and viol <= config.kappa1:
                reason = "converged"
                break
        else:
            state.delta = config.tau1 * min(state.delta, step)
            rec["new_Delta"] = state.delta
            rows_trace.append(rec)
            if state.delta < config.min_radius:
                reason = "min-radius"
                break
        if rec["accepted"]:
            rec["new_Delta"] = state.delta

    viol = np.concatenate([np.abs(prob.residuals(state.point)), [max(0.0, quant.value - prob.t)]])
    if not np.isfinite(stat):
        stat = stationarity(prob, state.point, state, quant)
    obj, _ = expected_cost(state.point, prob.case, prob.var_omega)
    report = SolveReport(
        point=state.point, objective=float(obj), cost=prob.case.cost(state.point.g),
        quantile=quant.value, iterations=it, qp_solves=qp_solves,
        wall_time=time.perf_counter() - t_start, reason=reason, stationarity=stat,
        violation=viol, active_pairs=int(np.count_nonzero(C_all > -config.kappa2)),
        qp_pairs=last_pairs, state=state, trace=rows_trace if trace else [])
    if reason in ("iteration-limit", "min-radius"):
        log.warning("penalty QP iteration stopped by %s after %d iterations", reason, it)
    return report


def replace_scale(prob: ChanceProblem, scale: float) -> ChanceProblem:
    out = object.__new__(ChanceProblem)
    out.__dict__.update(prob.__dict__)
    out.cost_scale = float(scale)
    return out


TRACE_FIELDS = ["k", "phi", "Q", "Delta", "rho", "J", "qp_pairs", "qp_time", "step",
                "accepted", "pred", "ared", "new_Delta", "stationarity", "violation"]


def write_trace(trace, path) -> None:
    """Iteration log as CSV."""
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRACE_FIELDS, extrasaction="ignore")
        w.writeheader()
        for row in trace:
            w.writerow(row)
