"""Deterministic DC-OPF and the scenario approach, both posed as convex QPs."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import qp
from .cons import ConstraintSystem, DispatchPoint
from .netcase import GridCase
from .stochastic import ScenarioModel, ScenarioSet, sample

__all__ = [
    "BaselineResult",
    "SAConfig",
    "fixed_generators",
    "nominal_participation",
    "solve_nominal",
    "sa_sample_size",
    "solve_sa",
    "ScenarioRowPool",
]


@dataclass
class BaselineResult:
    point: DispatchPoint | None
    objective: float  # cost(g) in $/h
    status: str
    expected_cost: float = float("nan")
    n_scenarios: int = 0
    active_rows: int = 0
    qp_iterations: int = 0

    @property
    def feasible(self) -> bool:
        return self.status == qp.OPTIMAL


@dataclass(frozen=True)
class SAConfig:
    alpha: float = 0.05
    sigma: float = 1e-4
    n_gen: int = 1

    @property
    def n_scenarios(self) -> int:
        return sa_sample_size(self.alpha, self.sigma, self.n_gen)


def fixed_generators(case: GridCase) -> np.ndarray:
    """Generators whose output range is a single point."""
    span = case.gen_pmax - case.gen_pmin
    return np.flatnonzero(span <= 1e-9 * np.maximum(1.0, np.abs(case.gen_pmax)))


def nominal_participation(case: GridCase, g) -> np.ndarray:
    """Participation factors proportional to each generator's symmetric headroom.

    ``min(pmax - g, g - pmin)`` is the largest deviation a unit can follow in
    both directions; units at a limit get zero share. Falls back to equal
    shares when no unit has headroom.
    """
    g = np.asarray(g, dtype=float)
    room = np.clip(np.minimum(case.gen_pmax - g, g - case.gen_pmin), 0.0, None)
    if room.sum() <= 0:
        return np.full(case.n_gen, 1.0 / case.n_gen)
    return room / room.sum()


def _flow_rows(case: GridCase, system: ConstraintSystem):
    PG = system.flow_ptdf @ case.gen_map
    base = system.flow_ptdf @ case.load
    A = np.vstack([PG, -PG])
    b = np.concatenate([system.f_ub + base, system.f_ub - base])
    return A, b


def solve_nominal(case: GridCase, system: ConstraintSystem | None = None, tol: float = 1e-8) -> BaselineResult:
    """Least-cost dispatch with all fluctuations at zero.

    The returned point carries :func:`nominal_participation` factors so that
    it can be evaluated out of sample; they play no role in the optimization.
    """
    system = system if system is not None else ConstraintSystem(case)
    n = case.n_gen
    A, b = _flow_rows(case, system)
    prob = qp.QPProblem(np.diag(case.cost_quad), case.cost_lin, np.ones((1, n)), [case.load.sum()],
                        A, b, case.gen_pmin, case.gen_pmax)
    sol = qp.solve(prob, tol=tol)
    if sol.status != qp.OPTIMAL:
        return BaselineResult(None, float("nan"), sol.status, qp_iterations=sol.iterations)
    g = np.clip(sol.x, case.gen_pmin, case.gen_pmax)
    point = DispatchPoint(g, nominal_participation(case, g))
    obj = case.cost(g)
    return BaselineResult(point, obj, sol.status, expected_cost=obj, qp_iterations=sol.iterations)


def sa_sample_size(alpha: float, sigma: float = 1e-4, n_gen: int = 1) -> int:
    """``ceil((2 / alpha) * (ln(1 / sigma) + 2 n_gen))`` scenarios."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    if not 0 < sigma < 1:
        raise ValueError("sigma must lie in (0, 1)")
    val = (2.0 / alpha) * (math.log(1.0 / sigma) + 2 * n_gen)
    # guard against the float landing a hair above an integer
    return int(math.ceil(val - 1e-9 * val))


class ScenarioRowPool:
    """Every constraint row of every scenario, generated on demand.

    Variables are ``(g_F, beta_F)`` for the free generators ``F``; fixed
    generators sit at their only output with zero participation.
    """

    def __init__(self, system: ConstraintSystem, omega, flow_noise, free, g_fixed):
        case = system.case
        nf = system.n_flow
        ng = case.n_gen
        self.rows_kept = np.concatenate([np.arange(2 * nf), 2 * nf + free, 2 * nf + ng + free])
        self.a = system.a[self.rows_kept][:, free]
        self.b = system.b[self.rows_kept][:, free]
        self.k = system.k[self.rows_kept] + system.a[self.rows_kept] @ g_fixed
        self.omega = np.asarray(omega, dtype=float)
        self.noise = np.hstack([flow_noise, -flow_noise, np.zeros((len(self.omega), 2 * len(free)))])
        self.m = len(self.rows_kept)
        self.nF = len(free)
        self.ids = np.arange(len(self.omega) * self.m)

    def __len__(self):
        return len(self.ids)

    def rows(self, idx):
        s, j = np.divmod(np.asarray(idx, dtype=int), self.m)
        A = np.hstack([self.a[j], self.omega[s][:, None] * self.b[j]])
        rhs = -(self.k[j] + self.noise[s, j])
        return A, rhs

    def matrix_values(self, x):
        g, beta = x[:self.nF], x[self.nF:]
        return (self.a @ g + self.k)[None, :] + self.omega[:, None] * (self.b @ beta)[None, :] + self.noise

    def values(self, x):
        return self.matrix_values(x).ravel()


def solve_sa(case: GridCase, model: ScenarioModel | ScenarioSet, N_sa: int | None = None,
             seed: int = 0, system: ConstraintSystem | None = None, threshold: float = 0.1,
             alpha: float = 0.05, sigma: float = 1e-4) -> BaselineResult:
    """Scenario approach: enforce every constraint on ``N_sa`` sampled scenarios.

    The objective is ``cost(g)``; participation factors are only restricted
    through the scenario rows and ``sum(beta) = 1``. An infeasible scenario
    set is a normal outcome, reported through ``status``.
    """
    system = system if system is not None else ConstraintSystem(case)
    if isinstance(model, ScenarioSet):
        scen = model
    else:
        if N_sa is None:
            N_sa = sa_sample_size(alpha, sigma, case.n_gen)
        if N_sa < 1:
            raise ValueError("N_sa must be at least 1")
        scen = sample(model, N_sa, seed)
    fixed = fixed_generators(case)
    free = np.setdiff1d(np.arange(case.n_gen), fixed)
    g_fixed = np.zeros(case.n_gen)
    g_fixed[fixed] = case.gen_pmin[fixed]
    pool = ScenarioRowPool(system, scen.omega, system.flow_noise(scen.W), free, g_fixed)
    nF = len(free)

    P = np.zeros((2 * nF, 2 * nF))
    P[:nF, :nF] = np.diag(case.cost_quad[free])
    q = np.concatenate([case.cost_lin[free], np.zeros(nF)])
    A_eq = np.zeros((2, 2 * nF))
    A_eq[0, :nF] = 1.0
    A_eq[1, nF:] = 1.0
    b_eq = np.array([case.load.sum() - g_fixed.sum(), 1.0])
    base = qp.QPProblem(P, q, A_eq, b_eq)

    # start from the rows that bind at the deterministic optimum
    nom = solve_nominal(case, system)
    start = []
    if nom.point is not None:
        x0 = np.concatenate([nom.point.g[free], np.full(nF, 1.0 / nF)])
        vals = pool.matrix_values(x0)
        start = np.flatnonzero((vals > -threshold).ravel()).tolist()
        start += (np.arange(scen.N) * pool.m + np.argmax(vals, axis=1)).tolist()
    sol, active = qp.lazy_solve(base, start, threshold, pool=pool)
    if sol.status != qp.OPTIMAL:
        return BaselineResult(None, float("nan"), sol.status, n_scenarios=scen.N,
                              active_rows=len(active), qp_iterations=sol.iterations)
    g = g_fixed.copy()
    g[free] = sol.x[:nF]
    beta = np.zeros(case.n_gen)
    beta[free] = sol.x[nF:]
    point = DispatchPoint(g, beta)
    obj = case.cost(g)
    M = case.cost_quad
    var = float(np.var(scen.omega)) if isinstance(model, ScenarioSet) else model.var_omega
    return BaselineResult(point, obj, sol.status, expected_cost=obj + 0.5 * var * beta @ (M * beta),
                          n_scenarios=scen.N, active_rows=len(active), qp_iterations=sol.iterations)
