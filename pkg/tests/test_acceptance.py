"""Acceptance criteria 1-10.

Each test records a one-line verdict; the lines are printed together at the
end of the pytest run (see ``conftest.pytest_terminal_summary``) and when the
file is executed directly.
"""

import time

import numpy as np
import pytest
from scipy.optimize import brentq
from scipy.stats import norm

from jccopf import ConstraintSystem, builtin_case, build_covariance, sample
from jccopf import qp
from jccopf.baselines import solve_nominal, solve_sa
from jccopf.cli import ExperimentConfig, run
from jccopf.sl1qp import ChanceProblem, PenaltyConfig, solve
from jccopf.squantile import gamma, gamma_derivs, smooth_quantile, solve_quantile
from jccopf.stochastic import out_of_sample_probability, replication_seed, rng
from jccopf.tuning import calibrate_epsilon, scale_epsilon, search_epsilon

from conftest import COV_SEED
from fd_oracle import fd_gradient, fd_jacobian, order_statistic_quantile
from qp_oracle import enumerate_qp
from test_qp import random_qp

RESULTS: dict[int, tuple[bool, str]] = {}
ALPHA = 0.05


def record(n, ok, detail):
    RESULTS[n] = (bool(ok), detail)
    assert ok, f"criterion {n}: {detail}"


def summary_lines():
    out = []
    for n in range(1, 11):
        if n in RESULTS:
            ok, detail = RESULTS[n]
            out.append(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            out.append(f"criterion {n:2d}: NOT RUN")
    return out


# -- 1 ---------------------------------------------------------------------

def test_c01_kernel_identities():
    t0 = time.perf_counter()
    worst_val = 0.0
    worst_c2 = 0.0
    for eps in (1e-3, 0.37, 1.0, 12.0):
        vals = [gamma(eps, -eps) - 1.0, gamma(eps, 0.0) - 0.5, gamma(eps, eps) - 0.0,
                gamma(eps, eps / 2) - 0.103515625]
        worst_val = max(worst_val, max(abs(v) for v in vals))
        h = 1e-7 * eps
        for knot, outside in ((eps, 0.0), (-eps, 1.0)):
            inner = knot - np.sign(knot) * h
            # one-sided differences from inside against the constant outside piece
            d1 = (gamma(eps, knot) - gamma(eps, inner)) / (knot - inner)
            d2 = (gamma_derivs(eps, knot)[1] - gamma_derivs(eps, inner)[1]) / (knot - inner)
            g0, g1, g2 = gamma_derivs(eps, knot)
            worst_c2 = max(worst_c2, abs(g0 - outside), abs(d1) * eps, abs(d2) * eps**2,
                           abs(g1) * eps, abs(g2) * eps**2)
    elapsed = time.perf_counter() - t0
    record(1, worst_val <= 1e-15 and worst_c2 <= 1e-6 and elapsed < 1.0,
           f"max identity error {worst_val:.1e} (<=1e-15), one-sided C2 gap {worst_c2:.1e} (<=1e-6), "
           f"{elapsed:.2f}s")


# -- 2 ---------------------------------------------------------------------

def test_c02_quantile_oracle():
    t0 = time.perf_counter()
    g = np.random.default_rng(202)
    worst_rel, worst_shift = 0.0, 0.0
    for i in range(200):
        N = (10, 100, 1000)[i % 3]
        z = g.normal(size=N) * g.uniform(0.01, 100) + g.uniform(-50, 50)
        alpha = float(g.choice([0.01, 0.05, 0.1, 0.5]))
        span = np.ptp(z)
        q = solve_quantile(z, 1e-8 * span, alpha)
        worst_rel = max(worst_rel, abs(q - order_statistic_quantile(z, alpha)) / span)
        c = g.uniform(-10, 10)
        eps = float(g.uniform(0.05, 1.0)) * span
        worst_shift = max(worst_shift, abs(solve_quantile(z + c, eps, alpha)
                                           - solve_quantile(z, eps, alpha) - c))
    elapsed = time.perf_counter() - t0
    record(2, worst_rel <= 1e-6 and worst_shift <= 1e-12 and elapsed < 10,
           f"max |Q - order stat|/range {worst_rel:.1e} (<=1e-6), translation error "
           f"{worst_shift:.1e} (<=1e-12), {elapsed:.2f}s")


# -- 3 ---------------------------------------------------------------------

def test_c03_derivatives():
    t0 = time.perf_counter()
    g = np.random.default_rng(303)
    worst_g, worst_h, worst_sum, min_grad = 0.0, 0.0, 0.0, np.inf
    for _ in range(50):
        N = int(g.integers(10, 80))
        z = g.normal(size=N)
        eps = float(g.uniform(0.3, 1.0))
        alpha = float(g.choice([0.05, 0.1, 0.2]))
        q = smooth_quantile(z, eps, alpha)
        h = 1e-5
        fd_g = fd_gradient(lambda v: solve_quantile(v, eps, alpha), z, h)
        worst_g = max(worst_g, np.abs(fd_g - q.grad).max() / max(1.0, np.abs(q.grad).max()))
        fd_H = fd_jacobian(lambda v: smooth_quantile(v, eps, alpha).grad, z, h)
        H = q.hessian()
        worst_h = max(worst_h, np.abs(fd_H - H).max() / max(1.0, np.abs(H).max()))
        worst_sum = max(worst_sum, abs(q.grad.sum() - 1.0))
        min_grad = min(min_grad, q.grad.min())
    elapsed = time.perf_counter() - t0
    record(3, worst_g <= 1e-6 and worst_h <= 1e-4 and worst_sum <= 1e-12 and min_grad >= 0
           and elapsed < 30,
           f"gradient FD gap {worst_g:.1e} (<=1e-6), Hessian FD gap {worst_h:.1e} (<=1e-4), "
           f"|sum-1| {worst_sum:.1e}, min entry {min_grad:.1e}, {elapsed:.2f}s")


# -- 4 ---------------------------------------------------------------------

def _toy_radius(xi, eps):
    """Radius along x1 = x2 where the smooth quantile of r*xi - 1 vanishes."""
    return brentq(lambda r: solve_quantile(r * xi - 1.0, eps, ALPHA), 1e-3, 50.0, xtol=1e-14)


def test_c04_gaussian_toy():
    t0 = time.perf_counter()
    # x1 w1 + x2 w2 on the ray x1 = x2 = r / sqrt(2) equals r * xi with xi standard normal
    eps_reps = []
    for r in range(10):
        W = rng(replication_seed(0, r, 1)).standard_normal((100, 2))
        xi = W.sum(axis=1) / np.sqrt(2.0)
        eps, _ = search_epsilon(lambda e: (norm.cdf(1.0 / _toy_radius(xi, e)), None), 1 - ALPHA,
                                0.1, tau=1e-3)
        eps_reps.append(eps)
    eps = scale_epsilon(max(eps_reps), 100, 10_000)
    W = rng(4).standard_normal((10_000, 2))
    radius = _toy_radius(W.sum(axis=1) / np.sqrt(2.0), eps)
    exact = 1.0 / norm.ppf(1 - ALPHA)
    err = abs(radius - exact) / exact
    elapsed = time.perf_counter() - t0
    record(4, err <= 0.03 and elapsed < 60,
           f"radius {radius:.4f} vs {exact:.4f} ({100 * err:.2f}% <= 3%), eps={eps:.4f}, {elapsed:.1f}s")


# -- 5 ---------------------------------------------------------------------

def test_c05_qp_solver():
    t0 = time.perf_counter()
    g = np.random.default_rng(505)
    worst_gap, worst_kkt, worst_lazy = 0.0, 0.0, 0.0
    for _ in range(100):
        n = int(g.integers(2, 21))
        m = int(g.integers(1, 11))
        P, q, A, b, G, h = random_qp(g, n=n, m=m)
        ref_val, ref_x = enumerate_qp(P, q, A, b, G, h)
        prob = qp.QPProblem(P, q, A, b, G, h)
        sol = qp.solve(prob)
        assert sol.status == qp.OPTIMAL
        worst_gap = max(worst_gap, abs(sol.objective - ref_val) / (1 + abs(ref_val)))
        r = sol.residuals
        worst_kkt = max(worst_kkt, r["stationarity"], r["primal"], r["complementarity"],
                        r["dual_infeasibility"])
        lazy, _ = qp.lazy_solve(prob, [], 0.1)
        worst_lazy = max(worst_lazy, np.abs(lazy.x - sol.x).max())
    elapsed = time.perf_counter() - t0
    record(5, worst_gap <= 1e-7 and worst_kkt <= 1e-8 and worst_lazy <= 1e-7 and elapsed < 60,
           f"objective gap {worst_gap:.1e} (<=1e-7), KKT residual {worst_kkt:.1e} (<=1e-8), "
           f"lazy vs full {worst_lazy:.1e} (<=1e-7), {elapsed:.1f}s")


# -- 6 ---------------------------------------------------------------------

NOMINAL_REF = {"case14": 2051.5, "case57": 34773.0, "case118": 109791.0}


def test_c06_nominal_reproduction():
    parts, ok = [], True
    for name, ref in NOMINAL_REF.items():
        obj = solve_nominal(builtin_case(name)).objective
        dev = abs(obj - ref) / ref
        ok &= dev <= 0.01
        parts.append(f"{name} {obj:,.1f} vs {ref:,.1f} ({100 * dev:.2f}%)")
    record(6, ok, "; ".join(parts) + " (<=1% each)")


# -- 7, 8, 10 share the desk-scale run --------------------------------------

@pytest.fixture(scope="module")
def case14_setup():
    case = builtin_case("case14")
    system = ConstraintSystem(case)
    model = build_covariance(case, 0.1, COV_SEED)
    return case, system, model


@pytest.fixture(scope="module")
def eps_hat(case14_setup):
    case, system, model = case14_setup
    return calibrate_epsilon(case, model, ALPHA, N_hat=100, M_hat=10, seed=0, system=system)


@pytest.fixture(scope="module")
def desk_run(eps_hat):
    cfg = ExperimentConfig(case="case14", method="nlp", alpha=ALPHA, zeta=0.1, n=100, reps=10, seed=0,
                           cov_seed=COV_SEED, eps_hat=eps_hat, keep_traces=True)
    t0 = time.perf_counter()
    report = run(cfg)
    return report, time.perf_counter() - t0


def test_c07_desk_scale_run(desk_run, eps_hat):
    report, elapsed = desk_run
    rows = report.rows
    ok_rows = [r for r in rows if r["status"] == "ok"]
    probs = [r["probability"] for r in ok_rows]
    objs = [r["objective"] for r in ok_rows]
    good = (len(ok_rows) == 10 and all(0.948 <= p <= 0.952 for p in probs)
            and all(2000 <= o <= 2400 for o in objs) and elapsed <= 300)
    detail = (f"{len(ok_rows)}/10 ok, prob [{min(probs, default=np.nan):.4f}, "
              f"{max(probs, default=np.nan):.4f}] in [0.948, 0.952], obj [{min(objs, default=np.nan):,.1f}, "
              f"{max(objs, default=np.nan):,.1f}] in [2000, 2400], avg t "
              f"{report.aggregates.get('t_avg', np.nan):.4f}, eps_hat {eps_hat:.4f}, {elapsed:.0f}s")
    record(7, good, detail)


def test_c08_conservativeness(desk_run, case14_setup):
    case, system, model = case14_setup
    report, _ = desk_run
    lines, ok, n_feasible = [], True, 0
    for row in report.rows[:5]:
        sa = solve_sa(case, model, None, row["seed"], system=system)
        if not sa.feasible:
            lines.append(f"rep {row['replication']} SA infeasible")
            continue
        n_feasible += 1
        p_sa = out_of_sample_probability(sa.point, system, model, 1_000_000, row["seed"])
        ok &= sa.objective >= row["objective"] and p_sa >= row["probability"]
        lines.append(f"rep {row['replication']} SA {sa.objective:,.1f}/{p_sa:.4f} vs NLP "
                     f"{row['objective']:,.1f}/{row['probability']:.4f}")
    record(8, ok and n_feasible >= 1, f"{n_feasible}/5 SA feasible; " + "; ".join(lines))


def test_c09_lazy_equivalence(case14_setup, eps_hat):
    case, system, model = case14_setup
    N = 100
    scen = sample(model, N, replication_seed(0, 0))
    prob = ChanceProblem(case, scen.W, eps_hat, ALPHA, 0.0, var_omega=model.var_omega, system=system)
    g0 = solve_nominal(case, system).point.g
    t0 = time.perf_counter()
    lazy = solve(prob, g0, config=PenaltyConfig(lazy=True))
    full = solve(prob, g0, config=PenaltyConfig(lazy=False))
    elapsed = time.perf_counter() - t0
    rel = abs(lazy.objective - full.objective) / abs(full.objective)
    total = N * prob.m
    frac = lazy.qp_pairs / total
    record(9, rel <= 1e-5 and frac < 0.10 and elapsed <= 120,
           f"objective lazy {lazy.objective:,.4f} vs full {full.objective:,.4f} (rel {rel:.1e} <= 1e-5), "
           f"|J| = {lazy.qp_pairs}/{total} = {100 * frac:.1f}% (< 10%), {elapsed:.1f}s")


def test_c10_penalty_descent(desk_run):
    report, _ = desk_run
    cfg = PenaltyConfig()
    n_acc = n_rej = 0
    bad = []
    for rep, solves in report.traces.items():
        for trace in solves:
            for rec, nxt in zip(trace, trace[1:] + [None]):
                if rec["accepted"]:
                    n_acc += 1
                    if not rec["ared"] > 0 or (nxt is not None and not nxt["phi"] < rec["phi"]):
                        bad.append((rep, rec["k"], "accepted step did not decrease phi"))
                elif "new_Delta" in rec:
                    n_rej += 1
                    want = cfg.tau1 * min(rec["Delta"], rec["step"])
                    if rec["new_Delta"] != want or (nxt is not None and nxt["Delta"] != want):
                        bad.append((rep, rec["k"], "rejected step radius"))
    record(10, not bad and n_acc > 0,
           f"{n_acc} accepted steps all decrease phi, {n_rej} rejected steps all shrink to "
           f"tau1*min(Delta, |d|); violations: {bad[:3]}")


if __name__ == "__main__":
    import sys
    code = pytest.main([__file__, "-q", "-p", "no:cacheprovider"])
    sys.exit(code)
