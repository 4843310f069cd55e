import numpy as np
import pytest
import scipy.sparse as sp

from jccopf import qp
from jccopf.qp import MatrixPool, QPProblem, lazy_solve, solve

from qp_oracle import enumerate_qp


def random_qp(rng, n=None, m=None, p=None):
    n = n or int(rng.integers(2, 8))
    m = m if m is not None else int(rng.integers(1, 9))
    p = p if p is not None else int(rng.integers(0, min(2, n - 1) + 1))
    L = rng.normal(size=(n, n))
    P = L @ L.T + 0.1 * np.eye(n)
    q = rng.normal(size=n)
    A = rng.normal(size=(p, n))
    x_feas = rng.normal(size=n)
    b = A @ x_feas
    G = rng.normal(size=(m, n))
    h = G @ x_feas + rng.uniform(0, 1, size=m)
    return P, q, A, b, G, h


def test_scalar_lower_bound_row():
    sol = solve(QPProblem([[1.0]], [0.0], A_ineq=[[-1.0]], b_ineq=[-1.0]))
    assert sol.status == qp.OPTIMAL
    assert sol.x[0] == pytest.approx(1.0, abs=1e-9)
    assert sol.z_ineq[0] == pytest.approx(1.0, abs=1e-8)


def test_equality_multiplier():
    sol = solve(QPProblem(np.eye(2), np.zeros(2), A_eq=[[1.0, 1.0]], b_eq=[2.0]))
    np.testing.assert_allclose(sol.x, [1.0, 1.0], atol=1e-9)
    assert sol.y_eq[0] == pytest.approx(-1.0, abs=1e-9)


def test_bounds_only():
    sol = solve(QPProblem(np.eye(3), np.zeros(3), lb=np.full(3, 0.5)))
    np.testing.assert_allclose(sol.x, 0.5, atol=1e-9)
    assert np.all(sol.z_lb > 0.4)


def test_random_qps_against_enumeration():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        P, q, A, b, G, h = random_qp(rng)
        ref = enumerate_qp(P, q, A, b, G, h)
        sol = solve(QPProblem(P, q, A, b, G, h))
        assert sol.status == qp.OPTIMAL
        assert abs(sol.objective - ref[0]) <= 1e-7 * (1 + abs(ref[0]))
        r = sol.residuals
        assert max(r["stationarity"], r["primal"], r["complementarity"]) <= 1e-8
        assert r["duality_gap"] <= 1e-6 * (1 + abs(sol.objective))


def test_lp_and_semidefinite():
    # linear objective with box bounds: optimum at a vertex
    q = np.array([1.0, -2.0, 0.5])
    sol = solve(QPProblem(np.zeros((3, 3)), q, A_eq=[[1, 1, 1]], b_eq=[1.0], lb=np.zeros(3), ub=np.ones(3)))
    np.testing.assert_allclose(sol.x, [0, 1, 0], atol=1e-8)


def test_infeasible_detected():
    prob = QPProblem(np.eye(1), [0.0], A_ineq=[[1.0], [-1.0]], b_ineq=[-1.0, -1.0])
    assert solve(prob).status == qp.INFEASIBLE


def test_warm_start_same_optimum():
    rng = np.random.default_rng(7)
    P, q, A, b, G, h = random_qp(rng, n=6, m=8, p=1)
    cold = solve(QPProblem(P, q, A, b, G, h))
    warm = solve(QPProblem(P, q + 1e-3, A, b, G, h), warm=cold)
    again = solve(QPProblem(P, q + 1e-3, A, b, G, h))
    np.testing.assert_allclose(warm.x, again.x, atol=1e-7)


def test_sparse_rows_accepted():
    rng = np.random.default_rng(9)
    P, q, A, b, G, h = random_qp(rng, n=5, m=6, p=1)
    dense = solve(QPProblem(P, q, A, b, G, h))
    sparse = solve(QPProblem(P, q, A, b, sp.csr_matrix(G), h))
    np.testing.assert_allclose(dense.x, sparse.x, atol=1e-9)


def test_lazy_no_violations_one_round():
    P, q = np.eye(2), np.zeros(2)
    G = np.array([[1.0, 0.0], [0.0, 1.0]])
    h = np.array([5.0, 5.0])
    sol, active = lazy_solve(QPProblem(P, q, A_ineq=G, b_ineq=h), set(), 0.1)
    assert sol.residuals["rounds"] == 1 and active == set()


def test_lazy_redundant_copies():
    P, q = np.eye(2), np.array([-2.0, -2.0])
    G = np.tile([[1.0, 1.0]], (100, 1))
    h = np.ones(100)
    full = solve(QPProblem(P, q, A_ineq=G, b_ineq=h))
    sol, active = lazy_solve(QPProblem(P, q, A_ineq=G, b_ineq=h), set(), 0.1)
    assert len(active) >= 1
    np.testing.assert_allclose(sol.x, full.x, atol=1e-7)


def test_lazy_matches_full_solve():
    rng = np.random.default_rng(11)
    for _ in range(30):
        P, q, A, b, G, h = random_qp(rng, m=int(rng.integers(5, 40)))
        full = solve(QPProblem(P, q, A, b, G, h))
        sol, active = lazy_solve(QPProblem(P, q, A, b, G, h), [0], 0.1)
        np.testing.assert_allclose(sol.x, full.x, atol=1e-7)
        assert len(sol.z_ineq) == len(h)
        assert np.all(G @ sol.x - h <= 1e-7)


def test_lazy_active_set_only_grows():
    rng = np.random.default_rng(1)
    P, q, A, b, G, h = random_qp(rng, n=4, m=30, p=0)
    seen = []

    def select(x, mask):
        seen.append(mask.copy())
        return np.flatnonzero(G @ x - h > -0.1)

    lazy_solve(QPProblem(P, q, A, b, G, h), [], 0.1, select=select)
    for a, b_ in zip(seen, seen[1:]):
        assert np.all(b_ >= a)


def test_lazy_with_external_pool():
    rng = np.random.default_rng(3)
    P, q, A, b, G, h = random_qp(rng, n=5, m=25, p=1)
    pool = MatrixPool(G, h, ids=np.arange(100, 125))
    sol, active = lazy_solve(QPProblem(P, q, A, b), [], 0.1, pool=pool)
    full = solve(QPProblem(P, q, A, b, G, h))
    np.testing.assert_allclose(sol.x, full.x, atol=1e-7)
    assert active <= set(range(100, 125))


def test_problem_validation():
    with pytest.raises(ValueError):
        QPProblem(np.eye(2), np.zeros(2), A_eq=[[1.0, 1.0]], b_eq=[1.0, 2.0])
    with pytest.raises(ValueError):
        QPProblem(np.eye(2), np.zeros(2), lb=[1.0, 1.0], ub=[0.0, 2.0])
    assert not QPProblem(-np.eye(2), np.zeros(2)).check_psd()


def test_dump_triplets():
    text = qp.dump_triplets(QPProblem(np.eye(2), [1.0, 2.0], A_eq=[[1.0, 1.0]], b_eq=[1.0]))
    assert text.startswith("n 2\nP 2 2 2\n")
