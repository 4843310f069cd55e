import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jccopf import build_ptdf, builtin_case, load_case, parse_matpower
from jccopf.netcase import (GridCase, ParseError, UnsupportedFeatureError, ValidationError,
                            nominal_injection, to_matpower)

from conftest import RING3


def test_ring3_counts(ring3):
    assert (ring3.n_bus, ring3.n_line, ring3.n_gen) == (3, 3, 2)
    assert ring3.ref_bus == 2
    np.testing.assert_allclose(ring3.load, [0.0, 0.5, 1.0])


def test_case14_counts(case14):
    assert (case14.n_bus, case14.n_line, case14.n_gen) == (14, 20, 5)
    assert np.all(np.isfinite(case14.line_rate))


def test_cubic_gencost_rejected():
    text = RING3.replace("2  0  0  3  0.01  10  0;", "2  0  0  4  1  0.01  10  0;")
    text = text.replace("2  0  0  3  0.02  20  0;", "2  0  0  4  1  0.02  20  0;")
    with pytest.raises(UnsupportedFeatureError):
        parse_matpower(text)


def test_piecewise_gencost_rejected():
    text = RING3.replace("2  0  0  3  0.01  10  0;", "1  0  0  1  0  100  0;")
    with pytest.raises(UnsupportedFeatureError):
        parse_matpower(text)


def test_missing_block_and_bad_bus():
    with pytest.raises(ParseError):
        parse_matpower(RING3.replace("mpc.baseMVA = 100.0;", ""))
    with pytest.raises(ParseError):
        parse_matpower(RING3.replace("1  3  0  1  0  150", "1  9  0  1  0  150"))


def test_disconnected_network_rejected():
    text = RING3.replace("1  2  0  1  0  150  0  0  0  0  1", "1  2  0  1  0  150  0  0  0  0  0")
    text = text.replace("2  3  0  1  0  150  0  0  0  0  1", "2  3  0  1  0  150  0  0  0  0  0")
    with pytest.raises(ValidationError):
        parse_matpower(text)


def test_zero_rate_is_unlimited():
    text = RING3.replace("1  2  0  1  0  150", "1  2  0  1  0  0")
    case = parse_matpower(text)
    assert np.isinf(case.line_rate[0])
    np.testing.assert_array_equal(case.limited_lines, [1, 2])


def test_ring3_ptdf_hand_solve(ring3):
    # +1 at bus 1, -1 at bus 3: two thirds flow directly, one third around
    ptdf = build_ptdf(ring3)
    f = ptdf.flows([1.0, 0.0, -1.0])
    np.testing.assert_allclose(f, [1 / 3, 1 / 3, 2 / 3], atol=1e-12)
    np.testing.assert_array_equal(ptdf.flows(np.zeros(3)), 0.0)


def test_ptdf_slack_invariance(ring3):
    p = np.array([1.0, 0.0, -1.0])
    f3 = build_ptdf(ring3, slack=2).flows(p)
    f2 = build_ptdf(ring3, slack=1).flows(p)
    np.testing.assert_allclose(f2, f3, atol=1e-9)


def _angle_flows(case, p):
    """Oracle: solve B theta = p with the reference angle fixed, then b (theta_f - theta_t)."""
    nb, nl = case.n_bus, case.n_line
    A = np.zeros((nl, nb))
    A[np.arange(nl), case.line_from] = 1.0
    A[np.arange(nl), case.line_to] = -1.0
    b = 1.0 / case.line_x
    B = A.T @ (b[:, None] * A)
    keep = [i for i in range(nb) if i != case.ref_bus]
    theta = np.zeros(nb)
    theta[keep] = np.linalg.solve(B[np.ix_(keep, keep)], p[keep])
    return b * (A @ theta)


@pytest.mark.parametrize("name", ["case14", "case57", "case118"])
def test_ptdf_matches_angle_solution(name):
    case = builtin_case(name)
    rng = np.random.default_rng(0)
    ptdf = build_ptdf(case)
    for _ in range(5):
        p = rng.standard_normal(case.n_bus)
        p -= p.mean()
        np.testing.assert_allclose(ptdf.flows(p), _angle_flows(case, p), atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=13, max_size=13), st.integers(0, 13))
def test_ptdf_slack_invariance_case14(vals, slack):
    case = builtin_case("case14")
    p = np.array(vals + [0.0])
    p -= p.mean()
    f_ref = build_ptdf(case).flows(p)
    np.testing.assert_allclose(build_ptdf(case, slack=slack).flows(p), f_ref, atol=1e-9)


def test_nominal_injection(ring3, case14):
    zero = GridCase.from_dict({**ring3.to_dict(), "load": [0.0, 0.0, 0.0]})
    np.testing.assert_array_equal(nominal_injection(zero, np.zeros(2)), 0.0)
    balanced = GridCase.from_dict({**ring3.to_dict(), "load": [0.7, 0.3, 0.0]})
    np.testing.assert_allclose(nominal_injection(balanced, [0.7, 0.3]), 0.0)
    p = nominal_injection(case14, case14.gen_pg)
    assert p.sum() == pytest.approx(case14.gen_pg.sum() - case14.load.sum(), abs=1e-12)
    with pytest.raises(ValueError):
        nominal_injection(case14, np.zeros(3))


@pytest.mark.parametrize("name", ["case14", "case57", "case118"])
def test_matpower_round_trip(name):
    case = builtin_case(name)
    again = parse_matpower(to_matpower(case), name=name)
    assert case.equals(again, rtol=1e-12)
    assert parse_matpower(to_matpower(again), name=name).equals(again)


def test_json_round_trip(tmp_path, case14):
    path = tmp_path / "c.json"
    path.write_text(case14.to_json())
    assert load_case(path).equals(case14)


def test_cost_units(ring3):
    # 0.01 $/MW^2h at 100 MW plus 10 $/MWh at 100 MW
    g = np.array([1.0, 0.0])
    assert ring3.cost(g) == pytest.approx(0.01 * 100**2 + 10 * 100)
