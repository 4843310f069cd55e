import numpy as np
import pytest
from scipy.stats import norm

from jccopf import ConstraintSystem, DispatchPoint, ScenarioModel, ScenarioSet, build_covariance, sample
from jccopf.netcase import GridCase
from jccopf.stochastic import (OutOfSampleEvaluator, oos_seed, out_of_sample_probability,
                               replication_seed)


def _one_bus(load=2.0, rate=np.inf, pmax=10.0):
    return GridCase(bus_ids=[1, 2], line_from=[0], line_to=[1], line_x=[1.0], line_rate=[rate],
                    gen_bus=[0], gen_pmin=[0.0], gen_pmax=[pmax], cost_quad=[0.0], cost_lin=[1.0],
                    cost_const=[0.0], load=[load, 0.0])


def test_zero_zeta(case14):
    model = build_covariance(case14, 0.0, 1)
    assert np.all(model.cov == 0) and model.var_omega == 0
    scen = sample(model, 50, 1)
    assert np.all(scen.W == 0) and np.all(scen.omega == 0)


def test_single_load_covariance():
    model = build_covariance(_one_bus(load=2.0), 0.1, 5)
    np.testing.assert_allclose(model.cov, [[0.2, 0.0], [0.0, 0.0]], rtol=1e-15)


def test_case14_covariance(model14, case14):
    assert np.linalg.eigvalsh(model14.cov).min() >= -1e-12
    np.testing.assert_allclose(np.diag(model14.cov), 0.1 * case14.load, rtol=1e-14, atol=0)
    # zero-load buses carry no fluctuation
    zero = case14.load == 0
    assert np.all(model14.cov[zero] == 0) and np.all(model14.cov[:, zero] == 0)


def test_unit_variance_sample():
    scen = sample(ScenarioModel(np.eye(1)), 100_000, 11)
    assert 0.97 <= scen.W[:, 0].var() <= 1.03


def test_sampling_is_deterministic(model14):
    a = sample(model14, 1000, 42)
    b = sample(model14, 1000, 42)
    assert np.array_equal(a.W, b.W)
    assert not np.array_equal(a.W, sample(model14, 1000, 43).W)


def test_sample_prefix_is_stable(model14):
    # blocks are keyed by index, so a longer sample extends a shorter one
    a = sample(model14, 100, 9)
    b = sample(model14, 40_000, 9)
    assert np.array_equal(a.W, b.W[:100])


def test_var_omega_matches_sample(model14):
    scen = sample(model14, 1_000_000, 123)
    v = model14.var_omega
    se = v * np.sqrt(2.0 / scen.N)
    assert abs(scen.omega.var() - v) <= 3 * se


def test_scenario_set_round_trip(tmp_path, model14):
    scen = sample(model14, 20, 4)
    scen.save(tmp_path / "s.csv")
    back = ScenarioSet.load(tmp_path / "s.csv")
    assert np.array_equal(back.W, scen.W) and back.seed == scen.seed


def test_seed_streams_are_distinct():
    assert oos_seed(7) != 7
    seeds = {replication_seed(0, r, s) for r in range(50) for s in range(3)}
    assert len(seeds) == 150
    assert replication_seed(5, 3) == replication_seed(5, 3)


def test_infinite_limits_give_probability_one():
    case = _one_bus(pmax=np.inf)
    model = build_covariance(case, 0.1, 0)
    point = DispatchPoint([2.0], [1.0])
    assert out_of_sample_probability(point, case, model, 10_000, 0) == 1.0


def test_deterministic_violation_gives_zero(case14, model14):
    system = ConstraintSystem(case14)
    g = np.array([2.0, 0.59 + 0.1, 0.0, 0.0, 0.0])
    g[0] = case14.load.sum() - g[1]
    point = DispatchPoint(g, [1.0, 0, 0, 0, 0])  # gen 1 above its limit with beta = 0
    assert out_of_sample_probability(point, system, model14, 10_000, 0) == 0.0


def _toy_system(x):
    """One constraint ``x1 w1 + x2 w2 - 1 <= 0`` with standard normal ``w``.

    Modelled as a two-bus line whose flow is the weighted noise: bus 1 and 2
    carry the fluctuations and the line limit is 1.
    """
    x = np.asarray(x, dtype=float)

    class ToySystem:
        n_flow = 1

        def flow_noise(self, W):
            return W @ x[:, None]

        def scenario_max(self, point, omega, fn):
            return fn[:, 0] - 1.0

    return ToySystem()


def test_toy_probability_at_analytic_radius():
    r = 1.0 / norm.ppf(0.95)
    x = np.array([r, r]) / np.sqrt(2.0)
    ev = OutOfSampleEvaluator(_toy_system(x), ScenarioModel(np.eye(2)), 1_000_000, oos_seed(0), tol=0.0)
    assert abs(ev.probability(DispatchPoint([0.0], [0.0])) - 0.95) <= 0.002


def test_probability_monotone_in_limits(case14, model14):
    from jccopf.baselines import solve_nominal
    point = solve_nominal(case14).point
    probs = []
    for scale in (1.2, 1.0, 0.9, 0.8):
        tighter = GridCase.from_dict({**case14.to_dict(),
                                      "line_rate": list(case14.line_rate * scale)})
        probs.append(out_of_sample_probability(point, tighter, model14, 20_000, 3))
    assert all(a >= b for a, b in zip(probs, probs[1:]))


def test_evaluator_matches_function(system14, model14, case14):
    from jccopf.baselines import solve_nominal
    point = solve_nominal(case14).point
    ev = OutOfSampleEvaluator(system14, model14, 50_000, oos_seed(2))
    assert ev.probability(point) == out_of_sample_probability(point, system14, model14, 50_000, 2)
    ev2 = OutOfSampleEvaluator(system14, model14, 50_000, oos_seed(2), workers=2)
    assert ev2.probability(point) == ev.probability(point)
