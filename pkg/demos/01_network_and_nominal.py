"""Load the 14-bus system, inspect its PTDF and solve the deterministic dispatch.

Run with ``python demos/01_network_and_nominal.py``.
"""

import numpy as np

from jccopf import ConstraintSystem, build_covariance, build_ptdf, builtin_case
from jccopf.baselines import solve_nominal
from jccopf.netcase import nominal_injection
from jccopf.stochastic import out_of_sample_probability

case = builtin_case("case14")
print(f"{case.name}: {case.n_bus} buses, {case.n_line} lines, {case.n_gen} generators")
print(f"total load {case.load.sum() * case.base_mva:.1f} MW")

# Line flows are linear in bus injections. The slack column is zero.
ptdf = build_ptdf(case)
print("PTDF shape", ptdf.matrix.shape, "slack bus position", ptdf.slack)

# Cheapest dispatch that respects line and generator limits with no fluctuation.
nominal = solve_nominal(case)
print(f"nominal cost {nominal.objective:,.2f} $/h")
print("dispatch (MW):", np.round(nominal.point.g * case.base_mva, 2))

flows = ptdf.flows(nominal_injection(case, nominal.point.g))
loading = np.abs(flows) / case.line_rate
print(f"most loaded line at {100 * loading.max():.1f}% of its rating")

# The same dispatch under Gaussian net-load fluctuations: generator 1 absorbs
# every imbalance and some scenarios overload a line or a unit.
system = ConstraintSystem(case)
model = build_covariance(case, zeta=0.1, seed=3)
p = out_of_sample_probability(nominal.point, system, model, 200_000, seed=0)
print(f"probability that every limit holds: {p:.4f}")
