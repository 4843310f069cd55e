"""Joint chance-constrained dispatch on the 14-bus system.

Calibrates the smoothing width, tunes the quantile right-hand side for one
training sample of 100 scenarios, and compares the result with the nominal
dispatch and the scenario approach on a fresh sample of 10^6 scenarios.
Takes roughly half a minute.
"""

import logging

from jccopf import ConstraintSystem, build_covariance, builtin_case, sample
from jccopf.baselines import solve_nominal, solve_sa
from jccopf.sl1qp import ChanceProblem
from jccopf.stochastic import OutOfSampleEvaluator, out_of_sample_probability, replication_seed
from jccopf.tuning import calibrate_epsilon, scale_epsilon, tune_t, tuning_seed

logging.basicConfig(level=logging.WARNING)

alpha, N = 0.05, 100
case = builtin_case("case14")
system = ConstraintSystem(case)
model = build_covariance(case, zeta=0.1, seed=3)

eps_hat = calibrate_epsilon(case, model, alpha, N_hat=100, M_hat=10, seed=0, system=system)
eps = scale_epsilon(eps_hat, 100, N)
print(f"calibrated eps_hat={eps_hat:.4f}, eps for N={N}: {eps:.4f}")

seed = replication_seed(0, 1)
scen = sample(model, N, seed)
problem = ChanceProblem(case, scen.W, eps, alpha, var_omega=model.var_omega, system=system)
evaluator = OutOfSampleEvaluator(system, model, 100_000, tuning_seed(seed))
tuned = tune_t(problem, evaluator)
for t, p in tuned.summary():
    print(f"  t={t:+.5f}  p={p:.4f}")

rows = [("NLP", tuned.best.report.point, tuned.best.objective)]
nominal = solve_nominal(case, system)
rows.append(("nominal", nominal.point, nominal.objective))
sa = solve_sa(case, model, None, seed, system=system)
if sa.feasible:
    rows.append((f"SA ({sa.n_scenarios} scenarios)", sa.point, sa.objective))
else:
    print(f"scenario approach: {sa.status}")

print(f"\n{'method':24s} {'cost ($/h)':>12s} {'probability':>12s}")
for name, point, cost in rows:
    p = out_of_sample_probability(point, system, model, 1_000_000, seed)
    print(f"{name:24s} {cost:12,.1f} {p:12.4f}")
