"""The smoothed quantile on a two-dimensional Gaussian constraint.

For ``x1 w1 + x2 w2 - 1 <= 0`` with standard normal ``w`` the chance
constraint at level 0.95 holds exactly when ``|x| <= 1 / 1.6449``. This demo
recovers that radius from samples by solving ``Q_eps = 0`` along the ray
``x1 = x2``.
"""

import numpy as np
from scipy.optimize import brentq
from scipy.stats import norm

from jccopf.squantile import gamma, smooth_quantile, solve_quantile
from jccopf.stochastic import rng
from jccopf.tuning import scale_epsilon

alpha = 0.05
eps = 1.0
print("Gamma at -eps, 0, eps/2, eps:", [float(gamma(eps, y)) for y in (-1.0, 0.0, 0.5, 1.0)])

# Along the ray the constraint value is r * xi - 1 with xi standard normal.
W = rng(7).standard_normal((10_000, 2))
xi = W.sum(axis=1) / np.sqrt(2.0)
exact = 1.0 / norm.ppf(1 - alpha)

for eps_hat in (0.05, 0.5, 1.2):
    e = scale_epsilon(eps_hat, 100, len(xi))
    r = brentq(lambda r: solve_quantile(r * xi - 1.0, e, alpha), 1e-3, 50.0, xtol=1e-12)
    print(f"eps_hat={eps_hat:4.2f} (eps={e:.4f}): radius {r:.4f}  analytic {exact:.4f}  "
          f"p(radius)={norm.cdf(1 / r):.4f}")

# The gradient weights are nonnegative, sum to one and vanish outside the window.
q = smooth_quantile(0.6 * xi - 1.0, 0.05, alpha)
print(f"Q={q.value:.4f}, {len(q.window)} samples inside the window, weights sum {q.grad.sum():.15f}")
