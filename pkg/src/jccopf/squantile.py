"""Smooth sample quantile built from the quartic-kernel indicator.

``Gamma_eps(y)`` is 1 for ``y <= -eps``, 0 for ``y >= eps`` and on
``(-eps, eps)`` equals the integrated quartic (biweight) kernel

    gamma(y) = 15/16 * (-u^5/5 + 2u^3/3 - u + 8/15),   u = y / eps,

which glues with the constant branches to second order. The smooth quantile
``Q`` of a vector ``z`` is the root of ``sum_i Gamma_eps(z_i - Q) = N (1 - alpha)``.
Its derivatives follow from implicit differentiation of that identity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "DegenerateQuantileError",
    "QuantileEval",
    "gamma",
    "gamma_derivs",
    "smooth_indicator",
    "solve_quantile",
    "quantile_derivatives",
    "smooth_quantile",
    "psd_project",
    "smooth_cdf",
]


class DegenerateQuantileError(ArithmeticError):
    """No sample lies strictly inside the smoothing window; increase epsilon."""


def _check_eps(eps):
    if not eps > 0:
        raise ValueError(f"smoothing width must be positive, got {eps!r}")


def gamma(eps: float, y):
    """Smooth indicator ``Gamma_eps(y)`` (vectorized)."""
    _check_eps(eps)
    u = np.clip(np.asarray(y, dtype=float) / eps, -1.0, 1.0)
    u2 = u * u
    # dyadic coefficients keep the knots u = 0, +-1/2, +-1 exact
    val = 0.5 - u * (0.9375 - 0.625 * u2 + 0.1875 * u2 * u2)
    return np.where(u <= -1.0, 1.0, np.where(u >= 1.0, 0.0, val))[()]


smooth_indicator = gamma


def gamma_derivs(eps: float, y):
    """``(Gamma, Gamma', Gamma'')`` at ``y``; derivatives vanish outside ``(-eps, eps)``."""
    _check_eps(eps)
    y = np.asarray(y, dtype=float)
    u = np.clip(y / eps, -1.0, 1.0)
    one_m = 1.0 - u * u
    g0 = gamma(eps, y)
    g1 = -15.0 / 16.0 * one_m * one_m / eps
    g2 = 15.0 / 4.0 * u * one_m / eps**2
    return g0, g1, g2


@dataclass(frozen=True)
class QuantileEval:
    """Value, gradient and window-restricted Hessian of the smooth quantile.

    ``hess_window`` is the dense Hessian block over ``window`` (indices with
    ``|z_i - Q| < eps``); all other rows and columns of the full Hessian are
    zero.
    """

    value: float
    grad: np.ndarray
    window: np.ndarray
    hess_window: np.ndarray

    def hessian(self) -> np.ndarray:
        N = len(self.grad)
        H = np.zeros((N, N))
        H[np.ix_(self.window, self.window)] = self.hess_window
        return H


def _target(N: int, alpha: float) -> float:
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha!r}")
    T = N * (1.0 - alpha)
    if not 0.0 < T < N:
        raise ValueError("target N(1 - alpha) falls outside (0, N)")
    return T


def solve_quantile(z, eps: float, alpha: float, *, maxiter: int = 200) -> float:
    """Root ``Q`` of ``sum Gamma_eps(z_i - Q) = N (1 - alpha)``.

    Safeguarded Newton on the bracket ``[min z - eps, max z + eps]``. If the
    root set is an interval (no sample within ``eps`` of it), the left end of
    that interval is returned, mirroring the infimum in the definition of a
    quantile.
    """
    z = np.asarray(z, dtype=float).reshape(-1)
    _check_eps(eps)
    N = len(z)
    T = _target(N, alpha)
    zs = np.sort(z)
    k = int(np.ceil(T - 1e-12 * N))  # rank of the empirical quantile

    def f(Q):
        return gamma(eps, z - Q).sum() - T

    # Integer target with a gap wider than 2 eps: f vanishes on an interval.
    if abs(T - round(T)) <= 1e-12 * N:
        kk = int(round(T))
        left, right = zs[kk - 1] + eps, (zs[kk] - eps if kk < N else np.inf)
        if left <= right and f(left) == 0.0:
            return float(left)

    lo, hi = zs[0] - eps, zs[-1] + eps
    flo, fhi = -T, N - T
    Q = zs[k - 1]
    tol_f = 1e-13 * N
    for _ in range(maxiter):
        fq = f(Q)
        if fq == 0.0:
            return float(Q)
        if fq < 0:
            lo, flo = Q, fq
        else:
            hi, fhi = Q, fq
        if abs(fq) <= tol_f or hi - lo <= 4 * np.finfo(float).eps * max(1.0, abs(lo), abs(hi)):
            break
        slope = -gamma_derivs(eps, z - Q)[1].sum()
        Qn = Q - fq / slope if slope > 0 else np.nan
        if not (lo < Qn < hi):
            # secant on the bracket, then bisection as a last resort
            Qn = lo - flo * (hi - lo) / (fhi - flo)
            if not (lo < Qn < hi) or abs(Qn - Q) < 1e-3 * (hi - lo):
                Qn = 0.5 * (lo + hi)
        Q = Qn
    return float(Q)


def quantile_derivatives(z, eps: float, alpha: float, Q: float) -> QuantileEval:
    """Gradient and Hessian of ``Q(z)`` at a root ``Q``.

    With ``y = z - Q``, ``S = sum Gamma'(y)`` and weights ``w = Gamma'(y) / S``:

        grad = w
        hess = (diag(Gamma'') - Gamma'' w' - w Gamma''' + (sum Gamma'') w w') / S
    """
    z = np.asarray(z, dtype=float).reshape(-1)
    _target(len(z), alpha)
    y = z - Q
    window = np.flatnonzero(np.abs(y) < eps)
    _, g1, g2 = gamma_derivs(eps, y[window])
    S = g1.sum()
    if window.size == 0 or S == 0.0:
        raise DegenerateQuantileError(
            "smooth quantile has no samples inside its window; increase epsilon")
    w = g1 / S
    grad = np.zeros(len(z))
    grad[window] = w
    H = (np.diag(g2) - np.outer(g2, w) - np.outer(w, g2) + g2.sum() * np.outer(w, w)) / S
    return QuantileEval(float(Q), grad, window, 0.5 * (H + H.T))


def smooth_quantile(z, eps: float, alpha: float) -> QuantileEval:
    """:func:`solve_quantile` followed by :func:`quantile_derivatives`."""
    Q = solve_quantile(z, eps, alpha)
    return quantile_derivatives(z, eps, alpha, Q)


def psd_project(H) -> np.ndarray:
    """Nearest PSD matrix in Frobenius norm: negative eigenvalues set to zero."""
    H = np.asarray(H, dtype=float)
    if H.size == 0:
        return H.copy()
    H = 0.5 * (H + H.T)
    try:
        lam, V = np.linalg.eigh(H)
    except np.linalg.LinAlgError as exc:
        raise ArithmeticError(f"eigendecomposition failed: {exc}") from exc
    if lam.min() >= 0:
        return H
    keep = lam > 0
    Vk = V[:, keep]
    out = (Vk * lam[keep]) @ Vk.T
    return 0.5 * (out + out.T)


def smooth_cdf(z, eps: float, t: float) -> float:
    """``(1/N) sum Gamma_eps(z_i - t)``."""
    z = np.asarray(z, dtype=float)
    return float(gamma(eps, z - t).mean())
