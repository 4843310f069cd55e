"""Joint constraint vector c(g, beta; omega), its scenario maximum, and the empirical cdf.

Under the affine balancing policy ``g(omega) = g - beta * Omega`` every
constraint is affine in ``(g, beta)`` for a fixed scenario:

    c_j(g, beta; omega_s) = a_j'g + Omega_s * b_j'beta + k_j + e_j'omega_s

so the gradient with respect to ``(g, beta)`` is ``(a_j, Omega_s * b_j)``.
Only ``a``, ``b``, ``k`` and the flow sensitivities are stored; per-scenario
gradients are never materialized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .netcase import GridCase, PTDFMatrix, build_ptdf

__all__ = [
    "DispatchPoint",
    "ConstraintSystem",
    "ScenarioMaxVector",
    "BoundScenarios",
    "eval_c",
    "eval_CN",
    "violation_vector",
    "empirical_cdf",
]


@dataclass(frozen=True)
class DispatchPoint:
    g: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        g = np.array(self.g, dtype=float).reshape(-1)
        beta = np.array(self.beta, dtype=float).reshape(-1)
        if g.shape != beta.shape:
            raise ValueError("g and beta must have the same length")
        if not (np.all(np.isfinite(g)) and np.all(np.isfinite(beta))):
            raise ValueError("dispatch point has non-finite entries")
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "beta", beta)

    @property
    def x(self) -> np.ndarray:
        return np.concatenate([self.g, self.beta])

    @classmethod
    def from_x(cls, x) -> "DispatchPoint":
        x = np.asarray(x, dtype=float)
        n = len(x) // 2
        return cls(x[:n], x[n:])

    def step(self, delta) -> "DispatchPoint":
        return DispatchPoint.from_x(self.x + np.asarray(delta))


@dataclass(frozen=True)
class ScenarioMaxVector:
    values: np.ndarray
    argmax: np.ndarray
    ties: np.ndarray  # True where the maximum is attained by more than one row


class ConstraintSystem:
    """Constraint rows ``[upper flows; lower flows; upper gen; lower gen]``.

    Only lines with a finite rating contribute flow rows, so
    ``m = 2 * |limited lines| + 2 * |G|``.
    """

    def __init__(self, case: GridCase, ptdf: PTDFMatrix | None = None):
        self.case = case
        self.ptdf = ptdf if ptdf is not None else build_ptdf(case)
        lim = case.limited_lines
        self.lines = lim
        Phi = self.ptdf.matrix[lim]
        self.flow_ptdf = Phi  # sensitivity of limited-line flows to bus injections
        PG = Phi @ case.gen_map
        fub = case.line_rate[lim]
        ng = case.n_gen
        eye = np.eye(ng)
        self.n_flow = len(lim)
        self.a = np.vstack([PG, -PG, eye, -eye])
        self.b = np.vstack([-PG, PG, -eye, eye])
        base_flow = -Phi @ case.load
        self.k = np.concatenate([base_flow - fub, -fub - base_flow, -case.gen_pmax, case.gen_pmin])
        self.f_ub = fub
        self.g_lb = case.gen_pmin
        self.g_ub = case.gen_pmax
        for arr in (self.a, self.b, self.k):
            arr.setflags(write=False)

    @property
    def m(self) -> int:
        return len(self.k)

    @property
    def n_gen(self) -> int:
        return self.case.n_gen

    def row_labels(self) -> list[str]:
        ids = self.case.bus_ids
        labels = []
        for side in ("ub", "lb"):
            for l in self.lines:
                labels.append(f"flow_{side}[{ids[self.case.line_from[l]]}-{ids[self.case.line_to[l]]}]")
        for side in ("ub", "lb"):
            labels += [f"gen_{side}[{i}]" for i in range(self.n_gen)]
        return labels

    def flow_noise(self, W) -> np.ndarray:
        """Flow response ``Phi_L @ omega`` for each scenario row of ``W``."""
        return np.asarray(W) @ self.flow_ptdf.T

    def noise_rows(self, flow_noise) -> np.ndarray:
        """Expand per-scenario flow noise to the full ``N x m`` constraint offset."""
        N = flow_noise.shape[0]
        zeros = np.zeros((N, 2 * self.n_gen))
        return np.hstack([flow_noise, -flow_noise, zeros])

    def bind(self, W, omega=None) -> "BoundScenarios":
        W = np.atleast_2d(np.asarray(W, dtype=float))
        omega = W.sum(axis=1) if omega is None else np.asarray(omega, dtype=float)
        return BoundScenarios(self, omega, self.flow_noise(W))

    def values(self, point: DispatchPoint, omega, flow_noise) -> np.ndarray:
        """``N x m`` matrix of constraint values."""
        base = self.a @ point.g + self.k
        slope = self.b @ point.beta
        out = base[None, :] + np.asarray(omega)[:, None] * slope[None, :]
        nf = self.n_flow
        out[:, :nf] += flow_noise
        out[:, nf:2 * nf] -= flow_noise
        return out

    def scenario_max(self, point: DispatchPoint, omega, flow_noise) -> np.ndarray:
        """Scenario maxima without materializing all rows for the generator block."""
        base = self.a @ point.g + self.k
        slope = self.b @ point.beta
        omega = np.asarray(omega)
        nf = self.n_flow
        best = np.full(len(omega), -np.inf)
        if nf:
            up = base[:nf] + omega[:, None] * slope[:nf] + flow_noise
            lo = base[nf:2 * nf] + omega[:, None] * slope[nf:2 * nf] - flow_noise
            best = np.maximum(up.max(axis=1), lo.max(axis=1))
        gen = base[2 * nf:] + omega[:, None] * slope[2 * nf:]
        if gen.shape[1]:
            best = np.maximum(best, gen.max(axis=1))
        return best

    def gradient(self, j: int, omega_s: float) -> np.ndarray:
        return np.concatenate([self.a[j], omega_s * self.b[j]])


@dataclass(frozen=True)
class BoundScenarios:
    """A constraint system paired with a fixed scenario sample."""

    system: ConstraintSystem
    omega: np.ndarray
    flow_noise: np.ndarray

    @property
    def N(self) -> int:
        return len(self.omega)

    def values(self, point: DispatchPoint) -> np.ndarray:
        return self.system.values(point, self.omega, self.flow_noise)

    def row(self, point: DispatchPoint, s: int) -> np.ndarray:
        return self.system.values(point, self.omega[s:s + 1], self.flow_noise[s:s + 1])[0]


def eval_c(bound: BoundScenarios, point: DispatchPoint, s: int) -> np.ndarray:
    """Constraint vector for scenario ``s``."""
    return bound.row(point, s)


def eval_CN(bound: BoundScenarios, point: DispatchPoint) -> ScenarioMaxVector:
    """Per-scenario maximum over the rows; ties break toward the lowest row index."""
    vals = bound.values(point)
    idx = np.argmax(vals, axis=1)
    best = vals[np.arange(len(idx)), idx]
    ties = (vals == best[:, None]).sum(axis=1) > 1
    return ScenarioMaxVector(best, idx, ties)


def violation_vector(case: GridCase, point: DispatchPoint, q: float) -> np.ndarray:
    """``(sum g - sum d, sum beta - 1, max(0, q))``."""
    return np.array([point.g.sum() - case.load.sum(), point.beta.sum() - 1.0, max(0.0, q)])


def empirical_cdf(values, t: float) -> float:
    values = np.asarray(values)
    return float(np.count_nonzero(values <= t)) / len(values)
