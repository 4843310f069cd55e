"""Gaussian net-load fluctuation model, scenario sampling and out-of-sample risk.

All randomness goes through numpy's counter-based ``Philox`` generator. Normal
variates are produced by inverse-CDF transformation of uniforms, and samples
are generated in fixed-size blocks with one substream per block, so the first
``n`` rows of a sample never depend on how many rows were requested or how
many workers produced them.
"""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.special import ndtri

from .cons import ConstraintSystem, DispatchPoint
from .netcase import GridCase, NumericalError

__all__ = [
    "ScenarioModel",
    "ScenarioSet",
    "build_covariance",
    "sample",
    "rng",
    "OutOfSampleEvaluator",
    "out_of_sample_probability",
    "oos_seed",
    "replication_seed",
    "BLOCK",
]

log = logging.getLogger(__name__)

BLOCK = 1 << 15
_OOS_XOR = 0x6A09E667F3BCC908


def rng(seed, *key) -> np.random.Generator:
    """Philox generator for ``seed`` and an optional substream key."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def replication_seed(seed: int, r: int, stream: int = 0) -> int:
    """Independent 63-bit seed for replication ``r`` of master ``seed``.

    ``stream`` separates uses of the same master seed (experiment
    replications, calibration replications, ...).
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream), int(r)))
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def oos_seed(seed: int) -> int:
    """Seed of the evaluation sample paired with training seed ``seed``."""
    return int(seed) ^ _OOS_XOR


def _std_normal(gen: np.random.Generator, shape) -> np.ndarray:
    # random() returns k / 2**53; the half-ulp shift keeps u strictly inside (0, 1)
    u = gen.random(shape) + 2.0**-54
    return ndtri(u)


@dataclass(frozen=True, eq=False)
class ScenarioModel:
    """Zero-mean Gaussian model for bus net-load fluctuations."""

    cov: np.ndarray
    zeta: float = 0.0
    seed: int = 0

    def __post_init__(self):
        cov = np.array(self.cov, dtype=float)
        if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
            raise ValueError("covariance must be square")
        cov = 0.5 * (cov + cov.T)
        cov.setflags(write=False)
        object.__setattr__(self, "cov", cov)

    @property
    def n_bus(self) -> int:
        return self.cov.shape[0]

    @cached_property
    def var_omega(self) -> float:
        """Variance of the aggregate fluctuation, ``1' Sigma 1``."""
        return float(self.cov.sum())

    @cached_property
    def support(self) -> np.ndarray:
        return np.flatnonzero(np.diag(self.cov) > 0)

    @cached_property
    def factor(self) -> np.ndarray:
        """``L`` with ``L L' = Sigma`` restricted to :attr:`support`."""
        S = self.cov[np.ix_(self.support, self.support)]
        if S.size == 0:
            return S
        try:
            return np.linalg.cholesky(S)
        except np.linalg.LinAlgError:
            lam, V = np.linalg.eigh(S)
            if lam.min() < 0:
                warnings.warn(
                    f"covariance is not positive definite (min eigenvalue {lam.min():.3g}); "
                    "clamping negative eigenvalues to zero",
                    RuntimeWarning,
                    stacklevel=2,
                )
            return V * np.sqrt(np.clip(lam, 0.0, None))

    def draw_block(self, seed, block: int, rows: int) -> np.ndarray:
        W = np.zeros((rows, self.n_bus))
        sup = self.support
        if len(sup):
            Z = _std_normal(rng(seed, block), (rows, len(sup)))
            W[:, sup] = Z @ self.factor.T
        return W


@dataclass(frozen=True, eq=False)
class ScenarioSet:
    W: np.ndarray
    seed: int = 0
    omega: np.ndarray = field(init=False)

    def __post_init__(self):
        W = np.atleast_2d(np.array(self.W, dtype=float))
        W.setflags(write=False)
        object.__setattr__(self, "W", W)
        om = W.sum(axis=1)
        om.setflags(write=False)
        object.__setattr__(self, "omega", om)

    @property
    def N(self) -> int:
        return self.W.shape[0]

    def subset(self, idx) -> "ScenarioSet":
        return ScenarioSet(self.W[idx], self.seed)

    def save(self, path) -> None:
        """Write ``.npz`` (binary) or ``.csv`` (text with a ``# N,n_bus,seed`` header)."""
        path = Path(path)
        if path.suffix == ".npz":
            np.savez(path, W=self.W, seed=np.int64(self.seed))
        else:
            header = f"N={self.N},n_bus={self.W.shape[1]},seed={self.seed}"
            np.savetxt(path, self.W, delimiter=",", header=header, fmt="%.17g")

    @classmethod
    def load(cls, path) -> "ScenarioSet":
        path = Path(path)
        if path.suffix == ".npz":
            with np.load(path) as f:
                return cls(f["W"], int(f["seed"]))
        with open(path) as fh:
            header = fh.readline().lstrip("#").strip()
        meta = dict(item.split("=") for item in header.split(","))
        W = np.loadtxt(path, delimiter=",", ndmin=2)
        n, nb = int(meta["N"]), int(meta["n_bus"])
        if W.shape != (n, nb):
            raise ValueError(f"CSV body has shape {W.shape}, header says {(n, nb)}")
        return cls(W, int(meta["seed"]))


def build_covariance(case: GridCase, zeta: float, seed: int) -> ScenarioModel:
    """Random correlation structure scaled so that ``Sigma_ii = zeta * d_i``.

    ``A`` has i.i.d. U[-1, 1] entries, ``Ahat = A A'`` and
    ``Sigma_ij = zeta * Ahat_ij / sqrt(Ahat_ii Ahat_jj) * sqrt(d_i d_j)``.
    Buses without load (or with negative load) get zero rows and columns.
    """
    if zeta < 0:
        raise ValueError("zeta must be non-negative")
    nb = case.n_bus
    A = rng(seed).uniform(-1.0, 1.0, size=(nb, nb))
    Ahat = A @ A.T
    d = np.clip(case.load, 0.0, None)
    diag = np.diag(Ahat)
    if np.any((diag <= 0) & (d > 0)):
        raise NumericalError("degenerate random factor: zero diagonal at a loaded bus")
    s = np.zeros(nb)
    pos = d > 0
    s[pos] = np.sqrt(d[pos] / diag[pos])
    cov = zeta * (s[:, None] * Ahat * s[None, :])
    idx = np.flatnonzero(pos)
    cov[idx, idx] = zeta * d[idx]  # exact diagonal
    return ScenarioModel(cov, zeta, seed)


def sample(model: ScenarioModel, N: int, seed) -> ScenarioSet:
    """Draw ``N`` i.i.d. fluctuation vectors ``omega ~ N(0, Sigma)``."""
    if N < 1:
        raise ValueError("N must be at least 1")
    parts = []
    for b, start in enumerate(range(0, N, BLOCK)):
        parts.append(model.draw_block(seed, b, min(BLOCK, N - start)))
    return ScenarioSet(np.vstack(parts), seed)


class OutOfSampleEvaluator:
    """Monte Carlo estimate of ``P(C(g, beta; omega) <= tol)`` on a fixed fresh sample.

    The sample is streamed in blocks; block data is cached as long as the cache
    stays under ``cache_bytes`` so repeated evaluations (e.g. inside a tuning
    loop) only pay for the constraint arithmetic.
    """

    def __init__(self, system: ConstraintSystem, model: ScenarioModel, n: int, seed,
                 tol: float = 1e-6, workers: int = 1, cache_bytes: float = 256e6):
        if n < 1:
            raise ValueError("n must be at least 1")
        self.system = system
        self.model = model
        self.n = int(n)
        self.seed = seed
        self.tol = tol
        self.workers = max(1, int(workers))
        per_row = 8 * (system.n_flow + 1)
        self._cache: dict[int, tuple[np.ndarray, np.ndarray]] | None = (
            {} if self.n * per_row <= cache_bytes else None
        )

    def _block(self, b: int):
        if self._cache is not None and b in self._cache:
            return self._cache[b]
        rows = min(BLOCK, self.n - b * BLOCK)
        W = self.model.draw_block(self.seed, b, rows)
        data = (W.sum(axis=1), self.system.flow_noise(W))
        if self._cache is not None:
            self._cache[b] = data
        return data

    def _count(self, point: DispatchPoint, b: int) -> int:
        omega, fn = self._block(b)
        C = self.system.scenario_max(point, omega, fn)
        return int(np.count_nonzero(C <= self.tol))

    def probability(self, point: DispatchPoint) -> float:
        nblocks = -(-self.n // BLOCK)
        if self.workers == 1:
            hits = sum(self._count(point, b) for b in range(nblocks))
        else:
            with ThreadPoolExecutor(self.workers) as ex:
                hits = sum(ex.map(lambda b: self._count(point, b), range(nblocks)))
        return hits / self.n


def out_of_sample_probability(point: DispatchPoint, case: GridCase | ConstraintSystem,
                              model: ScenarioModel, N_oos: int, seed: int,
                              tol: float = 1e-6, workers: int = 1) -> float:
    """Fraction of ``N_oos`` fresh scenarios with every constraint satisfied.

    ``seed`` is the training seed; the evaluation sample is drawn from the
    separate stream :func:`oos_seed` so the two never coincide. A scenario
    counts as satisfied when its largest constraint value is ``<= tol`` (p.u.),
    which absorbs solver round-off on constraints that hold with equality.
    """
    system = case if isinstance(case, ConstraintSystem) else ConstraintSystem(case)
    ev = OutOfSampleEvaluator(system, model, N_oos, oos_seed(seed), tol=tol, workers=workers,
                              cache_bytes=0)
    return ev.probability(point)
