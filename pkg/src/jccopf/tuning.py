"""Choosing the smoothing width ``eps`` and the quantile right-hand side ``t``.

Both searches are driven by an out-of-sample probability oracle ``p(.)``:

* ``eps`` is calibrated at a reference sample size by bisection (larger
  widths are more conservative), repeated over independent samples, keeping
  the largest result. Other sample sizes use the ``N^(-1/3)`` rule.
* ``t`` is tuned per sample by bracketing and bisection (smaller ``t`` is
  more conservative); the best feasible solution seen is returned.
"""

from __future__ import annotations

import datetime as _dt
import json
import logging
import math
import time
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .baselines import solve_nominal
from .cons import ConstraintSystem
from .netcase import GridCase
from .sl1qp import ChanceProblem, PenaltyConfig, SolveReport, solve
from .stochastic import OutOfSampleEvaluator, ScenarioModel, oos_seed, replication_seed, sample

__all__ = [
    "EpsilonSchedule",
    "SearchStep",
    "TuneStep",
    "TuneResult",
    "CalibrationError",
    "search_epsilon",
    "search_rhs",
    "scale_epsilon",
    "calibrate_epsilon",
    "tune_t",
    "tuning_seed",
    "save_calibration",
    "load_calibration",
]

log = logging.getLogger(__name__)

CALIBRATION_STREAM = 1


class CalibrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class EpsilonSchedule:
    eps_hat: float
    N_hat: int = 100
    M_hat: int = 10
    tau_eps: float = 1e-3

    def __post_init__(self):
        if not self.eps_hat > 0:
            raise ValueError("eps_hat must be positive")

    def eps(self, N: int) -> float:
        return scale_epsilon(self.eps_hat, self.N_hat, N)


@dataclass
class SearchStep:
    value: float
    p: float
    payload: object = None


def tuning_seed(seed: int) -> int:
    """Seed of the evaluation sample used inside the tuning loops."""
    return oos_seed(seed) + 1


def scale_epsilon(eps_hat: float, N_hat: int, N: int) -> float:
    """``N_hat^(1/3) * eps_hat / N^(1/3)``."""
    if N < 1 or N_hat < 1:
        raise ValueError("sample sizes must be positive")
    return eps_hat * (N_hat / N) ** (1.0 / 3.0)


def search_epsilon(p_of: Callable[[float], tuple[float, object]], target: float, eps0: float,
                   tau: float = 1e-3, max_iter: int = 30, max_doublings: int = 10):
    """Bisection on the smoothing width for one sample.

    ``p_of(eps)`` returns ``(probability, payload)``. A probability above
    ``target`` means the width is too conservative. Doubling stops at
    ``2**max_doublings * eps0``. Returns ``(eps, steps)`` where ``eps`` is the
    last width evaluated.
    """
    if not eps0 > 0:
        raise ValueError("eps0 must be positive")
    lb, ub = 0.0, math.inf
    eps = eps0
    cap = eps0 * 2.0**max_doublings
    steps = []
    for _ in range(max_iter):
        p, payload = p_of(eps)
        steps.append(SearchStep(eps, p, payload))
        if abs(p - target) <= tau:
            break
        if p > target:
            ub = eps
            nxt = 0.5 * (lb + eps)
        else:
            lb = eps
            if math.isinf(ub):
                if eps >= cap:
                    break
                nxt = min(2.0 * eps, cap)
            else:
                nxt = 0.5 * (ub + eps)
        if ub - lb <= tau:
            break
        eps = nxt
    return steps[-1].value, steps


def search_rhs(p_of: Callable[[float], tuple[float, object]], target: float, tau: float = 1e-4,
               kappa: float = 0.01, t0: float = 0.0, max_iter: int = 60):
    """Bracketing search on the right-hand side ``t``.

    The probability falls as ``t`` grows. A probability above ``target``
    raises ``t`` (by ``kappa`` until an upper bound exists, then by
    bisection); otherwise ``t`` is lowered the same way. Returns the list of
    steps.
    """
    lb, ub = -math.inf, math.inf
    t = t0
    steps = []
    for _ in range(max_iter):
        p, payload = p_of(t)
        steps.append(SearchStep(t, p, payload))
        if abs(p - target) <= tau:
            break
        if p > target:
            lb = t
            nxt = t + kappa if math.isinf(ub) else 0.5 * (ub + t)
        else:
            ub = t
            nxt = t - kappa if math.isinf(lb) else 0.5 * (lb + t)
        if ub - lb <= tau:
            break
        t = nxt
    return steps


@dataclass
class TuneStep:
    t: float
    report: SolveReport
    objective: float
    p: float


@dataclass
class TuneResult:
    steps: list[TuneStep]
    best: TuneStep | None
    target: float
    wall_time: float = 0.0

    @property
    def ok(self) -> bool:
        return self.best is not None

    @property
    def t(self) -> float:
        return self.best.t if self.best is not None else float("nan")

    def summary(self) -> list[tuple[float, float]]:
        return [(s.t, s.p) for s in self.steps]


def _select_best(steps, target, tol=0.0):
    feas = [s for s in steps if s.p >= target - tol and s.report is not None]
    if not feas:
        return None
    return min(feas, key=lambda s: s.objective)


def tune_t(problem: ChanceProblem, evaluator: OutOfSampleEvaluator, g0=None, *,
           config: PenaltyConfig = PenaltyConfig(), tau_t: float = 1e-4, kappa_t: float = 0.01,
           max_iter: int = 60, state=None, trace: bool = False) -> TuneResult:
    """Tune ``t`` for one training sample; each solve warm-starts from the previous one.

    The selected solution is the cheapest among the iterations whose
    estimated probability reaches ``1 - alpha - tau_t``: the search accepts a
    probability within ``tau_t`` of the target, so selection does too.
    """

    t_start = time.perf_counter()
    target = 1.0 - problem.alpha
    if g0 is None and state is None:
        g0 = solve_nominal(problem.case, problem.system).point.g
    carry = {"state": state}
    results: list[TuneStep] = []

    def p_of(t):
        rep = solve(problem.with_t(t), g0, config=config, state=carry["state"], trace=trace)
        carry["state"] = rep.state
        p = evaluator.probability(rep.point)
        results.append(TuneStep(t, rep, rep.objective, p))
        log.info("t=%.6g  p=%.5f  obj=%.2f  (%s, %d it)", t, p, rep.objective, rep.reason, rep.iterations)
        return p, rep

    search_rhs(p_of, target, tau=tau_t, kappa=kappa_t, max_iter=max_iter)
    best = _select_best(results, target, tau_t)
    if best is None:
        log.warning("no tuned solution reached the target probability: %s",
                    [(round(s.t, 6), s.p) for s in results])
    return TuneResult(results, best, target, time.perf_counter() - t_start)


def calibrate_epsilon(case: GridCase, model: ScenarioModel, alpha: float = 0.05, *,
                      N_hat: int = 100, M_hat: int = 10, eps0: float = 0.1, tau_eps: float = 1e-3,
                      seed: int = 0, n_eval: int = 100_000, config: PenaltyConfig = PenaltyConfig(),
                      system: ConstraintSystem | None = None, max_iter: int = 30,
                      return_details: bool = False):
    """Largest per-sample width reaching ``1 - alpha`` at ``t = 0``, over ``M_hat`` samples.

    Replication ``r`` trains on its own sample (seed stream
    :data:`CALIBRATION_STREAM` of ``seed``) and is evaluated on
    a fresh sample of ``n_eval`` scenarios. Replications whose solver fails
    are skipped with a warning.
    """
    system = system if system is not None else ConstraintSystem(case)
    g0 = solve_nominal(case, system).point.g
    target = 1.0 - alpha
    per_rep = []
    for r in range(M_hat):
        rep_seed = replication_seed(seed, r, stream=CALIBRATION_STREAM)
        scen = sample(model, N_hat, rep_seed)
        ev = OutOfSampleEvaluator(system, model, n_eval, tuning_seed(rep_seed))
        base = ChanceProblem(case, scen.W, eps0, alpha, 0.0, var_omega=model.var_omega, system=system)

        def p_of(eps, base=base, ev=ev):
            prob = _with_eps(base, eps)
            rep = solve(prob, g0, config=config)
            return ev.probability(rep.point), rep

        try:
            eps_r, steps = search_epsilon(p_of, target, eps0, tau=tau_eps, max_iter=max_iter)
        except Exception as exc:  # noqa: BLE001 - one bad replication must not end calibration
            warnings.warn(f"calibration replication {r} failed: {exc}", RuntimeWarning, stacklevel=2)
            continue
        per_rep.append({"replication": r, "seed": rep_seed, "eps": eps_r,
                        "steps": [(s.value, s.p) for s in steps]})
        log.info("calibration replication %d: eps=%.5g after %d solves", r, eps_r, len(steps))
    if not per_rep:
        raise CalibrationError("every calibration replication failed")
    eps_hat = max(d["eps"] for d in per_rep)
    if return_details:
        return eps_hat, per_rep
    return eps_hat


def _with_eps(prob: ChanceProblem, eps: float) -> ChanceProblem:
    out = object.__new__(ChanceProblem)
    out.__dict__.update(prob.__dict__)
    out.eps = float(eps)
    return out


def save_calibration(path, *, case: str, alpha: float, zeta: float, eps_hat: float, seed: int,
                     N_hat: int, M_hat: int, details=None) -> None:
    """Append or replace an entry in a JSON calibration cache."""
    path = Path(path)
    data = json.loads(path.read_text()) if path.exists() else {"entries": []}
    key = {"case": case, "alpha": alpha, "zeta": zeta, "seed": seed, "N_hat": N_hat, "M_hat": M_hat}
    data["entries"] = [e for e in data["entries"] if {k: e.get(k) for k in key} != key]
    entry = dict(key, eps_hat=eps_hat, date=_dt.date.today().isoformat())
    if details is not None:
        entry["replications"] = details
    data["entries"].append(entry)
    path.write_text(json.dumps(data, indent=2))


def load_calibration(path, *, case: str, alpha: float, zeta: float, seed: int,
                     N_hat: int = 100, M_hat: int = 10) -> float | None:
    path = Path(path)
    if not path.exists():
        return None
    data = json.loads(path.read_text())
    for e in data.get("entries", []):
        if (e.get("case") == case and e.get("alpha") == alpha and e.get("zeta") == zeta
                and e.get("seed") == seed and e.get("N_hat") == N_hat and e.get("M_hat") == M_hat):
            return float(e["eps_hat"])
    return None
