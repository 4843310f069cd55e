"""Experiment configuration, orchestration over replications, and report files.

Command line::

    jccopf run --config experiment.cfg [--case case14] [--method nlp] ...

Config files are JSON objects or ``key = value`` lines (``#`` starts a
comment). Keys match the fields of :class:`ExperimentConfig`.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import platform
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .baselines import sa_sample_size, solve_nominal, solve_sa
from .cons import ConstraintSystem, DispatchPoint
from .netcase import BUILTIN_CASES, CaseError, GridCase, builtin_case, load_case
from .sl1qp import ChanceProblem, PenaltyConfig, write_trace
from .stochastic import (OutOfSampleEvaluator, build_covariance, out_of_sample_probability,
                         replication_seed, sample)
from .tuning import (calibrate_epsilon, load_calibration, save_calibration, scale_epsilon,
                     tune_t, tuning_seed)

__all__ = ["ConfigError", "ExperimentConfig", "ExperimentReport", "load_config", "run", "emit", "main"]

log = logging.getLogger(__name__)

METHODS = ("nlp", "sa", "nominal")
OK = "ok"
INFEASIBLE = "infeasible"
FAILED = "failed"
NO_FEASIBLE_T = "no-feasible-t"
TIMING_KEYS = ("time",)


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    case: str = "case14"
    method: str = "nlp"
    alpha: float = 0.05
    zeta: float = 0.1
    n: int = 100
    reps: int = 10
    seed: int = 0
    cov_seed: int | None = None
    n_oos: int = 1_000_000
    n_eval: int = 100_000
    eps_hat: float | None = None
    n_hat: int = 100
    m_hat: int = 10
    eps0: float = 0.1
    tau_eps: float = 1e-3
    tau_t: float = 1e-4
    kappa_t: float = 0.01
    nsa: int | None = None
    sigma: float = 1e-4
    pi: float = 10.0
    delta_max: float = 1e6
    delta0: float = 1.0
    eta: float = 1e-8
    tau1: float = 0.5
    tau2: float = 2.0
    kappa1: float = 1e-6
    kappa2: float = 0.1
    max_iter: int = 500
    lazy: bool = True
    feas_tol: float = 1e-6
    workers: int = 1
    out: str | None = None
    calibration_cache: str | None = None
    trace_dir: str | None = None
    keep_traces: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if not 0 < self.alpha < 1:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.zeta < 0:
            raise ConfigError("zeta must be non-negative")
        for name in ("n", "reps", "n_oos", "n_eval", "n_hat", "m_hat", "workers", "max_iter"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if self.nsa is not None and self.nsa < 1:
            raise ConfigError("nsa must be at least 1")
        if self.eps_hat is not None and not self.eps_hat > 0:
            raise ConfigError("eps_hat must be positive")
        try:
            self.penalty_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def covariance_seed(self) -> int:
        return self.seed if self.cov_seed is None else self.cov_seed

    def penalty_config(self) -> PenaltyConfig:
        return PenaltyConfig(pi=self.pi, delta_max=self.delta_max, delta0=self.delta0, eta=self.eta,
                             tau1=self.tau1, tau2=self.tau2, kappa1=self.kappa1, kappa2=self.kappa2,
                             max_iter=self.max_iter, lazy=self.lazy)

    @classmethod
    def from_mapping(cls, data: dict) -> "ExperimentConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in data.items():
            key = key.strip().replace("-", "_")
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(key, raw, known[key].type)
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return asdict(self)


def _coerce(key, raw, typ):
    typ = str(typ)
    if raw is None:
        return None
    if isinstance(raw, str):
        text = raw.strip()
        if text.lower() in ("none", "null", ""):
            return None
    else:
        text = raw
    try:
        if "bool" in typ:
            if isinstance(text, bool):
                return text
            if str(text).lower() in ("1", "true", "yes", "on"):
                return True
            if str(text).lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if typ.startswith("int"):
            val = float(text)
            if val != int(val):
                raise ValueError(text)
            return int(val)
        if typ.startswith("float"):
            return float(text)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return str(text)


def load_config(path) -> ExperimentConfig:
    """Read a JSON or ``key = value`` config file."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    if text.lstrip().startswith("{"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    else:
        data = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            k, v = line.split("=", 1)
            data[k.strip()] = v.strip()
    return ExperimentConfig.from_mapping(data)


@dataclass
class ExperimentReport:
    config: dict
    rows: list[dict]
    aggregates: dict
    metadata: dict = field(default_factory=dict)
    traces: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def failed(self) -> int:
        return sum(r["status"] in (FAILED, NO_FEASIBLE_T) for r in self.rows)

    def to_dict(self) -> dict:
        return {"config": self.config, "rows": self.rows, "aggregates": self.aggregates,
                "metadata": self.metadata}

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentReport":
        return cls(data["config"], data["rows"], data["aggregates"], data.get("metadata", {}))

    def without_timing(self) -> dict:
        d = json.loads(json.dumps(self.to_dict()))
        for r in d["rows"]:
            for k in TIMING_KEYS:
                r.pop(k, None)
        d["aggregates"] = {k: v for k, v in d["aggregates"].items() if not k.startswith("time")}
        d["metadata"].pop("wall_time", None)
        return d


def aggregate(rows: list[dict]) -> dict:
    """Min/avg/max of objective, probability, time and t over successful rows."""
    ok = [r for r in rows if r["status"] == OK]
    out = {"n_ok": len(ok), "n_infeasible": sum(r["status"] == INFEASIBLE for r in rows),
           "n_failed": sum(r["status"] in (FAILED, NO_FEASIBLE_T) for r in rows)}
    for key in ("objective", "probability", "time", "t"):
        vals = [r[key] for r in ok if r.get(key) is not None and math.isfinite(r[key])]
        if vals:
            out[f"{key}_min"] = min(vals)
            out[f"{key}_avg"] = float(np.mean(vals))
            out[f"{key}_max"] = max(vals)
    return out


def _resolve_case(name: str) -> GridCase:
    if name in BUILTIN_CASES:
        return builtin_case(name)
    path = Path(name)
    if not path.exists():
        raise ConfigError(f"case {name!r} is neither a built-in case nor a readable file")
    return load_case(path)


def _row(r, seed, status, **kw):
    base = {"replication": r, "seed": seed, "status": status, "objective": None,
            "expected_cost": None, "probability": None, "time": None, "t": None, "eps": None,
            "iterations": None, "qp_solves": None, "tune_steps": None, "n_scenarios": None,
            "g": None, "beta": None, "error": None}
    base.update(kw)
    return base


def _point_fields(point: DispatchPoint):
    return {"g": [float(v) for v in point.g], "beta": [float(v) for v in point.beta]}


def _resolve_eps_hat(cfg: ExperimentConfig, case, model, system) -> float:
    if cfg.eps_hat is not None:
        return cfg.eps_hat
    key = dict(case=case.name, alpha=cfg.alpha, zeta=cfg.zeta, seed=cfg.seed, N_hat=cfg.n_hat,
               M_hat=cfg.m_hat)
    if cfg.calibration_cache:
        cached = load_calibration(cfg.calibration_cache, **key)
        if cached is not None:
            log.info("using cached eps_hat=%.6g", cached)
            return cached
    eps_hat, details = calibrate_epsilon(
        case, model, cfg.alpha, N_hat=cfg.n_hat, M_hat=cfg.m_hat, eps0=cfg.eps0, tau_eps=cfg.tau_eps,
        seed=cfg.seed, n_eval=cfg.n_eval, config=cfg.penalty_config(), system=system,
        return_details=True)
    if cfg.calibration_cache:
        save_calibration(cfg.calibration_cache, eps_hat=eps_hat, details=details, **key)
    return eps_hat


def _run_nlp(cfg, r, seed, case, system, model, eps, g0, traces):
    scen = sample(model, cfg.n, seed)
    prob = ChanceProblem(case, scen.W, eps, cfg.alpha, 0.0, var_omega=model.var_omega, system=system)
    ev = OutOfSampleEvaluator(system, model, cfg.n_eval, tuning_seed(seed), tol=cfg.feas_tol)
    want_trace = bool(cfg.trace_dir or cfg.keep_traces)
    res = tune_t(prob, ev, g0, config=cfg.penalty_config(), tau_t=cfg.tau_t, kappa_t=cfg.kappa_t,
                 trace=want_trace)
    if want_trace:
        traces[r] = [s.report.trace for s in res.steps]
        if cfg.trace_dir:
            tdir = Path(cfg.trace_dir)
            tdir.mkdir(parents=True, exist_ok=True)
            for i, s in enumerate(res.steps):
                write_trace(s.report.trace, tdir / f"rep{r:03d}_t{i:02d}.csv")
    iters = sum(s.report.iterations for s in res.steps)
    qps = sum(s.report.qp_solves for s in res.steps)
    if not res.ok:
        return _row(r, seed, NO_FEASIBLE_T, time=res.wall_time, eps=eps, iterations=iters,
                    qp_solves=qps, tune_steps=len(res.steps), n_scenarios=cfg.n,
                    error="no right-hand side reached the target probability: "
                          + ", ".join(f"t={t:.6g}:p={p:.5f}" for t, p in res.summary()))
    best = res.best
    p = out_of_sample_probability(best.report.point, system, model, cfg.n_oos, seed, tol=cfg.feas_tol)
    return _row(r, seed, OK, objective=best.objective, expected_cost=best.objective, probability=p,
                time=res.wall_time, t=best.t, eps=eps, iterations=iters, qp_solves=qps,
                tune_steps=len(res.steps), n_scenarios=cfg.n, **_point_fields(best.report.point))


def _run_sa(cfg, r, seed, case, system, model):
    n_sa = cfg.nsa if cfg.nsa is not None else sa_sample_size(cfg.alpha, cfg.sigma, case.n_gen)
    t0 = time.perf_counter()
    res = solve_sa(case, model, n_sa, seed, system=system)
    elapsed = time.perf_counter() - t0
    if not res.feasible:
        return _row(r, seed, INFEASIBLE, time=elapsed, n_scenarios=n_sa, qp_solves=1,
                    error=f"scenario problem status: {res.status}")
    p = out_of_sample_probability(res.point, system, model, cfg.n_oos, seed, tol=cfg.feas_tol)
    return _row(r, seed, OK, objective=res.objective, expected_cost=res.expected_cost, probability=p,
                time=elapsed, n_scenarios=n_sa, qp_solves=1, iterations=res.qp_iterations,
                **_point_fields(res.point))


def _run_nominal(cfg, seed, case, system, model):
    t0 = time.perf_counter()
    res = solve_nominal(case, system)
    elapsed = time.perf_counter() - t0
    if not res.feasible:
        return _row(0, seed, FAILED, time=elapsed, error=f"nominal problem status: {res.status}")
    p = out_of_sample_probability(res.point, system, model, cfg.n_oos, seed, tol=cfg.feas_tol)
    return _row(0, seed, OK, objective=res.objective, expected_cost=res.expected_cost, probability=p,
                time=elapsed, n_scenarios=1, iterations=res.qp_iterations, **_point_fields(res.point))


def run(cfg: ExperimentConfig) -> ExperimentReport:
    """Run every replication of an experiment and aggregate the results."""
    cfg.validate()
    t_start = time.perf_counter()
    case = _resolve_case(cfg.case)
    system = ConstraintSystem(case)
    model = build_covariance(case, cfg.zeta, cfg.covariance_seed)
    meta = {"package_version": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__, "platform": platform.platform(),
            "case_name": case.name, "n_bus": case.n_bus, "n_gen": case.n_gen, "m": system.m,
            "var_omega": model.var_omega}
    traces: dict = {}
    rows: list[dict] = []
    if cfg.method == "nominal":
        rows.append(_run_nominal(cfg, replication_seed(cfg.seed, 0), case, system, model))
    else:
        seeds = [replication_seed(cfg.seed, r) for r in range(cfg.reps)]
        if cfg.method == "nlp":
            eps_hat = _resolve_eps_hat(cfg, case, model, system)
            eps = scale_epsilon(eps_hat, cfg.n_hat, cfg.n)
            meta.update(eps_hat=eps_hat, eps=eps)
            nom = solve_nominal(case, system)
            if nom.point is None:
                raise CaseError("nominal dispatch is infeasible; no starting point")
            g0 = nom.point.g

            def one(r):
                return _guard(r, seeds[r], lambda: _run_nlp(cfg, r, seeds[r], case, system, model,
                                                            eps, g0, traces))
        else:
            meta["n_sa"] = cfg.nsa if cfg.nsa is not None else sa_sample_size(cfg.alpha, cfg.sigma,
                                                                               case.n_gen)

            def one(r):
                return _guard(r, seeds[r], lambda: _run_sa(cfg, r, seeds[r], case, system, model))

        if cfg.workers > 1:
            with ThreadPoolExecutor(cfg.workers) as ex:
                rows = list(ex.map(one, range(cfg.reps)))
        else:
            rows = [one(r) for r in range(cfg.reps)]
    meta["wall_time"] = time.perf_counter() - t_start
    report = ExperimentReport(cfg.to_dict(), rows, aggregate(rows), meta, traces)
    if cfg.out:
        emit(report, "json", cfg.out + ".json")
        emit(report, "csv", cfg.out + ".csv")
    return report


def _guard(r, seed, fn):
    try:
        return fn()
    except Exception as exc:  # noqa: BLE001 - a failed replication is reported, not fatal
        log.exception("replication %d failed", r)
        return _row(r, seed, FAILED, error=f"{type(exc).__name__}: {exc}")


CSV_ROWS = [
    ("Min. obj ($)", "objective_min"), ("Avg. obj ($)", "objective_avg"), ("Max. obj ($)", "objective_max"),
    ("Min. prob", "probability_min"), ("Avg. prob", "probability_avg"), ("Max. prob", "probability_max"),
    ("Min. time (s)", "time_min"), ("Avg. time (s)", "time_avg"), ("Max. time (s)", "time_max"),
]


def _column_label(config: dict) -> str:
    m = config.get("method", "")
    if m == "nlp":
        return f"NLP({config.get('n')})"
    return {"sa": "SA", "nominal": "Nominal"}.get(m, m)


def table_csv(report: ExperimentReport) -> str:
    """Summary table: one statistic per row, the experiment as a column."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["statistic", _column_label(report.config)])
    if not report.rows:
        return buf.getvalue()
    agg = report.aggregates
    for label, key in CSV_ROWS:
        w.writerow([label, repr(agg[key]) if key in agg else ""])
    method = report.config.get("method")
    if method == "nlp":
        w.writerow(["Avg. t", repr(agg["t_avg"]) if "t_avg" in agg else ""])
    elif method == "sa":
        w.writerow(["N_SA", report.metadata.get("n_sa", "")])
    else:
        w.writerow(["N_SA", 1])
    w.writerow(["Feasible", agg["n_ok"]])
    w.writerow(["Infeasible", agg["n_infeasible"]])
    w.writerow(["Failed", agg["n_failed"]])
    return buf.getvalue()


def emit(report: ExperimentReport, fmt: str, path) -> Path:
    """Write the report as ``json`` (full detail) or ``csv`` (summary table)."""
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "json":
        path.write_text(json.dumps(report.to_dict(), indent=2))
    elif fmt == "csv":
        path.write_text(table_csv(report))
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    return path


def read_report(path) -> ExperimentReport:
    return ExperimentReport.from_dict(json.loads(Path(path).read_text()))


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="jccopf", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    rp = sub.add_parser("run", help="run an experiment")
    rp.add_argument("--config", help="JSON or key=value config file")
    rp.add_argument("--case")
    rp.add_argument("--method", choices=METHODS)
    rp.add_argument("--alpha", type=float)
    rp.add_argument("--zeta", type=float)
    rp.add_argument("--n", type=int, help="training sample size")
    rp.add_argument("--reps", type=int)
    rp.add_argument("--seed", type=int)
    rp.add_argument("--cov-seed", type=int, dest="cov_seed")
    rp.add_argument("--nsa", type=int, help="scenario count for the scenario approach")
    rp.add_argument("--eps-hat", type=float, dest="eps_hat")
    rp.add_argument("--n-oos", type=int, dest="n_oos")
    rp.add_argument("--workers", type=int)
    rp.add_argument("--trace-dir", dest="trace_dir")
    rp.add_argument("--calibration-cache", dest="calibration_cache")
    rp.add_argument("--out", help="output path prefix (writes .json and .csv)")
    rp.add_argument("-v", "--verbose", action="count", default=0)
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=[logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)],
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        base = load_config(args.config).to_dict() if args.config else {}
        overrides = {k: v for k, v in vars(args).items()
                     if k not in ("command", "config", "verbose") and v is not None}
        cfg = ExperimentConfig.from_mapping({**base, **overrides})
        report = run(cfg)
    except (ConfigError, CaseError) as exc:
        print(f"jccopf: configuration error: {exc}", file=sys.stderr)
        return 1
    sys.stdout.write(table_csv(report))
    return 2 if report.failed else 0


if __name__ == "__main__":
    sys.exit(main())
