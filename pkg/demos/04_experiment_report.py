"""Run a small experiment through the orchestration layer and write its reports.

Equivalent command line::

    jccopf run --case case14 --method nlp --reps 3 --cov-seed 3 --out results/nlp14
"""

from pathlib import Path

from jccopf.cli import ExperimentConfig, emit, read_report, run, table_csv

out = Path("results")
cfg = ExperimentConfig(case="case14", method="nlp", alpha=0.05, zeta=0.1, n=100, reps=3, seed=0,
                       cov_seed=3, eps_hat=0.0875, n_oos=200_000)
report = run(cfg)
print(table_csv(report))

for row in report.rows:
    print(f"replication {row['replication']}: status={row['status']} t={row['t']:+.4f} "
          f"solves={row['tune_steps']} time={row['time']:.2f}s")

path = emit(report, "json", out / "nlp14.json")
emit(report, "csv", out / "nlp14.csv")
assert read_report(path) == report
print(f"reports written to {out}/")
