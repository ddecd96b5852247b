"""Tail probabilities of the slow path against the reflection principle."""

# %%
import math

from mmsde.harness import load_scenario, run_experiment, with_overrides
from mmsde.ldp import brownian_sup_tail

spec = with_overrides(load_scenario("brownian-1d"), tail_paths=1_000_000)

# %% P(sup sqrt(eps) W > 1) with exact Clopper-Pearson intervals
report = run_experiment(spec, "ldp-probe").report
for row in report["rows"]:
    exact = brownian_sup_tail(1.0, row["epsilon"], 1.0, "upper")
    print(f"eps {row['epsilon']}: p_hat {row['p_hat']:.3e} "
          f"[{row['ci_low']:.3e}, {row['ci_high']:.3e}] exact {exact:.3e} "
          f"-eps log p {row['neg_eps_log_p']:.3f}")
print(report["trend"])
print("rate of the exit path", report["rate_of_exit_path"], "limit", 0.5)

# %% the exact exponent approaches r^2 / 2T slowly
for eps in (0.05, 0.01, 0.002):
    print(eps, -eps * math.log(brownian_sup_tail(1.0, eps, 1.0, "upper")))
