"""Slow-fast paths approach the averaged path as epsilon shrinks."""

# %%
from mmsde.harness import load_scenario, run_experiment, summarize, with_overrides

spec = with_overrides(load_scenario("reflected-ou"), epsilons=[0.2, 0.1, 0.05], replications=200)

# %% mean-square sup error against the averaged reflected path
result = run_experiment(spec, "average")
print(summarize([result]))
print(result.report["trend"])
print("Khasminskii block lengths", result.report["khasminskii_delta"])

# %% the same under a constraint box and under a soft-threshold slow operator
for name in ("box-2d", "soft-threshold"):
    res = run_experiment(with_overrides(load_scenario(name), replications=100), "average")
    print(name, [round(e, 4) for e in res.report["errors"]])
