"""The frozen fast equation of the worked example: stationary law N(2m, 1)."""

# %%
import numpy as np

from mmsde.harness import load_scenario
from mmsde.multiscale import (EstimationConfig, FrozenProblem, contraction_fit,
                              estimate_averaged_drift, estimate_invariant_measure)
from mmsde.paths import NoiseStream

spec = load_scenario("reflected-ou")
problem = FrozenProblem([0.0], spec.A2, spec.coeffs)

# %% mean and second moment with batch-means standard errors
est = estimate_invariant_measure(problem, burn_in=20, sample_time=2000, h=0.01,
                                 noise=NoiseStream(0, (0,), 1))
print("mean", est.mean, "SE", est.standard_errors["mean"])
print("E y^2", est.second_moment, "SE", est.standard_errors["second_moment"])

# %% two copies on one noise path close their gap at rate beta/2 = alpha
fit = contraction_fit(problem, [0.0], [3.0], T=5.0, h=0.01, noise=NoiseStream(0, (1,), 1))
print("fitted rate", fit.fitted_rate, "alpha", fit.alpha)

# %% averaged slow drift at a few slow states (closed form 1 - 2 = -1)
for x in (0.0, 1.0, 2.0):
    d = estimate_averaged_drift([x], spec.coeffs, spec.A2, EstimationConfig(sample_time=500))
    print(x, d.value, "+/-", d.ci_half_width)
