"""Backward-Euler paths of a reflected diffusion and its correction process."""

# %%
import io

import numpy as np

from mmsde.monotone import Box, NormalCone
from mmsde.paths import MvSdeProblem, NoiseStream, TimeGrid, simulate, write_path_csv

# %% Brownian motion with drift -1, reflected at zero
problem = MvSdeProblem(NormalCone(Box([0.0], [np.inf])), lambda x: -np.ones_like(x),
                       lambda x: np.ones(x.shape[:-1] + (1, 1)), [0.5])
grid = TimeGrid(2.0, 400)
noises = [NoiseStream(1, (r,), 1) for r in range(1000)]
path = simulate(problem, grid, noises)

# %% K only moves while X sits on the boundary
print("min state", path.states.min(), "domain violation", path.domain_violation)
print("mean total variation of K", path.K_variation[:, -1].mean())
print("mean X_T", path.final.mean(), "(long-run law is Exp(2), mean 0.5)")

# %% one replication as CSV
buf = io.StringIO()
write_path_csv(path.replication(0), buf, {"seed": 1})
print("\n".join(buf.getvalue().splitlines()[:6]))
