"""Minimal control energy of the skeleton equation."""

# %%
import numpy as np

from mmsde.ldp import RateConfig, SkeletonProblem, rate_function, solve_skeleton
from mmsde.monotone import ZeroOperator
from mmsde.multiscale import AveragedModel, solve_averaged
from mmsde.paths import TimeGrid


def unit(x):
    return np.ones(np.shape(x)[:-1] + (1, 1))


# %% straight line x(t) = v t with no drift: the value is v^2 T / 2
grid = TimeGrid(1.0, 128)
brownian = AveragedModel(ZeroOperator(1), lambda x: 0 * x, unit, True)
for v in (0.5, 1.0, 2.0):
    res = rate_function(v * grid.times, SkeletonProblem(brownian, [0.0], grid))
    print(v, res.value, 0.5 * v * v)

# %% the averaged path itself costs nothing
ou = AveragedModel(ZeroOperator(1), lambda x: -x, unit, True)
xbar = solve_averaged(ou, [1.0], grid)
print("zero point", rate_function(xbar, SkeletonProblem(ou, [1.0], grid)).value)

# %% the optimal control replays the target
target = np.exp(-grid.times) + 0.3 * grid.times
res = rate_function(target, SkeletonProblem(ou, [1.0], grid), RateConfig(pieces=32))
replay = solve_skeleton(SkeletonProblem(ou, [1.0], grid), res.optimal_control)
print("value", res.value, "max replay gap", np.abs(replay.states[:, 0] - target).max())
