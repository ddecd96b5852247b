"""Resolvents, projections and Yosida approximations of the built-in operators."""

# %%
import numpy as np

from mmsde.monotone import (AbsNorm, Ball, Box, NormalCone, Polyhedron, Subdifferential,
                            audit_firm_nonexpansive, audit_monotone, gaussian_pair_sampler,
                            project, resolvent, yosida)

# %% the half-line cone: the resolvent is a projection, for every lambda
half_line = NormalCone(Box([0.0], [np.inf]))
for lam in (0.1, 1.0, 10.0):
    print(lam, resolvent(half_line, lam, [-1.0]), yosida(half_line, lam, [-1.0]))

# %% soft thresholding from the subdifferential of |x|
abs_op = Subdifferential(AbsNorm(1.0))
xs = np.linspace(-3, 3, 7)[:, None]
print(np.hstack([xs, resolvent(abs_op, 1.0, xs)]))

# %% projections onto a ball and onto a triangle
print(project(Ball([0, 0], 1.0), [3.0, 4.0]))
triangle = Polyhedron([[1, 0], [0, 1], [-1, -1]], [1, 1, 0])
print(project(triangle, [[2.0, 2.0], [-1.0, -1.0], [0.2, 0.3]]))

# %% sampled certificates
for op in (half_line, abs_op, NormalCone(triangle)):
    dim = op.dim
    sampler = gaussian_pair_sampler(np.zeros(dim), 3.0)
    print(type(op).__name__, audit_monotone(op, sampler=sampler).passed,
          audit_firm_nonexpansive(op, sampler=sampler).worst_violation)
