"""Resolvent Euler integration of a single multivalued SDE.

The scheme for ``dX in -A(X) dt + b(X) dt + sigma(X) dW`` is::

    pre    = x + h * drift_scale * b(x) + noise_scale * sigma(x) dW
    x_next = J_{hA}(pre)
    dK     = pre - x_next

so ``x_next`` lies in the closure of the domain of ``A`` by construction and
``dK`` is the increment of the correction process ``K``.  With ``A = 0`` the
scheme is exactly Euler--Maruyama.

Randomness comes from :class:`NoiseStream`, a counter-based (Philox) stream
keyed by ``(master_seed, stream_id)``; two streams with the same key produce
bitwise identical draws no matter in which order or on which worker they are
consumed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import ParameterError, SimulationError
from .monotone import resolvent

__all__ = [
    "TimeGrid", "NoiseStream", "PathSample", "MvSdeProblem",
    "brownian_increments", "backward_euler_step", "simulate", "matvec",
    "write_path_csv", "read_path_csv", "PATH_CSV_HEADER",
]

DOMAIN_TOL = 1e-9


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``0 = t_0 < ... < t_count = T``."""

    T: float
    count: int

    def __post_init__(self):
        if not (np.isfinite(self.T) and self.T > 0):
            raise ParameterError(f"horizon must be positive, got {self.T!r}")
        if int(self.count) != self.count or self.count < 0:
            raise ParameterError("step count must be a nonnegative integer")
        object.__setattr__(self, "T", float(self.T))
        object.__setattr__(self, "count", int(self.count))

    @classmethod
    def from_step(cls, T, h):
        """Grid with step ``h``; ``T`` must be a multiple of ``h`` within 1e-12."""
        if not h > 0:
            raise ParameterError("step must be positive")
        if h > T * (1 + 1e-12):
            raise ParameterError(f"step {h} is larger than the horizon {T}")
        count = int(round(T / h))
        if abs(count * h - T) > 1e-12 * max(1.0, T):
            raise ParameterError(f"horizon {T} is not a multiple of the step {h}")
        return cls(T, count)

    @classmethod
    def with_max_step(cls, T, h_max):
        """Finest-needed uniform grid whose step does not exceed ``h_max``."""
        if not h_max > 0:
            raise ParameterError("step bound must be positive")
        return cls(T, max(1, int(np.ceil(T / h_max - 1e-9))))

    @property
    def h(self):
        return self.T / self.count if self.count else 0.0

    @property
    def times(self):
        return np.linspace(0.0, self.T, self.count + 1)


@dataclass(frozen=True)
class NoiseStream:
    master_seed: int
    stream_id: Union[int, tuple]
    dimension: int

    def __post_init__(self):
        if self.dimension < 1:
            raise ParameterError("noise dimension must be at least 1")
        key = self.stream_id if isinstance(self.stream_id, tuple) else (self.stream_id,)
        object.__setattr__(self, "stream_id", tuple(int(k) for k in key))

    def generator(self):
        ss = np.random.SeedSequence(int(self.master_seed) & ((1 << 64) - 1),
                                    spawn_key=self.stream_id)
        return np.random.Generator(np.random.Philox(ss))

    def substream(self, *key):
        return NoiseStream(self.master_seed, self.stream_id + tuple(key), self.dimension)

    def normals(self, count):
        """``count`` standard normal vectors, shape ``(count, dimension)``."""
        return self.generator().standard_normal((count, self.dimension))


def brownian_increments(noise: NoiseStream, grid: TimeGrid) -> np.ndarray:
    """Increments ``sqrt(h) * N(0, I)`` for every step of ``grid``."""
    if grid.count == 0:
        return np.empty((0, noise.dimension))
    return np.sqrt(grid.h) * noise.normals(grid.count)


def _stack_increments(noise, grid):
    if isinstance(noise, NoiseStream):
        return brownian_increments(noise, grid)
    return np.stack([brownian_increments(n, grid) for n in noise], axis=0)


def matvec(S, v):
    """Batched ``S @ v`` with a fixed reduction order (independent of batch size)."""
    return np.sum(S * v[..., None, :], axis=-1)


@dataclass
class PathSample:
    """Discrete path with its correction process.

    ``states`` has shape ``(..., count + 1, dim)``; leading axes index
    replications.  ``K_variation`` is the running sum of ``|dK|``.
    """

    grid: TimeGrid
    states: np.ndarray
    K_increments: np.ndarray
    K_variation: np.ndarray
    domain_violation: float = 0.0

    @property
    def times(self):
        return self.grid.times

    @property
    def final(self):
        return self.states[..., -1, :]

    @property
    def K(self):
        """Cumulative correction process ``K_t`` at the grid nodes."""
        zero = np.zeros_like(self.K_increments[..., :1, :])
        return np.concatenate([zero, np.cumsum(self.K_increments, axis=-2)], axis=-2)

    def replication(self, i):
        return PathSample(self.grid, self.states[i], self.K_increments[i],
                          self.K_variation[i], self.domain_violation)


def build_path(grid, states, dK, domain):
    states = np.stack(states, axis=-2)
    if dK:
        dK = np.stack(dK, axis=-2)
    else:
        dK = np.zeros(states.shape[:-2] + (0, states.shape[-1]))
    step_var = np.linalg.norm(dK, axis=-1)
    zero = np.zeros(step_var.shape[:-1] + (1,))
    variation = np.concatenate([zero, np.cumsum(step_var, axis=-1)], axis=-1)
    violation = float(np.max(domain.distance(states))) if states.size else 0.0
    return PathSample(grid, states, dK, variation, violation)


@dataclass
class MvSdeProblem:
    """``dX in -A(X) dt + drift_scale b(X) dt + noise_scale sigma(X) dW``."""

    op: object
    drift: Callable
    diffusion: Callable
    x0: np.ndarray
    noise_dim: int = 1
    drift_scale: float = 1.0
    noise_scale: float = 1.0

    def __post_init__(self):
        self.x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        if self.x0.shape != (self.op.dim,):
            raise ParameterError(f"x0 must have shape ({self.op.dim},)")
        if self.op.domain.distance(self.x0) > DOMAIN_TOL:
            raise ParameterError("x0 is outside the closure of the operator domain")
        s = np.asarray(self.diffusion(self.x0))
        if s.shape != (self.op.dim, self.noise_dim):
            raise ParameterError(f"diffusion returned shape {s.shape}, expected "
                                 f"{(self.op.dim, self.noise_dim)}")
        b = np.asarray(self.drift(self.x0))
        if b.shape != (self.op.dim,):
            raise ParameterError(f"drift returned shape {b.shape}, expected ({self.op.dim},)")


def backward_euler_step(problem: MvSdeProblem, x, h, dW):
    """One resolvent Euler step; returns ``(x_next, dK)``."""
    if not h > 0:
        raise ParameterError("step must be positive")
    x = np.asarray(x, dtype=float)
    pre = (x + h * problem.drift_scale * problem.drift(x)
           + problem.noise_scale * matvec(problem.diffusion(x), np.asarray(dW, dtype=float)))
    x_next = resolvent(problem.op, h, pre)
    return x_next, pre - x_next


def simulate(problem: MvSdeProblem, grid: TimeGrid,
             noise: Union[NoiseStream, Sequence[NoiseStream]]) -> PathSample:
    """Integrate ``problem`` over ``grid``.

    ``noise`` may be a single stream or a sequence of streams, one per
    replication; in the latter case the replications are advanced together
    and the returned arrays carry a leading replication axis.
    """
    if grid.count < 1:
        raise ParameterError("grid needs at least one step")
    dW = _stack_increments(noise, grid)
    x = np.broadcast_to(problem.x0, dW.shape[:-2] + problem.x0.shape).copy()
    states, dKs = [x], []
    h = grid.h
    for k in range(grid.count):
        x, dK = backward_euler_step(problem, x, h, dW[..., k, :])
        if not np.all(np.isfinite(x)):
            raise SimulationError(f"non-finite state at node {k + 1}", index=k + 1)
        states.append(x)
        dKs.append(dK)
    return build_path(grid, states, dKs, problem.op.domain)


PATH_CSV_HEADER = "t,x_<i>...,K_variation"


def write_path_csv(path: PathSample, fileobj, provenance: Optional[dict] = None):
    """Write one replication as CSV with columns ``t, x_0..x_{n-1}, K_variation``.

    ``provenance`` entries are written first as ``# key=value`` comment lines.
    """
    if path.states.ndim != 2:
        raise ParameterError("write one replication at a time")
    n = path.states.shape[1]
    for key, value in (provenance or {}).items():
        fileobj.write(f"# {key}={value}\n")
    w = csv.writer(fileobj, lineterminator="\n")
    w.writerow(["t"] + [f"x_{i}" for i in range(n)] + ["K_variation"])
    for t, s, v in zip(path.times, path.states, path.K_variation):
        w.writerow([repr(float(t))] + [repr(float(c)) for c in s] + [repr(float(v))])


def read_path_csv(fileobj):
    """Inverse of :func:`write_path_csv`: returns ``(times, states, K_variation)``."""
    rows = [line for line in fileobj.read().splitlines() if line and not line.startswith("#")]
    data = np.array([[float(c) for c in r.split(",")] for r in rows[1:]])
    return data[:, 0], data[:, 1:-1], data[:, -1]
