"""Slow-fast multivalued systems and their averaging.

The coupled system on ``R^n x R^m`` is::

    dX in -A1(X) dt + b1(X, Y) dt + sqrt(eps) sigma1(X, Y) dW1
    dY in -A2(Y) dt + (1/gamma) b2(X, Y) dt + (1/sqrt(gamma)) sigma2(X, Y) dW2

Coefficient callables are batched: ``x`` has shape ``(..., n)``, ``y`` has
shape ``(..., m)``; drifts return ``(..., n)`` / ``(..., m)`` and diffusions
``(..., n, d1)`` / ``(..., m, d2)``.

Only the regime ``gamma / eps -> 0`` is handled.  Freezing the slow variable
at ``x`` gives the frozen equation, whose invariant law ``nu^x`` defines the
averaged drift ``bbar1(x) = int b1(x, y) nu^x(dy)``.
"""

from __future__ import annotations

import dataclasses
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .errors import AssumptionError, ParameterError, RegimeError, SimulationError
from .monotone import AuditReport, resolvent
from .paths import (MvSdeProblem, NoiseStream, PathSample, TimeGrid, build_path,
                    brownian_increments, matvec, simulate)
from .stats import batch_means, mean_ci, t_quantile

__all__ = [
    "CoefficientSet", "SlowFastSystem", "GammaRule", "FrozenProblem",
    "InvariantMeasureEstimate", "EstimationConfig", "AveragedModel",
    "KhasminskiiConfig", "AveragingReport", "ContractionFit",
    "simulate_slow_fast", "simulate_frozen", "estimate_invariant_measure",
    "estimate_averaged_drift", "build_averaged_model", "solve_averaged",
    "integrate_deterministic", "khasminskii_paths", "averaging_error",
    "audit_assumptions", "contraction_fit", "check_regime",
]

DEFAULT_STEP_FACTOR = 20
BURN_IN_RELAXATIONS = 10.0


@dataclass
class CoefficientSet:
    """``b1, sigma1, b2, sigma2`` with their declared constants.

    Lipschitz constants follow the squared convention
    ``|b(z1)-b(z2)|^2 + ||sigma(z1)-sigma(z2)||^2 <= L |z1-z2|^2``.
    ``beta`` is the dissipativity constant of the fast drift.
    """

    b1: Callable
    sigma1: Callable
    b2: Callable
    sigma2: Callable
    n: int
    m: int
    d1: int
    d2: int
    L_b1s1: Optional[float] = None
    L_b2s2: Optional[float] = None
    beta: Optional[float] = None
    sigma2_bound: Optional[float] = None
    b1_depends_on_y: bool = True
    sigma1_depends_on_y: bool = True

    def __post_init__(self):
        x, y = np.zeros(self.n), np.zeros(self.m)
        for name, fn, shape in (("b1", self.b1, (self.n,)),
                                ("sigma1", self.sigma1, (self.n, self.d1)),
                                ("b2", self.b2, (self.m,)),
                                ("sigma2", self.sigma2, (self.m, self.d2))):
            got = np.shape(fn(x, y))
            if got != shape:
                raise ParameterError(f"{name} returned shape {got}, expected {shape}")
        if self.beta is not None:
            if self.L_b2s2 is None:
                raise AssumptionError("beta declared without L_b2s2")
            if not self.alpha > 0:
                raise AssumptionError(
                    f"need beta > 2 L_b2s2, got beta={self.beta}, L_b2s2={self.L_b2s2}")

    @property
    def alpha(self):
        """Contraction rate ``beta - 2 L_b2s2`` of the frozen equation."""
        if self.beta is None or self.L_b2s2 is None:
            return None
        return self.beta - 2.0 * self.L_b2s2


@dataclass
class SlowFastSystem:
    A1: object
    A2: object
    coeffs: CoefficientSet
    epsilon: float
    gamma: float
    x0: np.ndarray
    y0: np.ndarray
    T: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ParameterError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if not self.gamma > 0.0:
            raise ParameterError(f"gamma must be positive, got {self.gamma}")
        if not self.T > 0:
            raise ParameterError("horizon must be positive")
        self.x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        self.y0 = np.atleast_1d(np.asarray(self.y0, dtype=float))
        if self.x0.shape != (self.coeffs.n,) or self.A1.dim != self.coeffs.n:
            raise ParameterError("slow dimension mismatch between A1, coefficients and x0")
        if self.y0.shape != (self.coeffs.m,) or self.A2.dim != self.coeffs.m:
            raise ParameterError("fast dimension mismatch between A2, coefficients and y0")
        if self.A1.domain.distance(self.x0) > 1e-9:
            raise ParameterError("x0 is outside the closure of D(A1)")
        if self.A2.domain.distance(self.y0) > 1e-9:
            raise ParameterError("y0 is outside the closure of D(A2)")

    def with_scales(self, epsilon, gamma):
        return dataclasses.replace(self, epsilon=epsilon, gamma=gamma)

    def max_step(self, step_factor=DEFAULT_STEP_FACTOR):
        return self.gamma / step_factor


@dataclass(frozen=True)
class GammaRule:
    """``gamma = eps ** power``; ``power > 1`` keeps ``gamma / eps -> 0``."""

    power: float

    def __post_init__(self):
        if not self.power > 1.0:
            raise RegimeError(
                f"gamma = eps^{self.power} gives gamma/eps -> "
                f"{'a constant' if self.power == 1.0 else 'infinity'}; "
                "only the gamma/eps -> 0 regime is supported")

    def __call__(self, eps):
        return float(eps) ** self.power


def check_regime(epsilons, gammas):
    """Reject lists whose ratio ``gamma/eps`` is not strictly decreasing."""
    eps = np.asarray(epsilons, dtype=float)
    gam = np.asarray(gammas, dtype=float)
    if eps.ndim != 1 or eps.shape != gam.shape or len(eps) == 0:
        raise ParameterError("epsilon and gamma lists must be nonempty and of equal length")
    ratio = gam / eps
    if len(eps) > 1 and not (np.all(np.diff(eps) < 0) and np.all(np.diff(ratio) < 0)):
        raise RegimeError(
            f"gamma/eps ratios {ratio.tolist()} do not decrease along decreasing eps; "
            "only the gamma/eps -> 0 regime is supported")
    return ratio


# ---------------------------------------------------------------------------
# coupled engine


def _slow_pre(system, x, y, h, dW1, u1=None):
    c = system.coeffs
    s1 = c.sigma1(x, y)
    pre = x + h * c.b1(x, y) + np.sqrt(system.epsilon) * matvec(s1, dW1)
    if u1 is not None and np.any(u1):
        pre = pre + h * matvec(s1, u1)
    return pre


def _fast_pre(system, x, y, h, dW2, u2=None):
    c = system.coeffs
    s2 = c.sigma2(x, y)
    pre = y + (h / system.gamma) * c.b2(x, y) + (1.0 / np.sqrt(system.gamma)) * matvec(s2, dW2)
    if u2 is not None and np.any(u2):
        pre = pre + (h / np.sqrt(system.gamma * system.epsilon)) * matvec(s2, u2)
    return pre


def _increments(noise, grid):
    if isinstance(noise, np.ndarray):
        return noise
    if isinstance(noise, NoiseStream):
        return brownian_increments(noise, grid)
    return np.stack([brownian_increments(n, grid) for n in noise], axis=0)


def _check_step(system, grid, step_factor):
    bound = system.max_step(step_factor)
    if grid.h > bound * (1 + 1e-12):
        raise ParameterError(
            f"step {grid.h:.3g} violates the fast-scale rule h <= gamma/{step_factor} = {bound:.3g}")


def run_coupled(system, grid, noise1, noise2, u1=None, u2=None,
                step_factor=DEFAULT_STEP_FACTOR):
    """Shared engine behind :func:`simulate_slow_fast` and controlled runs.

    ``u1``/``u2`` are per-step control values, shape ``(count, d1)`` and
    ``(count, d2)``; ``None`` means no control term at all.
    """
    _check_step(system, grid, step_factor)
    dW1 = _increments(noise1, grid)
    dW2 = _increments(noise2, grid)
    if dW1.shape[:-2] != dW2.shape[:-2]:
        raise ParameterError("noise1 and noise2 must have the same number of replications")
    batch = dW1.shape[:-2]
    x = np.broadcast_to(system.x0, batch + system.x0.shape).copy()
    y = np.broadcast_to(system.y0, batch + system.y0.shape).copy()
    h = grid.h
    xs, ys, dk1, dk2 = [x], [y], [], []
    for k in range(grid.count):
        px = _slow_pre(system, x, y, h, dW1[..., k, :], None if u1 is None else u1[k])
        py = _fast_pre(system, x, y, h, dW2[..., k, :], None if u2 is None else u2[k])
        x_new = resolvent(system.A1, h, px)
        y_new = resolvent(system.A2, h, py)
        if not (np.all(np.isfinite(x_new)) and np.all(np.isfinite(y_new))):
            raise SimulationError(f"non-finite state at node {k + 1}", index=k + 1)
        dk1.append(px - x_new)
        dk2.append(py - y_new)
        x, y = x_new, y_new
        xs.append(x)
        ys.append(y)
    return (build_path(grid, xs, dk1, system.A1.domain),
            build_path(grid, ys, dk2, system.A2.domain))


def simulate_slow_fast(system: SlowFastSystem, grid: TimeGrid, noise1, noise2,
                       step_factor: int = DEFAULT_STEP_FACTOR):
    """Advance the coupled pair jointly; returns ``(slow, fast)`` paths.

    The grid step must resolve the fast scale: ``h <= gamma / step_factor``.
    """
    return run_coupled(system, grid, noise1, noise2, step_factor=step_factor)


# ---------------------------------------------------------------------------
# frozen equation


@dataclass
class FrozenProblem:
    """Fast equation with the slow variable frozen at ``x``, at natural speed."""

    x: np.ndarray
    A2: object
    coeffs: CoefficientSet

    def __post_init__(self):
        self.x = np.atleast_1d(np.asarray(self.x, dtype=float))

    @classmethod
    def from_system(cls, system, x=None):
        return cls(system.x0 if x is None else x, system.A2, system.coeffs)

    @property
    def alpha(self):
        return self.coeffs.alpha

    def as_problem(self, y0):
        c, x = self.coeffs, self.x
        return MvSdeProblem(self.A2, lambda y: c.b2(np.broadcast_to(x, y.shape[:-1] + x.shape), y),
                            lambda y: c.sigma2(np.broadcast_to(x, y.shape[:-1] + x.shape), y),
                            y0, noise_dim=c.d2)

    def default_y0(self):
        return self.A2.domain.project(self.A2.domain.interior_point)


def simulate_frozen(problem: FrozenProblem, T: float, h: float, noise, y0=None) -> PathSample:
    y0 = problem.default_y0() if y0 is None else y0
    return simulate(problem.as_problem(y0), TimeGrid.from_step(T, h), noise)


@dataclass
class InvariantMeasureEstimate:
    mean: np.ndarray
    second_moment: float
    sample_count: int
    burn_in: float
    standard_errors: dict

    def within(self, mean=None, second_moment=None, k=3.0):
        ok = True
        if mean is not None:
            ok &= bool(np.all(np.abs(self.mean - mean) <= k * self.standard_errors["mean"]))
        if second_moment is not None:
            ok &= bool(abs(self.second_moment - second_moment)
                       <= k * self.standard_errors["second_moment"])
        return ok


def _burn_in(alpha, burn_in):
    if alpha is not None and not alpha > 0:
        raise AssumptionError(f"frozen equation is not contractive (alpha = {alpha})")
    if burn_in is None:
        if alpha is None:
            raise ParameterError("burn-in must be given when alpha is not declared")
        return BURN_IN_RELAXATIONS / alpha
    if alpha is not None and burn_in < BURN_IN_RELAXATIONS / alpha * (1 - 1e-12):
        raise ParameterError(
            f"burn-in {burn_in} is shorter than {BURN_IN_RELAXATIONS}/alpha = "
            f"{BURN_IN_RELAXATIONS / alpha}")
    return float(burn_in)


def _snap_up(t, h):
    """Smallest multiple of ``h`` that is at least ``t`` (up to rounding)."""
    return max(1, int(np.ceil(t / h - 1e-9))) * h


def _stationary_samples(problem, burn_in, sample_time, h, noise, y0):
    if not sample_time > 0:
        raise ParameterError("sample time must be positive")
    burn = _snap_up(_burn_in(problem.alpha, burn_in), h)
    sample_time = _snap_up(sample_time, h)
    path = simulate_frozen(problem, burn + sample_time, h, noise, y0)
    start = int(round(burn / path.grid.h)) + 1
    return path.states[..., start:, :], burn


def estimate_invariant_measure(problem: FrozenProblem, burn_in: Optional[float] = None,
                               sample_time: float = 2000.0, h: float = 0.01,
                               noise: Optional[NoiseStream] = None, y0=None,
                               batches: int = 50) -> InvariantMeasureEstimate:
    """Time averages of ``y`` and ``|y|^2`` along one long frozen path.

    The burn-in defaults to ``10/alpha``, which by the exponential contraction
    of the frozen equation leaves an initial-condition bias below ``e^-10``.
    """
    noise = NoiseStream(0, 0, problem.coeffs.d2) if noise is None else noise
    ys, burn = _stationary_samples(problem, burn_in, sample_time, h, noise, y0)
    sq = np.sum(ys * ys, axis=-1)
    mean, se_mean = batch_means(ys, batches)
    m2, se_m2 = batch_means(sq, batches)
    return InvariantMeasureEstimate(mean, float(m2), ys.shape[0], burn,
                                    {"mean": se_mean, "second_moment": float(se_m2)})


@dataclass
class EstimationConfig:
    """Settings for averaged-drift estimation along frozen paths."""

    sample_time: float = 2000.0
    h: float = 0.01
    burn_in: Optional[float] = None
    batches: int = 50
    level: float = 0.95
    seed: int = 0
    stream: tuple = (0,)
    y0: Optional[np.ndarray] = None


@dataclass
class AveragedDrift:
    value: np.ndarray
    ci_half_width: np.ndarray
    standard_error: np.ndarray


def _frozen_drift_batch(coeffs, A2, xs, config):
    """Averaged drift at each row of ``xs`` from independent frozen paths.

    All nodes are advanced together; node ``i`` uses its own noise substream,
    so its value does not depend on which other nodes are in the batch.
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    k = len(xs)
    if not coeffs.b1_depends_on_y:
        y = np.broadcast_to(np.zeros(coeffs.m), (k, coeffs.m))
        return coeffs.b1(xs, y), np.zeros((k, coeffs.n)), np.zeros((k, coeffs.n))
    burn = _snap_up(_burn_in(coeffs.alpha, config.burn_in), config.h)
    grid = TimeGrid.from_step(burn + _snap_up(config.sample_time, config.h), config.h)
    y0 = A2.domain.project(A2.domain.interior_point) if config.y0 is None else config.y0
    noises = [NoiseStream(config.seed, tuple(config.stream) + (i,), coeffs.d2) for i in range(k)]
    dW = np.stack([brownian_increments(n, grid) for n in noises], axis=0)
    y = np.broadcast_to(np.asarray(y0, dtype=float), (k, coeffs.m)).copy()
    start = int(round(burn / grid.h)) + 1
    h = grid.h
    obs = np.empty((grid.count + 1 - start, k, coeffs.n))
    for step in range(grid.count):
        pre = y + h * coeffs.b2(xs, y) + matvec(coeffs.sigma2(xs, y), dW[:, step, :])
        y = resolvent(A2, h, pre)
        if step + 1 >= start:
            obs[step + 1 - start] = coeffs.b1(xs, y)
    mean, se = batch_means(obs, config.batches)
    half = t_quantile(config.level, config.batches - 1) * se
    return mean, half, se


def estimate_averaged_drift(x, coeffs: CoefficientSet, A2,
                            config: Optional[EstimationConfig] = None) -> AveragedDrift:
    """Time average of ``b1(x, Y^x_s)`` after burn-in, with a t confidence interval.

    If ``b1`` is declared independent of ``y`` the value is exact and the
    interval has zero width.
    """
    config = EstimationConfig() if config is None else config
    x = np.atleast_1d(np.asarray(x, dtype=float))
    mean, half, se = _frozen_drift_batch(coeffs, A2, x[None, :], config)
    return AveragedDrift(mean[0], half[0], se[0])


@dataclass
class AveragedModel:
    """Averaged slow equation ``dX in -A1(X) dt + bbar1(X) dt``.

    ``bbar1`` is batched.  ``sigma1`` (used by the large-deviation tools) maps
    ``x`` to ``(n, d1)`` matrices and is only meaningful when ``sigma1`` does
    not depend on the fast variable.
    """

    A1: object
    bbar1: Callable
    sigma1: Optional[Callable] = None
    sigma1_y_independent: bool = False
    provenance: str = "closed-form"
    nodes: Optional[tuple] = None
    table: Optional[np.ndarray] = None
    table_ci: Optional[np.ndarray] = None
    lipschitz_estimate: Optional[float] = None
    extrapolations: list = field(default_factory=list)

    @property
    def dim(self):
        return self.A1.dim


def _table_lipschitz(nodes, table):
    best = 0.0
    for axis, ax in enumerate(nodes):
        if len(ax) < 2:
            continue
        diff = np.diff(table, axis=axis)
        dx = np.diff(ax).reshape([-1 if i == axis else 1 for i in range(len(nodes))] + [1])
        best = max(best, float(np.max(np.linalg.norm(diff, axis=-1) / dx[..., 0])))
    return best


def build_averaged_model(system: SlowFastSystem, x_nodes, config: Optional[EstimationConfig] = None,
                         closed_form: Optional[Callable] = None) -> AveragedModel:
    """Averaged model from a closed form, or tabulated on a tensor grid of ``x``.

    ``x_nodes`` is a 1-d array (``n == 1``) or a sequence of ``n`` 1-d arrays.
    Tabulated drifts are linearly interpolated; evaluations outside the table
    range are linearly extrapolated and recorded in ``model.extrapolations``.
    """
    c = system.coeffs
    y_ref = np.zeros(c.m)

    def frozen_sigma1(x):
        x = np.asarray(x, dtype=float)
        return c.sigma1(x, np.broadcast_to(y_ref, x.shape[:-1] + y_ref.shape))

    sigma1 = None if c.sigma1_depends_on_y else frozen_sigma1

    if closed_form is not None:
        return AveragedModel(system.A1, closed_form, sigma1, not c.sigma1_depends_on_y,
                             "closed-form")

    config = EstimationConfig() if config is None else config
    axes = (np.asarray(x_nodes, dtype=float),) if c.n == 1 and np.ndim(x_nodes) == 1 \
        else tuple(np.asarray(a, dtype=float) for a in x_nodes)
    if len(axes) != c.n or any(a.ndim != 1 or len(a) < 2 or np.any(np.diff(a) <= 0) for a in axes):
        raise ParameterError("x_nodes must give one increasing axis (>= 2 nodes) per slow coordinate")
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    flat = mesh.reshape(-1, c.n)
    mean, half, _ = _frozen_drift_batch(c, system.A2, flat, config)
    shape = tuple(len(a) for a in axes) + (c.n,)
    table, table_ci = mean.reshape(shape), half.reshape(shape)
    interp = RegularGridInterpolator(axes, table, method="linear", bounds_error=False,
                                     fill_value=None)
    lo = np.array([a[0] for a in axes])
    hi = np.array([a[-1] for a in axes])
    model = AveragedModel(system.A1, None, sigma1, not c.sigma1_depends_on_y,
                          "estimated", axes, table, table_ci, _table_lipschitz(axes, table))

    def bbar1(x):
        x = np.asarray(x, dtype=float)
        outside = np.any((x < lo) | (x > hi), axis=-1)
        if np.any(outside):
            worst = float(np.max(np.maximum(lo - x, x - hi)))
            model.extrapolations.append(worst)
            warnings.warn(f"averaged drift evaluated {worst:.3g} outside its table range",
                          RuntimeWarning, stacklevel=2)
        return interp(x.reshape(-1, c.n)).reshape(x.shape)

    model.bbar1 = bbar1
    return model


def integrate_deterministic(op, drift, x0, grid: TimeGrid, forcing=None,
                            batch_shape=()) -> PathSample:
    """Resolvent Euler for ``dx in -A(x) dt + drift(x) dt [+ forcing(x, k) dt]``.

    ``forcing(x, k)`` is an extra drift on step ``k``; ``batch_shape`` lets
    several forcings be integrated at once.
    """
    if grid.count < 1:
        raise ParameterError("grid needs at least one step")
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if op.domain.distance(x0) > 1e-9:
        raise ParameterError("initial state is outside the closure of the domain")
    x = np.broadcast_to(x0, tuple(batch_shape) + x0.shape).copy()
    h = grid.h
    xs, dks = [x], []
    for k in range(grid.count):
        pre = x + h * drift(x)
        if forcing is not None:
            pre = pre + h * forcing(x, k)
        x_new = resolvent(op, h, pre)
        if not np.all(np.isfinite(x_new)):
            raise SimulationError(f"non-finite state at node {k + 1}", index=k + 1)
        dks.append(pre - x_new)
        x = x_new
        xs.append(x)
    return build_path(grid, xs, dks, op.domain)


def solve_averaged(model: AveragedModel, x0, grid: TimeGrid) -> PathSample:
    """Deterministic averaged path by resolvent Euler."""
    return integrate_deterministic(model.A1, model.bbar1, x0, grid)


# ---------------------------------------------------------------------------
# Khasminskii auxiliary processes


@dataclass(frozen=True)
class KhasminskiiConfig:
    """Block length ``delta`` for freezing the slow state in the fast dynamics."""

    delta: float
    iota: Optional[float] = None

    def __post_init__(self):
        if not self.delta > 0:
            raise ParameterError("block length must be positive")
        if self.iota is not None and not 0.0 < self.iota < 1.0:
            raise ParameterError("iota must lie in (0, 1)")

    @classmethod
    def from_gamma(cls, gamma, iota=0.5):
        return cls(gamma ** iota, iota)

    def snapped(self, h):
        """Same config with ``delta`` rounded to a positive multiple of ``h``."""
        return KhasminskiiConfig(max(1, int(round(self.delta / h))) * h, self.iota)

    def block_start(self, t):
        """``t(delta) = floor(t / delta) * delta``."""
        return np.floor(np.asarray(t) / self.delta) * self.delta


def khasminskii_paths(system: SlowFastSystem, config: KhasminskiiConfig, grid: TimeGrid,
                      noise1, noise2, step_factor: int = DEFAULT_STEP_FACTOR):
    """Original pair ``(X, Y)`` and auxiliary pair ``(Xhat, Yhat)`` on shared noise.

    ``Yhat`` uses ``b2, sigma2`` at the block-frozen slow state
    ``X_{t(delta)}``; ``Xhat`` uses ``b1(X_{t(delta)}, Yhat)`` with the
    original noise term ``sqrt(eps) sigma1(X_t, Y_t) dW1``.
    """
    _check_step(system, grid, step_factor)
    if config.delta < grid.h * (1 - 1e-12):
        raise ParameterError("block length must be at least the grid step")
    ratio = config.delta / grid.h
    per_block = int(round(ratio))
    if abs(ratio - per_block) > 1e-9 * max(1.0, ratio):
        raise ParameterError(f"block length {config.delta} is not a multiple of the step {grid.h}; "
                             "use KhasminskiiConfig.snapped(h)")
    dW1 = _increments(noise1, grid)
    dW2 = _increments(noise2, grid)
    batch = dW1.shape[:-2]
    x = np.broadcast_to(system.x0, batch + system.x0.shape).copy()
    y = np.broadcast_to(system.y0, batch + system.y0.shape).copy()
    xh, yh, xb = x.copy(), y.copy(), x.copy()
    h = grid.h
    out = {k: [v] for k, v in (("X", x), ("Y", y), ("Xhat", xh), ("Yhat", yh))}
    dks = {k: [] for k in out}
    c = system.coeffs
    for k in range(grid.count):
        if k % per_block == 0:
            xb = x
        px = _slow_pre(system, x, y, h, dW1[..., k, :])
        py = _fast_pre(system, x, y, h, dW2[..., k, :])
        pyh = _fast_pre(system, xb, yh, h, dW2[..., k, :])
        pxh = (xh + h * c.b1(xb, yh)
               + np.sqrt(system.epsilon) * matvec(c.sigma1(x, y), dW1[..., k, :]))
        new = {"X": resolvent(system.A1, h, px), "Y": resolvent(system.A2, h, py),
               "Xhat": resolvent(system.A1, h, pxh), "Yhat": resolvent(system.A2, h, pyh)}
        for key, pre in (("X", px), ("Y", py), ("Xhat", pxh), ("Yhat", pyh)):
            dks[key].append(pre - new[key])
            out[key].append(new[key])
        x, y, xh, yh = new["X"], new["Y"], new["Xhat"], new["Yhat"]
    doms = {"X": system.A1.domain, "Xhat": system.A1.domain,
            "Y": system.A2.domain, "Yhat": system.A2.domain}
    return {k: build_path(grid, out[k], dks[k], doms[k]) for k in out}


# ---------------------------------------------------------------------------
# strong averaging error


@dataclass
class AveragingReport:
    epsilons: list
    gammas: list
    errors: list
    ci_half_widths: list
    replications: int
    seed: int
    steps: list
    coupling_note: str = ("one deterministic averaged path per epsilon shared by all "
                          "replications; sup taken over grid nodes")
    extra: dict = field(default_factory=dict)

    CSV_FIELDS = ("epsilon", "gamma", "error", "ci_half_width", "reps", "seed")

    def rows(self):
        return [{"epsilon": e, "gamma": g, "error": err, "ci_half_width": ci,
                 "reps": self.replications, "seed": self.seed}
                for e, g, err, ci in zip(self.epsilons, self.gammas, self.errors,
                                         self.ci_half_widths)]

    def strictly_decreasing(self):
        return bool(np.all(np.diff(self.errors) < 0))

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["rows"] = self.rows()
        return d


def replication_streams(seed, key, reps, dim):
    return [NoiseStream(seed, tuple(key) + (r,), dim) for r in range(reps)]


def _map_chunks(fn, reps, jobs):
    """Apply ``fn(start, stop)`` over replication chunks and concatenate in order."""
    if jobs is None or jobs <= 1 or reps < 2:
        return fn(0, reps)
    bounds = np.linspace(0, reps, min(jobs, reps) + 1).astype(int)
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        parts = list(pool.map(lambda ab: fn(*ab), zip(bounds[:-1], bounds[1:])))
    return np.concatenate(parts, axis=0)


def sup_sq_errors(system, grid, reference, seed, key, reps, jobs=1, u1=None, u2=None,
                  step_factor=DEFAULT_STEP_FACTOR):
    """Per-replication ``max_k |X_k - reference_k|^2``."""
    c = system.coeffs

    def chunk(a, b):
        n1 = [NoiseStream(seed, tuple(key) + (r, 1), c.d1) for r in range(a, b)]
        n2 = [NoiseStream(seed, tuple(key) + (r, 2), c.d2) for r in range(a, b)]
        slow, _ = run_coupled(system, grid, n1, n2, u1=u1, u2=u2, step_factor=step_factor)
        diff = slow.states - reference
        return np.max(np.sum(diff * diff, axis=-1), axis=-1)

    return _map_chunks(chunk, reps, jobs)


def averaging_error(system: SlowFastSystem, epsilons: Sequence[float], gamma_rule: GammaRule,
                    averaged: AveragedModel, replications: int = 200, seed: int = 0,
                    step_factor: int = DEFAULT_STEP_FACTOR, jobs: int = 1,
                    min_replications: int = 50, level: float = 0.95) -> AveragingReport:
    """Monte Carlo estimate of ``E sup_t |X^{eps,gamma}_t - Xbar_t|^2`` per epsilon."""
    if replications < min_replications:
        raise ParameterError(f"need at least {min_replications} replications")
    eps = [float(e) for e in epsilons]
    gammas = [gamma_rule(e) for e in eps]
    check_regime(eps, gammas)
    errors, halves, steps = [], [], []
    for i, (e, g) in enumerate(zip(eps, gammas)):
        sys_e = system.with_scales(e, g)
        grid = TimeGrid.with_max_step(system.T, sys_e.max_step(step_factor))
        xbar = solve_averaged(averaged, system.x0, grid).states
        errs = sup_sq_errors(sys_e, grid, xbar, seed, (1, i), replications, jobs,
                             step_factor=step_factor)
        mean, half = mean_ci(errs, level)
        errors.append(float(mean))
        halves.append(float(half))
        steps.append(grid.count)
    return AveragingReport(eps, gammas, errors, halves, replications, seed, steps)


# ---------------------------------------------------------------------------
# assumption audit and contraction


def gaussian_state_sampler(n, m, scale=2.0):
    def sample(rng, count):
        return (scale * rng.standard_normal((count, n)), scale * rng.standard_normal((count, m)),
                scale * rng.standard_normal((count, n)), scale * rng.standard_normal((count, m)))
    return sample


def _sqnorm(a, axes):
    return np.sum(a * a, axis=axes)


def audit_assumptions(coeffs: CoefficientSet, sampler: Optional[Callable] = None,
                      count: int = 10_000, seed: int = 0, tol: float = 1e-9,
                      A1=None, A2=None) -> dict:
    """Sampled checks of the standing assumptions, one report per assumption.

    ``worst_violation`` is the smallest slack (negative means violated):

    * ``H1_b1_sigma1`` / ``H1_b2_sigma2``: ``L - max`` of the squared
      Lipschitz ratio;
    * ``H2_b2_sigma2``: ``-beta - max`` of
      ``(2<dy, db2> + ||dsigma2||^2) / |dy|^2`` at common ``x``, also requiring
      ``beta > 2 L_b2s2``;
    * ``H3_sigma2``: ``bound - max ||sigma2||``;
    * ``H_A1`` / ``H_A2`` (when operators are given): margin of the domain's
      interior point.
    """
    c = coeffs
    sampler = gaussian_state_sampler(c.n, c.m) if sampler is None else sampler
    rng = np.random.default_rng(seed)
    x1, y1, x2, y2 = (np.atleast_2d(np.asarray(a, dtype=float)) for a in sampler(rng, count))
    dz = _sqnorm(x1 - x2, -1) + _sqnorm(y1 - y2, -1)
    reports = {}

    def lipschitz(name, b, s, declared):
        num = _sqnorm(b(x1, y1) - b(x2, y2), -1) + _sqnorm(s(x1, y1) - s(x2, y2), (-2, -1))
        ratio = num / np.where(dz > 0, dz, np.inf)
        k = int(np.argmax(ratio))
        if declared is None:
            reports[name] = AuditReport(name, False, float("nan"), None, count,
                                        {"max_ratio": float(ratio[k]), "declared": None})
            return
        slack = declared - float(ratio[k])
        reports[name] = AuditReport(name, slack >= -tol, slack, (x1[k], y1[k], x2[k], y2[k]),
                                    count, {"max_ratio": float(ratio[k]), "declared": declared})

    lipschitz("H1_b1_sigma1", c.b1, c.sigma1, c.L_b1s1)
    lipschitz("H1_b2_sigma2", c.b2, c.sigma2, c.L_b2s2)

    dy = y1 - y2
    num = (2.0 * np.sum(dy * (c.b2(x1, y1) - c.b2(x1, y2)), axis=-1)
           + _sqnorm(c.sigma2(x1, y1) - c.sigma2(x1, y2), (-2, -1)))
    dyy = _sqnorm(dy, -1)
    ratio = num / np.where(dyy > 0, dyy, np.inf)
    k = int(np.argmax(ratio))
    detail = {"max_ratio": float(ratio[k]), "beta": c.beta, "L_b2s2": c.L_b2s2, "alpha": c.alpha}
    if c.beta is None:
        reports["H2_b2_sigma2"] = AuditReport("H2_b2_sigma2", False, float("nan"), None, count, detail)
    else:
        slack = -c.beta - float(ratio[k])
        ok = slack >= -tol and c.alpha is not None and c.alpha > 0
        reports["H2_b2_sigma2"] = AuditReport("H2_b2_sigma2", ok, slack,
                                              (x1[k], y1[k], y2[k]), count, detail)

    norms = np.sqrt(_sqnorm(np.concatenate([c.sigma2(x1, y1), c.sigma2(x2, y2)]), (-2, -1)))
    k = int(np.argmax(norms))
    if c.sigma2_bound is None:
        reports["H3_sigma2"] = AuditReport("H3_sigma2", False, float("nan"), None, count,
                                           {"max_norm": float(norms[k])})
    else:
        slack = c.sigma2_bound - float(norms[k])
        reports["H3_sigma2"] = AuditReport("H3_sigma2", slack >= -tol, slack, None, count,
                                           {"max_norm": float(norms[k]), "bound": c.sigma2_bound})

    for name, op in (("H_A1", A1), ("H_A2", A2)):
        if op is None:
            continue
        dom = op.domain
        margin = float(dom.margin(dom.interior_point))
        reports[name] = AuditReport(name, margin > 0, margin, None, 1,
                                    {"interior_point": dom.interior_point.tolist()})
    return reports


@dataclass
class ContractionFit:
    fitted_rate: float
    alpha: Optional[float]
    passed: Optional[bool]
    window: float


def contraction_fit(problem: FrozenProblem, y1, y2, T: float, h: float, noise,
                    window: Optional[float] = None) -> ContractionFit:
    """Exponential rate of ``E|Y^{y1} - Y^{y2}|^2`` under synchronous coupling.

    Both frozen paths are driven by the same noise (one stream, or a list of
    streams averaged over).  The rate is the negative least-squares slope of
    ``log E|dY_t|^2`` over ``[0, window]``; it passes when it is at least
    ``0.8 * alpha``.
    """
    y1 = np.atleast_1d(np.asarray(y1, dtype=float))
    y2 = np.atleast_1d(np.asarray(y2, dtype=float))
    if np.array_equal(y1, y2):
        raise ParameterError("contraction fit is undefined for identical initial states")
    p1 = simulate_frozen(problem, T, h, noise, y1)
    p2 = simulate_frozen(problem, T, h, noise, y2)
    gap = np.sum((p1.states - p2.states) ** 2, axis=-1)
    if gap.ndim > 1:
        gap = gap.mean(axis=0)
    t = p1.times
    window = T if window is None else window
    use = (t <= window + 1e-12) & (gap > 1e-280)
    if use.sum() < 2:
        raise ParameterError("not enough nonzero gap values to fit a rate")
    slope = np.polyfit(t[use], np.log(gap[use]), 1)[0]
    rate = float(-slope)
    alpha = problem.alpha
    return ContractionFit(rate, alpha, None if alpha is None else rate >= 0.8 * alpha, window)
