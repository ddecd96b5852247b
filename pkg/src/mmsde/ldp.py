"""Large-deviation tools for the slow component.

Controls live in ``L^2([0, T]; R^{d1 + d2})`` and are represented as
piecewise-constant functions.  The skeleton equation::

    dx in -A1(x) dt + bbar1(x) dt + sigma1(x) pi1 h(t) dt

maps a control to a deterministic path, and the rate function of a path
``s`` is ``I(s) = 0.5 * inf { ||h||^2 : skeleton(h) = s }``.  The infimum is
computed by a quadratic-penalty method over the control coefficients.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import optimize, stats

from .errors import CapabilityError, ParameterError
from .monotone import ZeroOperator
from .multiscale import (DEFAULT_STEP_FACTOR, AveragedModel, AveragingReport, GammaRule,
                         SlowFastSystem, check_regime, integrate_deterministic,
                         run_coupled, solve_averaged, sup_sq_errors)
from .paths import NoiseStream, PathSample, TimeGrid, matvec
from .stats import clopper_pearson, mean_ci

__all__ = [
    "Control", "SkeletonProblem", "RateConfig", "RateFunctionResult", "TailEvent",
    "TailProbeReport", "solve_skeleton", "rate_function", "simulate_controlled",
    "weak_convergence_probe", "tail_probability_probe", "brownian_sup_tail",
]


@dataclass(frozen=True)
class Control:
    """Piecewise-constant control with ``len(values)`` equal pieces on ``[0, T]``.

    ``values`` has shape ``(pieces, d1 + d2)``; the first ``d1`` columns are
    the slow part ``pi1`` and the rest the fast part ``pi2``.
    """

    values: np.ndarray
    T: float
    d1: int

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or len(v) == 0 or not np.all(np.isfinite(v)):
            raise ParameterError("control values must be a finite (pieces, dim) array")
        if not 0 <= self.d1 <= v.shape[1]:
            raise ParameterError("d1 exceeds the control dimension")
        if not self.T > 0:
            raise ParameterError("control horizon must be positive")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "T", float(self.T))

    @classmethod
    def constant(cls, value, T, d1, pieces=64):
        value = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(np.tile(value, (pieces, 1)), T, d1)

    @classmethod
    def zeros(cls, T, d1, d2, pieces=64):
        return cls(np.zeros((pieces, d1 + d2)), T, d1)

    @property
    def pieces(self):
        return self.values.shape[0]

    @property
    def dim(self):
        return self.values.shape[1]

    @property
    def piece_length(self):
        return self.T / self.pieces

    @property
    def norm_sq(self):
        """``||h||^2 = sum_i |h_i|^2 * T / pieces``."""
        return float(np.sum(self.values * self.values) * self.piece_length)

    @property
    def pi1(self):
        return self.values[:, :self.d1]

    @property
    def pi2(self):
        return self.values[:, self.d1:]

    def in_ball(self, N):
        return self.norm_sq <= N

    def piece_index(self, grid: TimeGrid):
        """Index of the piece active on each step of ``grid`` (step midpoints)."""
        if abs(grid.T - self.T) > 1e-12 * max(1.0, self.T):
            raise ParameterError("control and grid horizons differ")
        mid = (np.arange(grid.count) + 0.5) * grid.h
        return np.minimum((mid / self.piece_length).astype(int), self.pieces - 1)

    def on_grid(self, grid: TimeGrid):
        """Per-step control values, shape ``(count, dim)``."""
        return self.values[self.piece_index(grid)]

    def concatenate(self, other: "Control"):
        if abs(self.piece_length - other.piece_length) > 1e-12 or self.d1 != other.d1 \
                or self.dim != other.dim:
            raise ParameterError("controls must share piece length and split")
        return Control(np.vstack([self.values, other.values]), self.T + other.T, self.d1)

    def to_dict(self):
        return {"T": self.T, "d1": self.d1, "pieces": self.pieces,
                "norm_sq": self.norm_sq, "values": self.values.tolist()}


@dataclass
class SkeletonProblem:
    averaged: AveragedModel
    x0: np.ndarray
    grid: TimeGrid

    def __post_init__(self):
        if self.averaged.sigma1 is None or not self.averaged.sigma1_y_independent:
            raise CapabilityError(
                "the skeleton equation needs sigma1 independent of the fast variable")
        self.x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))

    @property
    def d1(self):
        return np.shape(self.averaged.sigma1(self.x0))[-1]


def _skeleton(problem: SkeletonProblem, u1_steps, batch_shape=()):
    sigma1 = problem.averaged.sigma1
    return integrate_deterministic(problem.averaged.A1, problem.averaged.bbar1, problem.x0,
                                   problem.grid,
                                   forcing=lambda x, k: matvec(sigma1(x), u1_steps[..., k, :]),
                                   batch_shape=batch_shape)


def solve_skeleton(problem: SkeletonProblem, h: Control) -> PathSample:
    """Resolvent Euler solution of the skeleton equation driven by ``h``."""
    if h.d1 != problem.d1:
        raise ParameterError(f"control slow part has {h.d1} columns, sigma1 has {problem.d1}")
    return _skeleton(problem, h.on_grid(problem.grid)[:, :h.d1])


@dataclass
class RateConfig:
    pieces: int = 64
    mu_schedule: tuple = tuple(10.0 ** k for k in range(7))
    fd_step: float = 1e-6
    tol_factor: float = 1e-3
    maxiter: int = 500
    stall_ratio: float = 0.99


@dataclass
class RateFunctionResult:
    value: float
    infeasible: bool
    optimal_control: Optional[Control]
    residual: float
    tolerance: float
    trace: list = field(default_factory=list)

    def to_dict(self):
        return {"value": None if math.isinf(self.value) else self.value,
                "infinite": math.isinf(self.value), "infeasible": self.infeasible,
                "residual": self.residual, "tolerance": self.tolerance,
                "optimal_control": None if self.optimal_control is None
                else self.optimal_control.to_dict(),
                "trace": self.trace}


def _target_states(target, problem):
    states = target.states if isinstance(target, PathSample) else np.asarray(target, dtype=float)
    if states.ndim == 1:
        states = states[:, None]
    if states.shape != (problem.grid.count + 1, problem.x0.shape[0]):
        raise ParameterError(f"target must have shape {(problem.grid.count + 1, problem.x0.shape[0])}")
    if np.max(np.abs(states[0] - problem.x0)) > 1e-9:
        raise ParameterError("target must start at x0")
    if np.max(problem.averaged.A1.domain.distance(states)) > 1e-9:
        raise ParameterError("target leaves the closure of D(A1)")
    return states


def rate_function(target, problem: SkeletonProblem,
                  config: Optional[RateConfig] = None) -> RateFunctionResult:
    """``0.5 * min ||h||^2`` over piecewise-constant controls steering the skeleton to ``target``.

    Each penalty stage minimises ``0.5 ||h||^2 + mu * ||x^h - target||^2_{L2}``
    with L-BFGS, warm-started from the previous stage, using forward
    finite-difference gradients evaluated as one batched skeleton solve.
    Feasibility is judged by the sup-norm residual over grid nodes.  Only the
    slow part of the control is optimised; the fast part does not enter the
    skeleton, so it is zero at the optimum.
    """
    config = RateConfig() if config is None else config
    target = _target_states(target, problem)
    grid = problem.grid
    d1 = problem.d1
    pieces = config.pieces
    idx = Control.zeros(grid.T, d1, 0, pieces).piece_index(grid)
    dtau = grid.T / pieces
    p = pieces * d1
    tol = config.tol_factor * (1.0 + float(np.max(np.abs(target))))

    def states_for(batch):
        # batch: (B, p) -> (B, count+1, n)
        u1 = batch.reshape(len(batch), pieces, d1)[:, idx, :]
        return _skeleton(problem, u1, batch_shape=(len(batch),)).states

    def objective_terms(batch):
        diff = states_for(batch) - target
        mismatch = np.sum(diff[:, 1:] ** 2, axis=(1, 2)) * grid.h
        resid = np.max(np.sqrt(np.sum(diff * diff, axis=-1)), axis=-1)
        energy = 0.5 * np.sum(batch * batch, axis=1) * dtau
        return energy, mismatch, resid

    trace = []
    v = np.zeros(p)
    best = None
    prev_resid = None
    for mu in config.mu_schedule:
        def fun(w):
            steps = config.fd_step * np.maximum(1.0, np.abs(w))
            batch = np.vstack([w[None, :], w[None, :] + np.diag(steps)])
            energy, mismatch, _ = objective_terms(batch)
            J = energy + mu * mismatch
            return float(J[0]), (J[1:] - J[0]) / steps

        res = optimize.minimize(fun, v, jac=True, method="L-BFGS-B",
                                options={"maxiter": config.maxiter, "ftol": 1e-15,
                                         "gtol": 1e-12, "maxcor": 30})
        v = res.x
        energy, mismatch, resid = objective_terms(v[None, :])
        stage = {"mu": mu, "half_norm_sq": float(energy[0]), "mismatch": float(mismatch[0]),
                 "residual": float(resid[0]), "iterations": int(res.nit)}
        trace.append(stage)
        if resid[0] <= tol and (best is None or energy[0] < best[0]):
            best = (float(energy[0]), v.copy(), float(resid[0]))
        if resid[0] > tol and prev_resid is not None and resid[0] >= config.stall_ratio * prev_resid:
            break
        prev_resid = float(resid[0])

    if best is None:
        return RateFunctionResult(math.inf, True, None, float(trace[-1]["residual"]), tol, trace)
    values = np.zeros((pieces, d1))
    values[:] = best[1].reshape(pieces, d1)
    ctrl = Control(values, grid.T, d1)
    return RateFunctionResult(0.5 * ctrl.norm_sq, False, ctrl, best[2], tol, trace)


# ---------------------------------------------------------------------------
# controlled slow-fast system


def simulate_controlled(system: SlowFastSystem, u: Control, grid: TimeGrid, noise1, noise2,
                        N: Optional[float] = None, step_factor: int = DEFAULT_STEP_FACTOR):
    """Slow-fast system with the control terms of the weak-convergence argument.

    The slow drift gains ``sigma1 pi1 u``, the fast drift gains
    ``sigma2 pi2 u / sqrt(gamma eps)``.
    """
    c = system.coeffs
    if u.d1 != c.d1 or u.dim != c.d1 + c.d2:
        raise ParameterError("control split does not match (d1, d2)")
    if N is not None and not u.in_ball(N):
        raise ParameterError(f"control norm {u.norm_sq} exceeds N = {N}")
    steps = u.on_grid(grid)
    return run_coupled(system, grid, noise1, noise2, u1=steps[:, :c.d1], u2=steps[:, c.d1:],
                       step_factor=step_factor)


def fast_control_scale(system: SlowFastSystem):
    return 1.0 / math.sqrt(system.gamma * system.epsilon)


def weak_convergence_probe(system: SlowFastSystem, epsilons: Sequence[float],
                           gamma_rule: GammaRule, u: Control, averaged: AveragedModel,
                           replications: int = 200, seed: int = 0, N: Optional[float] = None,
                           step_factor: int = DEFAULT_STEP_FACTOR, jobs: int = 1,
                           level: float = 0.95) -> AveragingReport:
    """``E sup_t |X^{eps,gamma,u}_t - xbar^u_t|^2`` for a fixed deterministic control."""
    c = system.coeffs
    N = math.ceil(u.norm_sq) if N is None else N
    if not u.in_ball(N):
        raise ParameterError(f"control norm {u.norm_sq} exceeds N = {N}")
    eps = [float(e) for e in epsilons]
    gammas = [gamma_rule(e) for e in eps]
    check_regime(eps, gammas)
    errors, halves, steps = [], [], []
    for i, (e, g) in enumerate(zip(eps, gammas)):
        sys_e = system.with_scales(e, g)
        grid = TimeGrid.with_max_step(system.T, sys_e.max_step(step_factor))
        skeleton = solve_skeleton(SkeletonProblem(averaged, system.x0, grid), u).states
        per_step = u.on_grid(grid)
        errs = sup_sq_errors(sys_e, grid, skeleton, seed, (2, i), replications, jobs,
                             u1=per_step[:, :c.d1], u2=per_step[:, c.d1:],
                             step_factor=step_factor)
        mean, half = mean_ci(errs, level)
        errors.append(float(mean))
        halves.append(float(half))
        steps.append(grid.count)
    return AveragingReport(eps, gammas, errors, halves, replications, seed, steps,
                           coupling_note="one deterministic skeleton path per epsilon shared by "
                                         "all replications; sup taken over grid nodes",
                           extra={"control_norm_sq": u.norm_sq, "N": N})


# ---------------------------------------------------------------------------
# tail probabilities


@dataclass
class TailEvent:
    """``sup_t |X_t - ref(t)| > r`` (two-sided) or ``sup_t (X_t - ref(t))_0 > r`` (upper).

    ``reference`` maps grid times to ``(count + 1, n)`` states; ``None`` means
    the averaged path.
    """

    r: float
    side: str = "two-sided"
    reference: Optional[Callable] = None

    def __post_init__(self):
        if not self.r > 0:
            raise ParameterError("event radius must be positive")
        if self.side not in ("two-sided", "upper"):
            raise ParameterError("side must be 'two-sided' or 'upper'")


@dataclass
class TailProbeReport:
    rows: list
    rate: Optional[float]
    inconclusive: bool
    seed: int
    trend: str
    budget_note: str = ""

    CSV_FIELDS = ("epsilon", "p_hat", "ci_low", "ci_high", "neg_eps_log_p")

    def to_dict(self):
        return dataclasses.asdict(self)


# arrays per tail-probe chunk are kept below this many floats
CHUNK_ELEMENTS = 20_000_000


def brownian_sup_tail(r, eps, T, side="two-sided", terms=50):
    """Exact ``P(sup_{t<=T} sqrt(eps) W_t > r)`` or ``P(sup |sqrt(eps) W_t| > r)``.

    One-sided: ``2 Phi_bar(a)`` with ``a = r / sqrt(eps T)`` (reflection
    principle).  Two-sided: the alternating image series
    ``4 sum_k (-1)^k Phi_bar((2k+1) a)``.
    """
    a = r / math.sqrt(eps * T)
    if side == "upper":
        return 2.0 * stats.norm.sf(a)
    k = np.arange(terms)
    return float(4.0 * np.sum((-1.0) ** k * stats.norm.sf((2 * k + 1) * a)))


def _bridge_crossings(x, ref, r, s2h, side, u_up, u_dn):
    """Brownian-bridge crossing test between consecutive nodes (scalar slow state)."""
    d = x - ref
    with np.errstate(divide="ignore", invalid="ignore"):
        return _bridge_hits(d, r, s2h, side, u_up, u_dn)


def _bridge_hits(d, r, s2h, side, u_up, u_dn):
    # a zero-noise step gives 0/0 -> nan, which never counts as a crossing
    up0, up1 = r - d[..., :-1], r - d[..., 1:]
    p_up = np.exp(-2.0 * np.maximum(up0, 0) * np.maximum(up1, 0) / s2h)
    hit = np.any(u_up < p_up, axis=-1)
    if side == "two-sided":
        dn0, dn1 = r + d[..., :-1], r + d[..., 1:]
        p_dn = np.exp(-2.0 * np.maximum(dn0, 0) * np.maximum(dn1, 0) / s2h)
        hit |= np.any(u_dn < p_dn, axis=-1)
    return hit


def tail_probability_probe(system: SlowFastSystem, epsilons: Sequence[float],
                           gamma_rule: GammaRule, event: TailEvent, averaged: AveragedModel,
                           paths: int = 100_000, rate: Optional[float] = None, seed: int = 0,
                           chunk: int = 100_000, slow_steps: int = 50,
                           step_factor: int = DEFAULT_STEP_FACTOR,
                           bridge: bool = True, level: float = 0.95) -> TailProbeReport:
    """Estimate ``P(event)`` per epsilon with exact binomial intervals.

    When ``b1`` and ``sigma1`` do not depend on the fast variable only the
    slow equation is simulated, on ``slow_steps`` steps.  For an
    unconstrained scalar slow state (``A1 = 0``, ``n = 1``) a Brownian-bridge
    crossing correction between nodes removes the discrete-monitoring bias;
    otherwise the sup is taken over grid nodes.
    """
    c = system.coeffs
    eps = [float(e) for e in epsilons]
    gammas = [gamma_rule(e) for e in eps]
    check_regime(eps, gammas)
    slow_only = not (c.b1_depends_on_y or c.sigma1_depends_on_y)
    use_bridge = bridge and isinstance(system.A1, ZeroOperator) and c.n == 1
    rows = []
    for i, (e, g) in enumerate(zip(eps, gammas)):
        sys_e = system.with_scales(e, g)
        if slow_only:
            grid = TimeGrid(system.T, slow_steps)
        else:
            grid = TimeGrid.with_max_step(system.T, sys_e.max_step(step_factor))
        if event.reference is None:
            ref = solve_averaged(averaged, system.x0, grid).states
        else:
            ref = np.asarray(event.reference(grid.times), dtype=float).reshape(grid.count + 1, -1)
        per_path = (grid.count + 1) * (c.n + c.m + c.d1 + c.d2)
        hits = 0
        done = 0
        j = 0
        while done < paths:
            size = min(chunk, paths - done, max(1, CHUNK_ELEMENTS // per_path))
            stream = NoiseStream(seed, (3, i, j), c.d1)
            gen = stream.generator()
            dW1 = math.sqrt(grid.h) * gen.standard_normal((size, grid.count, c.d1))
            if slow_only:
                x = np.broadcast_to(system.x0, (size, c.n)).copy()
                y = np.broadcast_to(system.y0, (size, c.m))
                xs = [x]
                for k in range(grid.count):
                    pre = (x + grid.h * c.b1(x, y)
                           + math.sqrt(e) * matvec(c.sigma1(x, y), dW1[:, k, :]))
                    x = system.A1.resolvent(grid.h, pre)
                    xs.append(x)
                states = np.stack(xs, axis=-2)
            else:
                dW2 = math.sqrt(grid.h) * gen.standard_normal((size, grid.count, c.d2))
                states = run_coupled(sys_e, grid, dW1, dW2, step_factor=step_factor)[0].states
            diff = states - ref
            if event.side == "upper":
                excess = diff[..., 0]
                hit = np.max(excess, axis=-1) > event.r
            else:
                excess = np.sqrt(np.sum(diff * diff, axis=-1))
                hit = np.max(excess, axis=-1) > event.r
            if use_bridge:
                s2h = e * np.sum(c.sigma1(states[:, :-1, :], np.broadcast_to(
                    system.y0, states[:, :-1, :].shape[:-1] + system.y0.shape)) ** 2,
                    axis=(-2, -1)) * grid.h
                u = gen.uniform(size=(2, size, grid.count))
                hit |= _bridge_crossings(states[..., 0], ref[:, 0], event.r, s2h,
                                         event.side, u[0], u[1])
            hits += int(np.sum(hit))
            done += size
            j += 1
        p_hat = hits / paths
        lo, hi = clopper_pearson(hits, paths, level)
        rows.append({"epsilon": e, "gamma": g, "hits": hits, "trials": paths, "p_hat": p_hat,
                     "ci_low": lo, "ci_high": hi,
                     "neg_eps_log_p": -e * math.log(p_hat) if hits else float("nan"),
                     "bridge_corrected": use_bridge})
    conclusive = [r for r in rows if r["hits"] > 0]
    inconclusive = not conclusive
    note = "" if rows[0]["hits"] else (
        f"no hits at the largest epsilon with {paths} paths; estimates are inconclusive")
    if inconclusive:
        trend = "inconclusive: no event observed at any epsilon"
    else:
        vals = [r["neg_eps_log_p"] for r in conclusive]
        steps = np.diff(vals)
        shape = ("increasing" if np.all(steps > 0) else "decreasing" if np.all(steps < 0)
                 else "not monotone") if len(vals) > 1 else "single value"
        trend = f"-eps log p {shape} over conclusive epsilons as epsilon decreases"
        if rate is not None:
            gaps = np.abs(np.asarray(vals) - rate)
            if len(vals) > 1:
                trend += "; approaching" if np.all(np.diff(gaps) < 0) else "; not approaching"
                trend += " the rate"
            trend += f"; last value {vals[-1]:.4g} vs rate {rate:.4g}"
    return TailProbeReport(rows, rate, inconclusive, seed, trend, note)
