"""Maximal monotone operators on R^n handled through their resolvents.

Every operator in this module is represented by the computable objects that
the stochastic schemes actually need: the resolvent ``J_lam = (I + lam A)^-1``,
the Yosida approximation ``A_lam = (I - J_lam) / lam`` and the closure of the
domain as a :class:`ConvexSet`.  The catalogue is deliberately small:

* :class:`ZeroOperator` -- ``A = 0``;
* :class:`LinearOperator` -- ``A x = M x`` with ``M`` positive semidefinite;
* :class:`Subdifferential` -- ``A = d f`` for a convex function ``f`` built
  from absolute values, quadratics and indicators;
* :class:`NormalCone` -- ``A = N_O``, the normal cone of a closed convex set,
  whose resolvent is the Euclidean projection onto ``O``.

All array arguments are batched: the last axis is the state coordinate and any
leading axes are treated as independent points.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import linprog

from .errors import CapabilityError, ParameterError

__all__ = [
    "Box", "Ball", "HalfSpace", "Polyhedron", "WholeSpace",
    "AbsNorm", "Quadratic", "Indicator", "SumFunction",
    "ZeroOperator", "LinearOperator", "Subdifferential", "NormalCone",
    "AuditReport",
    "project", "prox", "resolvent", "yosida",
    "audit_monotone", "audit_firm_nonexpansive", "audit_convexity",
    "gaussian_pair_sampler",
]

# points whose distance to a set is below this are returned unchanged by
# ``project``; makes projection idempotent on its own output
_INSIDE_ATOL = 1e-12
DYKSTRA_MAX_SWEEPS = 200
DYKSTRA_TOL = 1e-10


def _frozen(a, dtype=float):
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


def _check_lambda(lam):
    lam = float(lam)
    if not np.isfinite(lam) or lam <= 0.0:
        raise ParameterError(f"resolvent parameter must be positive, got {lam!r}")
    return lam


def _as_points(x, dim):
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1)
    if x.shape[-1] != dim:
        raise ParameterError(f"expected points of dimension {dim}, got shape {x.shape}")
    return x


# ---------------------------------------------------------------------------
# convex sets


class _ConvexSet:
    dim: int

    def project(self, x):
        x = _as_points(x, self.dim)
        p = self._project(x)
        return np.where(self._inside(x)[..., None], x, p)

    def _inside(self, x):
        return self.distance(x) <= _INSIDE_ATOL * (1.0 + np.linalg.norm(x, axis=-1))

    def distance(self, x):
        """Euclidean distance from ``x`` to the set (zero inside)."""
        x = _as_points(x, self.dim)
        return np.linalg.norm(x - self._project(x), axis=-1)

    def contains(self, x, tol=1e-9):
        return self.distance(x) <= tol

    def _project(self, x):
        raise NotImplementedError


@dataclass(frozen=True)
class WholeSpace(_ConvexSet):
    dim: int

    def __post_init__(self):
        if self.dim < 1:
            raise ParameterError("dimension must be at least 1")

    @property
    def interior_point(self):
        return np.zeros(self.dim)

    def margin(self, x):
        x = _as_points(x, self.dim)
        return np.full(x.shape[:-1], np.inf)

    def _project(self, x):
        return x

    def distance(self, x):
        x = _as_points(x, self.dim)
        return np.zeros(x.shape[:-1])


@dataclass(frozen=True)
class Box(_ConvexSet):
    """Coordinatewise bounds ``lower <= x <= upper``; infinite bounds allowed."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ParameterError("box bounds must be 1-d arrays of equal length")
        if np.any(np.isnan(lo)) or np.any(np.isnan(hi)) or np.any(lo >= hi):
            raise ParameterError("box needs lower < upper in every coordinate")
        object.__setattr__(self, "lower", _frozen(lo))
        object.__setattr__(self, "upper", _frozen(hi))

    @property
    def dim(self):
        return self.lower.shape[0]

    @property
    def interior_point(self):
        lo, hi = self.lower, self.upper
        mid = np.where(np.isfinite(lo) & np.isfinite(hi), 0.5 * (lo + hi), 0.0)
        mid = np.where(np.isfinite(lo) & ~np.isfinite(hi), np.maximum(lo + 1.0, 0.0), mid)
        mid = np.where(~np.isfinite(lo) & np.isfinite(hi), np.minimum(hi - 1.0, 0.0), mid)
        return mid

    def margin(self, x):
        x = _as_points(x, self.dim)
        return np.min(np.minimum(x - self.lower, self.upper - x), axis=-1)

    def _project(self, x):
        return np.clip(x, self.lower, self.upper)


@dataclass(frozen=True)
class Ball(_ConvexSet):
    center: np.ndarray
    radius: float

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.center, dtype=float))
        if c.ndim != 1 or not np.all(np.isfinite(c)):
            raise ParameterError("ball center must be a finite 1-d array")
        if not self.radius > 0 or not np.isfinite(self.radius):
            raise ParameterError("ball radius must be positive and finite")
        object.__setattr__(self, "center", _frozen(c))
        object.__setattr__(self, "radius", float(self.radius))

    @property
    def dim(self):
        return self.center.shape[0]

    @property
    def interior_point(self):
        return np.array(self.center)

    def margin(self, x):
        x = _as_points(x, self.dim)
        return self.radius - np.linalg.norm(x - self.center, axis=-1)

    def _project(self, x):
        d = x - self.center
        r = np.linalg.norm(d, axis=-1, keepdims=True)
        scale = np.where(r > self.radius, self.radius / np.where(r > 0, r, 1.0), 1.0)
        return self.center + d * scale


@dataclass(frozen=True)
class HalfSpace(_ConvexSet):
    """``{x : <normal, x> <= offset}``."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        a = np.atleast_1d(np.asarray(self.normal, dtype=float))
        if a.ndim != 1 or not np.all(np.isfinite(a)) or not np.any(a != 0):
            raise ParameterError("half-space normal must be a finite nonzero vector")
        object.__setattr__(self, "normal", _frozen(a))
        object.__setattr__(self, "offset", float(self.offset))

    @property
    def dim(self):
        return self.normal.shape[0]

    @property
    def interior_point(self):
        a = self.normal
        return a * (self.offset - 1.0) / (a @ a)

    def margin(self, x):
        x = _as_points(x, self.dim)
        return (self.offset - x @ self.normal) / np.linalg.norm(self.normal)

    def _project(self, x):
        a = self.normal
        excess = np.maximum(x @ a - self.offset, 0.0)
        return x - (excess / (a @ a))[..., None] * a


@dataclass(frozen=True)
class Polyhedron(_ConvexSet):
    """``{x : G x <= g}`` projected with Dykstra's cyclic algorithm."""

    G: np.ndarray
    g: np.ndarray
    interior: Optional[np.ndarray] = None
    max_sweeps: int = DYKSTRA_MAX_SWEEPS
    tol: float = DYKSTRA_TOL
    _rows: tuple = field(init=False, repr=False, compare=False, default=())

    def __post_init__(self):
        G = np.atleast_2d(np.asarray(self.G, dtype=float))
        g = np.atleast_1d(np.asarray(self.g, dtype=float))
        if G.shape[0] != g.shape[0] or not np.all(np.isfinite(G)) or not np.all(np.isfinite(g)):
            raise ParameterError("polyhedron needs finite G (k x n) and g (k,)")
        if np.any(np.linalg.norm(G, axis=1) == 0):
            raise ParameterError("polyhedron rows must be nonzero")
        object.__setattr__(self, "G", _frozen(G))
        object.__setattr__(self, "g", _frozen(g))
        object.__setattr__(self, "_rows", tuple(HalfSpace(G[i], g[i]) for i in range(len(g))))
        if self.interior is None:
            object.__setattr__(self, "interior", _frozen(self._chebyshev_center()))
        else:
            object.__setattr__(self, "interior", _frozen(self.interior))
        if not np.all(self.margin(self.interior) > 0):
            raise ParameterError("polyhedron has empty interior or the interior point is not strictly inside")

    def _chebyshev_center(self):
        G, g = self.G, self.g
        norms = np.linalg.norm(G, axis=1)
        n = G.shape[1]
        c = np.zeros(n + 1)
        c[-1] = -1.0
        A = np.hstack([G, norms[:, None]])
        bounds = [(None, None)] * n + [(0, 1.0)]
        res = linprog(c, A_ub=A, b_ub=g, bounds=bounds, method="highs")
        if res.status != 0 or res.x[-1] <= 0:
            raise ParameterError("polyhedron has empty interior")
        return res.x[:n]

    @property
    def dim(self):
        return self.G.shape[1]

    @property
    def interior_point(self):
        return np.array(self.interior)

    def margin(self, x):
        x = _as_points(x, self.dim)
        norms = np.linalg.norm(self.G, axis=1)
        return np.min((self.g - x @ self.G.T) / norms, axis=-1)

    def distance(self, x):
        x = _as_points(x, self.dim)
        return np.linalg.norm(x - self._project(x), axis=-1)

    def _inside(self, x):
        # Dykstra stops on the iterate change, so its output may violate a
        # row by about the stopping tolerance; accept that as inside
        slack = 10 * self.tol * (1.0 + np.linalg.norm(x, axis=-1))
        return self.margin(x) >= -slack

    def _project(self, x):
        z = np.array(x, dtype=float)
        if np.all(self.margin(z) >= 0):
            return z
        incr = [np.zeros_like(z) for _ in self._rows]
        for _ in range(self.max_sweeps):
            z_old = z
            for i, hs in enumerate(self._rows):
                y = z + incr[i]
                z = hs._project(y)
                incr[i] = y - z
            if np.max(np.abs(z - z_old)) <= self.tol:
                break
        return z


# ---------------------------------------------------------------------------
# convex functions


@dataclass(frozen=True)
class AbsNorm:
    """``weight * ||x||_1``; the absolute value in one dimension."""

    weight: float = 1.0
    dim: int = 1

    def __post_init__(self):
        if not self.weight >= 0:
            raise ParameterError("abs-norm weight must be nonnegative")

    def value(self, x):
        x = _as_points(x, self.dim)
        return self.weight * np.sum(np.abs(x), axis=-1)

    @property
    def domain(self):
        return WholeSpace(self.dim)


@dataclass(frozen=True)
class Quadratic:
    """``0.5 <x, Q x> + <c, x>`` with ``Q`` symmetric positive semidefinite."""

    Q: np.ndarray
    c: Optional[np.ndarray] = None

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        if Q.shape[0] != Q.shape[1] or not np.allclose(Q, Q.T):
            raise ParameterError("quadratic needs a symmetric square matrix")
        if np.min(np.linalg.eigvalsh(Q)) < -1e-12:
            raise ParameterError("quadratic matrix must be positive semidefinite")
        c = np.zeros(Q.shape[0]) if self.c is None else np.atleast_1d(np.asarray(self.c, dtype=float))
        if c.shape != (Q.shape[0],):
            raise ParameterError("linear term has the wrong length")
        object.__setattr__(self, "Q", _frozen(Q))
        object.__setattr__(self, "c", _frozen(c))

    @property
    def dim(self):
        return self.Q.shape[0]

    def value(self, x):
        x = _as_points(x, self.dim)
        return 0.5 * np.einsum("...i,ij,...j->...", x, self.Q, x) + x @ self.c

    def gradient(self, x):
        x = _as_points(x, self.dim)
        return x @ self.Q.T + self.c

    @property
    def domain(self):
        return WholeSpace(self.dim)


@dataclass(frozen=True)
class Indicator:
    """Convex indicator of a closed convex set (0 inside, +inf outside)."""

    set: _ConvexSet

    @property
    def dim(self):
        return self.set.dim

    def value(self, x, tol=1e-9):
        return np.where(self.set.contains(x, tol), 0.0, np.inf)

    @property
    def domain(self):
        return self.set


@dataclass(frozen=True)
class SumFunction:
    terms: tuple

    def __post_init__(self):
        terms = tuple(self.terms)
        if not terms:
            raise ParameterError("sum of functions needs at least one term")
        flat = []
        for t in terms:
            flat.extend(t.terms if isinstance(t, SumFunction) else [t])
        dims = {t.dim for t in flat}
        if len(dims) != 1:
            raise ParameterError(f"summands have inconsistent dimensions {sorted(dims)}")
        if sum(isinstance(t, Indicator) for t in flat) > 1:
            raise CapabilityError("at most one indicator term is supported in a sum")
        object.__setattr__(self, "terms", tuple(flat))

    @property
    def dim(self):
        return self.terms[0].dim

    def value(self, x):
        return sum(t.value(x) for t in self.terms)

    @property
    def domain(self):
        for t in self.terms:
            if isinstance(t, Indicator):
                return t.set
        return WholeSpace(self.dim)


def _soft_threshold(x, thresh):
    return np.sign(x) * np.maximum(np.abs(x) - thresh, 0.0)


def _is_diagonal(Q):
    return np.array_equal(Q, np.diag(np.diag(Q)))


def prox(func, lam, x):
    """Proximal map ``argmin_z f(z) + |z - x|^2 / (2 lam)``.

    Closed forms cover every function in the catalogue and the sums that stay
    separable or isotropic:

    * quadratic (+ indicator when ``Q = q I``, or ``Q`` diagonal with a box);
    * absolute value (+ diagonal quadratic) (+ box indicator), solved
      coordinatewise as a clamped soft threshold.

    Anything else raises :class:`CapabilityError`.
    """
    lam = _check_lambda(lam)
    x = _as_points(x, func.dim)
    terms = func.terms if isinstance(func, SumFunction) else (func,)
    n = func.dim
    Q = np.zeros((n, n))
    c = np.zeros(n)
    w = 0.0
    cset = None
    has_quad = False
    for t in terms:
        if isinstance(t, Quadratic):
            Q = Q + t.Q
            c = c + t.c
            has_quad = True
        elif isinstance(t, AbsNorm):
            w += t.weight
        elif isinstance(t, Indicator):
            cset = t.set
        else:
            raise CapabilityError(f"no proximal map for {type(t).__name__}")

    box_like = cset is None or isinstance(cset, (Box, WholeSpace))
    if w > 0:
        if not (_is_diagonal(Q) and box_like):
            raise CapabilityError("abs-norm prox only composes with diagonal quadratics and boxes")
        scale = 1.0 + lam * np.diag(Q)
        z = _soft_threshold((x - lam * c) / scale, lam * w / scale)
        return z if cset is None else cset.project(z)
    if not has_quad:
        return x.copy() if cset is None else cset.project(x)
    if cset is None or isinstance(cset, WholeSpace):
        M = np.eye(n) + lam * Q
        return np.linalg.solve(M, (x - lam * c)[..., None])[..., 0]
    q = Q[0, 0]
    if np.array_equal(Q, q * np.eye(n)):
        return cset.project((x - lam * c) / (1.0 + lam * q))
    if _is_diagonal(Q) and isinstance(cset, Box):
        return cset.project((x - lam * c) / (1.0 + lam * np.diag(Q)))
    raise CapabilityError("prox of a non-isotropic quadratic plus a non-box indicator is not supported")


# ---------------------------------------------------------------------------
# operators


@dataclass(frozen=True)
class ZeroOperator:
    dim: int

    kind = "zero"

    @property
    def domain(self):
        return WholeSpace(self.dim)

    def resolvent(self, lam, x):
        _check_lambda(lam)
        return _as_points(x, self.dim)

    def apply(self, x):
        return np.zeros_like(_as_points(x, self.dim))


@dataclass(frozen=True)
class LinearOperator:
    """``A x = M x``.

    Monotone iff the symmetric part of ``M`` is positive semidefinite.  This
    is not enforced here so that :func:`audit_monotone` can be exercised on
    invalid input; see :meth:`is_monotone`.
    """

    matrix: np.ndarray

    kind = "linear-psd"

    def __post_init__(self):
        M = np.atleast_2d(np.asarray(self.matrix, dtype=float))
        if M.shape[0] != M.shape[1] or not np.all(np.isfinite(M)):
            raise ParameterError("linear operator needs a finite square matrix")
        object.__setattr__(self, "matrix", _frozen(M))

    @property
    def dim(self):
        return self.matrix.shape[0]

    @property
    def domain(self):
        return WholeSpace(self.dim)

    def is_monotone(self, tol=1e-12):
        sym = 0.5 * (self.matrix + self.matrix.T)
        return bool(np.min(np.linalg.eigvalsh(sym)) >= -tol)

    def resolvent(self, lam, x):
        lam = _check_lambda(lam)
        x = _as_points(x, self.dim)
        M = np.eye(self.dim) + lam * self.matrix
        return np.linalg.solve(M, x[..., None])[..., 0]

    def apply(self, x):
        return _as_points(x, self.dim) @ self.matrix.T


@dataclass(frozen=True)
class Subdifferential:
    function: object

    kind = "subdifferential"

    @property
    def dim(self):
        return self.function.dim

    @property
    def domain(self):
        return self.function.domain

    def resolvent(self, lam, x):
        return prox(self.function, lam, x)


@dataclass(frozen=True)
class NormalCone:
    set: _ConvexSet

    kind = "normal-cone"

    @property
    def dim(self):
        return self.set.dim

    @property
    def domain(self):
        return self.set

    def resolvent(self, lam, x):
        _check_lambda(lam)
        return self.set.project(x)


_OPERATORS = (ZeroOperator, LinearOperator, Subdifferential, NormalCone)


def project(cset, x):
    """Euclidean projection of ``x`` onto ``cset``; ``x`` is returned unchanged if inside."""
    return cset.project(x)


def resolvent(op, lam, x):
    """``J_lam(x)``: the unique ``z`` with ``x - z in lam A(z)``."""
    if not isinstance(op, _OPERATORS):
        raise CapabilityError(f"unsupported operator kind {type(op).__name__}")
    return op.resolvent(lam, x)


def yosida(op, lam, x):
    """Yosida approximation ``(x - J_lam x) / lam``, monotone and ``1/lam``-Lipschitz."""
    lam = _check_lambda(lam)
    x = _as_points(x, op.dim)
    return (x - resolvent(op, lam, x)) / lam


# ---------------------------------------------------------------------------
# sampling-based audits


@dataclass
class AuditReport:
    name: str
    passed: bool
    worst_violation: float
    witness: Optional[tuple] = None
    count: int = 0
    detail: dict = field(default_factory=dict)

    def as_row(self):
        return {"name": self.name, "passed": self.passed,
                "worst_violation": self.worst_violation, "count": self.count}


def gaussian_pair_sampler(center, scale=1.0):
    """Pairs of points drawn from ``N(center, scale^2 I)``."""
    center = np.atleast_1d(np.asarray(center, dtype=float))

    def sample(rng, count):
        shape = (count, center.shape[0])
        return (center + scale * rng.standard_normal(shape),
                center + scale * rng.standard_normal(shape))

    return sample


def _pairs(op_or_set, sampler, count, seed):
    if count < 1:
        raise ParameterError("audit needs count >= 1")
    if sampler is None:
        sampler = gaussian_pair_sampler(op_or_set.domain.interior_point
                                        if hasattr(op_or_set, "domain") else op_or_set.interior_point)
    rng = np.random.default_rng(seed)
    x1, x2 = sampler(rng, count)
    return np.atleast_2d(np.asarray(x1, dtype=float)), np.atleast_2d(np.asarray(x2, dtype=float))


def audit_monotone(op, sampler: Optional[Callable] = None, count: int = 10_000,
                   lam: float = 1e-2, tol: float = 1e-9, seed: int = 0) -> AuditReport:
    """Check ``<x1 - x2, A x1 - A x2> >= -tol`` on sampled pairs.

    Single-valued operators (zero, linear) are evaluated directly; set-valued
    ones through their Yosida approximation at ``lam``.
    """
    x1, x2 = _pairs(op, sampler, count, seed)
    if isinstance(op, (ZeroOperator, LinearOperator)):
        a1, a2 = op.apply(x1), op.apply(x2)
    else:
        a1, a2 = yosida(op, lam, x1), yosida(op, lam, x2)
    inner = np.einsum("ij,ij->i", x1 - x2, a1 - a2)
    k = int(np.argmin(inner))
    worst = float(inner[k])
    return AuditReport("monotone", worst >= -tol, worst,
                       (x1[k].copy(), x2[k].copy()), len(inner), {"lambda": lam, "tol": tol})


def audit_firm_nonexpansive(op, lam: float = 1.0, sampler: Optional[Callable] = None,
                            count: int = 10_000, tol: float = 1e-9, seed: int = 0) -> AuditReport:
    """Nonexpansiveness and firm nonexpansiveness of ``J_lam`` on sampled pairs.

    ``worst_violation`` is the smaller of the two slacks
    ``|x1-x2| - |J x1 - J x2|`` and ``<J x1 - J x2, x1 - x2> - |J x1 - J x2|^2``.
    """
    x1, x2 = _pairs(op, sampler, count, seed)
    j1, j2 = resolvent(op, lam, x1), resolvent(op, lam, x2)
    dj = j1 - j2
    dx = x1 - x2
    nonexp = np.linalg.norm(dx, axis=1) - np.linalg.norm(dj, axis=1)
    firm = np.einsum("ij,ij->i", dj, dx) - np.einsum("ij,ij->i", dj, dj)
    slack = np.minimum(nonexp, firm)
    k = int(np.argmin(slack))
    return AuditReport("firm-nonexpansive", bool(slack[k] >= -tol), float(slack[k]),
                       (x1[k].copy(), x2[k].copy()), len(slack),
                       {"nonexpansive_min": float(nonexp.min()), "firm_min": float(firm.min()),
                        "lambda": lam})


def audit_convexity(func, sampler: Optional[Callable] = None, count: int = 10_000,
                    tol: float = 1e-9, seed: int = 0) -> AuditReport:
    """Midpoint-type convexity certificate ``f(tx+(1-t)y) <= t f(x) + (1-t) f(y) + tol``.

    Pairs are drawn inside the domain so that indicator terms stay finite.
    """
    dom = func.domain
    x1, x2 = _pairs(dom, sampler, count, seed)
    x1, x2 = dom.project(x1), dom.project(x2)
    t = np.random.default_rng(seed + 1).uniform(size=(len(x1), 1))
    lhs = func.value(t * x1 + (1 - t) * x2)
    rhs = t[:, 0] * func.value(x1) + (1 - t[:, 0]) * func.value(x2)
    slack = rhs - lhs
    k = int(np.argmin(slack))
    return AuditReport("convexity", bool(slack[k] >= -tol), float(slack[k]),
                       (x1[k].copy(), x2[k].copy()), len(slack))
