"""Scenario documents, built-in scenarios and experiment dispatch.

A scenario is a JSON document validated against :data:`SCENARIO_SCHEMA`
(strict: unknown keys are errors).  It describes the two operators, the
coefficient expressions with their declared constants, the epsilon list and
the gamma rule ``gamma = epsilon^p`` (``p > 1``), and the Monte Carlo
budgets.  :func:`run_experiment` dispatches one task over a loaded scenario;
every random stream is keyed by the master seed, the task name and the
replication index.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import math
import platform
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np
import scipy

from . import __version__
from .errors import AssumptionError, CapabilityError, ParameterError, ScenarioError
from .expressions import matrix_field, vector_field
from .ldp import (Control, RateConfig, SkeletonProblem, TailEvent, rate_function,
                  tail_probability_probe, weak_convergence_probe)
from .monotone import (AbsNorm, Ball, Box, HalfSpace, Indicator, LinearOperator, NormalCone,
                       Polyhedron, Quadratic, Subdifferential, SumFunction, WholeSpace,
                       ZeroOperator, audit_firm_nonexpansive)
from .multiscale import (CoefficientSet, EstimationConfig, GammaRule,
                         SlowFastSystem, audit_assumptions, averaging_error,
                         build_averaged_model, check_regime, simulate_slow_fast,
                         solve_averaged)
from .paths import NoiseStream, TimeGrid

__all__ = [
    "SCHEMA_ID", "SCENARIO_SCHEMA", "BUILTIN_SCENARIOS", "TASKS", "ScenarioSpec",
    "ExperimentResult", "load_scenario", "with_overrides", "task_seed", "parse_gamma_rule", "run_experiment", "summarize", "builtin_document",
]

SCHEMA_ID = "mmsde.scenario/v1"
TASKS = ("simulate", "average", "ldp-rate", "ldp-probe", "weak-probe", "audit")

_num = {"type": "number"}
_vec = {"type": "array", "items": _num, "minItems": 1}
_bound_vec = {"type": "array", "items": {"type": ["number", "null"]}, "minItems": 1}
_mat = {"type": "array", "items": _vec, "minItems": 1}
_expr = {"type": ["string", "number"]}
_expr_vec = {"type": "array", "items": _expr, "minItems": 1}
_expr_mat = {"type": "array", "items": _expr_vec, "minItems": 1}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "required": list(required),
            "additionalProperties": False}


_SET = {"oneOf": [
    _obj({"kind": {"const": "box"}, "lower": _bound_vec, "upper": _bound_vec},
         ["kind", "lower", "upper"]),
    _obj({"kind": {"const": "ball"}, "center": _vec, "radius": _num},
         ["kind", "center", "radius"]),
    _obj({"kind": {"const": "halfspace"}, "normal": _vec, "offset": _num},
         ["kind", "normal", "offset"]),
    _obj({"kind": {"const": "polyhedron"}, "G": _mat, "g": _vec, "interior_point": _vec},
         ["kind", "G", "g"]),
    _obj({"kind": {"const": "whole-space"}, "dim": {"type": "integer", "minimum": 1}},
         ["kind", "dim"]),
]}

_FUNC = {"oneOf": [
    _obj({"kind": {"const": "abs-norm"}, "weight": _num,
          "dim": {"type": "integer", "minimum": 1}}, ["kind"]),
    _obj({"kind": {"const": "quadratic"}, "Q": _mat, "c": _vec}, ["kind", "Q"]),
    _obj({"kind": {"const": "indicator"}, "set": _SET}, ["kind", "set"]),
    _obj({"kind": {"const": "sum"}, "terms": {"type": "array", "minItems": 1,
                                              "items": {"$ref": "#/$defs/function"}}},
         ["kind", "terms"]),
]}

_OPERATOR = {"oneOf": [
    _obj({"kind": {"const": "zero"}, "dim": {"type": "integer", "minimum": 1}}, ["kind", "dim"]),
    _obj({"kind": {"const": "linear-psd"}, "matrix": _mat}, ["kind", "matrix"]),
    _obj({"kind": {"const": "subdifferential"}, "function": {"$ref": "#/$defs/function"}},
         ["kind", "function"]),
    _obj({"kind": {"const": "normal-cone"}, "set": _SET}, ["kind", "set"]),
]}

_REQUIRED = ["schema", "name", "dims", "A1", "A2", "coefficients", "constants", "x0", "y0", "T",
             "epsilons", "gamma_rule", "seed"]

SCENARIO_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "$defs": {"function": _FUNC},
    **_obj({
        "schema": {"const": SCHEMA_ID},
        "name": {"type": "string", "minLength": 1},
        "description": {"type": "string"},
        "params": {"type": "object", "additionalProperties": _num},
        "dims": _obj({k: {"type": "integer", "minimum": 1} for k in ("n", "m", "d1", "d2")},
                     ["n", "m", "d1", "d2"]),
        "A1": _OPERATOR,
        "A2": _OPERATOR,
        "coefficients": _obj({"b1": _expr_vec, "sigma1": _expr_mat, "b2": _expr_vec,
                              "sigma2": _expr_mat, "b1_depends_on_y": {"type": "boolean"},
                              "sigma1_depends_on_y": {"type": "boolean"}},
                             ["b1", "sigma1", "b2", "sigma2"]),
        "constants": _obj({"L_b1s1": _num, "L_b2s2": _num, "beta": _num, "sigma2_bound": _num}),
        "averaged_drift": _expr_vec,
        "x0": _vec,
        "y0": _vec,
        "T": {"type": "number", "exclusiveMinimum": 0},
        "epsilons": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0,
                                                "exclusiveMaximum": 1}, "minItems": 1},
        "gamma_rule": {"type": "string"},
        "step_factor": {"type": "integer", "minimum": 1},
        "iota": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "monte_carlo": _obj({"replications": {"type": "integer", "minimum": 1},
                             "tail_paths": {"type": "integer", "minimum": 1},
                             "tail_chunk": {"type": "integer", "minimum": 1},
                             "tail_slow_steps": {"type": "integer", "minimum": 1}}),
        "estimation": _obj({"x_nodes": {"type": "array", "items": _vec, "minItems": 1},
                            "sample_time": {"type": "number", "exclusiveMinimum": 0},
                            "h": {"type": "number", "exclusiveMinimum": 0},
                            "burn_in": {"type": "number", "exclusiveMinimum": 0},
                            "batches": {"type": "integer", "minimum": 2}}),
        "ldp": _obj({"control": _vec, "pieces": {"type": "integer", "minimum": 1},
                     "grid_steps": {"type": "integer", "minimum": 1},
                     "target_end": _vec,
                     "tail_radius": {"type": "number", "exclusiveMinimum": 0},
                     "tail_side": {"enum": ["two-sided", "upper"]}}),
        "seed": {"type": "integer", "minimum": 0},
    }, _REQUIRED),
}

_DEFAULTS = {
    "params": {}, "step_factor": 20, "iota": 0.5,
    "monte_carlo": {"replications": 200, "tail_paths": 100_000, "tail_chunk": 100_000,
                    "tail_slow_steps": 50},
    "estimation": {"sample_time": 2000.0, "h": 0.01, "batches": 50},
    "ldp": {"pieces": 64, "grid_steps": 128, "tail_radius": 1.0, "tail_side": "two-sided"},
}

_ONE = [["1"]]

BUILTIN_SCENARIOS = {
    "reflected-ou": {
        "schema": SCHEMA_ID,
        "name": "reflected-ou",
        "description": "Slow state reflected at 0 driven by a fast mean-reverting process "
                       "dY = (m - Y/2)/gamma dt + dW/sqrt(gamma); b(y) = 1 - y, sigma = 1.",
        "params": {"m": 1.0},
        "dims": {"n": 1, "m": 1, "d1": 1, "d2": 1},
        "A1": {"kind": "normal-cone", "set": {"kind": "box", "lower": [0.0], "upper": [None]}},
        "A2": {"kind": "zero", "dim": 1},
        "coefficients": {"b1": ["1 - y0"], "sigma1": _ONE, "b2": ["m - 0.5*y0"],
                         "sigma2": _ONE, "b1_depends_on_y": True, "sigma1_depends_on_y": False},
        "constants": {"L_b1s1": 1.0, "L_b2s2": 0.25, "beta": 1.0, "sigma2_bound": 1.0},
        "averaged_drift": ["1 - 2*m"],
        "x0": [0.5], "y0": [0.0], "T": 1.0,
        "epsilons": [0.2, 0.1, 0.05], "gamma_rule": "epsilon^1.5",
        "iota": 0.5,
        "monte_carlo": {"replications": 200},
        "ldp": {"control": [1.0, 0.0], "target_end": [1.0], "tail_radius": 0.5,
                "tail_side": "two-sided"},
        "seed": 20240101,
    },
    "box-2d": {
        "schema": SCHEMA_ID,
        "name": "box-2d",
        "description": "Slow state in the unit square (normal cone of a box), fast OU "
                       "with mean shifted by the first slow coordinate.",
        "params": {"m": 1.0, "k": 0.1},
        "dims": {"n": 2, "m": 1, "d1": 2, "d2": 1},
        "A1": {"kind": "normal-cone", "set": {"kind": "box", "lower": [0.0, 0.0],
                                              "upper": [1.0, 1.0]}},
        "A2": {"kind": "zero", "dim": 1},
        "coefficients": {"b1": ["1 - x0 - 0.25*y0", "-x1 + 0.25*y0"],
                         "sigma1": [["0.3", "0"], ["0", "0.3"]],
                         "b2": ["m + k*x0 - 0.5*y0"], "sigma2": _ONE,
                         "b1_depends_on_y": True, "sigma1_depends_on_y": False},
        "constants": {"L_b1s1": 1.2, "L_b2s2": 0.26, "beta": 1.0, "sigma2_bound": 1.0},
        "averaged_drift": ["1 - x0 - 0.25*(2*m + 2*k*x0)", "-x1 + 0.25*(2*m + 2*k*x0)"],
        "x0": [1.0, 0.0], "y0": [0.0], "T": 1.0,
        "epsilons": [0.2, 0.1, 0.05], "gamma_rule": "epsilon^1.5",
        "ldp": {"control": [0.5, 0.5, 0.0], "target_end": [0.6, 0.4], "tail_radius": 0.3},
        "seed": 7,
    },
    "soft-threshold": {
        "schema": SCHEMA_ID,
        "name": "soft-threshold",
        "description": "Slow state driven by the subdifferential of w|x|; fast OU reflected "
                       "at 0 (half-Gaussian invariant law).",
        "params": {"m": 0.0, "w": 0.5},
        "dims": {"n": 1, "m": 1, "d1": 1, "d2": 1},
        "A1": {"kind": "subdifferential", "function": {"kind": "abs-norm", "weight": 0.5}},
        "A2": {"kind": "normal-cone", "set": {"kind": "box", "lower": [0.0], "upper": [None]}},
        "coefficients": {"b1": ["1 - y0"], "sigma1": [["0.5"]], "b2": ["m - 0.5*y0"],
                         "sigma2": _ONE, "b1_depends_on_y": True, "sigma1_depends_on_y": False},
        "constants": {"L_b1s1": 1.0, "L_b2s2": 0.25, "beta": 1.0, "sigma2_bound": 1.0},
        "averaged_drift": ["1 - sqrt(2/pi)"],
        "x0": [1.0], "y0": [0.0], "T": 1.0,
        "epsilons": [0.2, 0.1, 0.05], "gamma_rule": "epsilon^1.5",
        "ldp": {"control": [0.5, 0.0], "target_end": [1.5], "tail_radius": 0.5},
        "seed": 11,
    },
    "brownian-1d": {
        "schema": SCHEMA_ID,
        "name": "brownian-1d",
        "description": "Unconstrained slow Brownian motion sqrt(eps) W; closed-form tail "
                       "probabilities by the reflection principle.",
        "params": {"m": 0.0},
        "dims": {"n": 1, "m": 1, "d1": 1, "d2": 1},
        "A1": {"kind": "zero", "dim": 1},
        "A2": {"kind": "zero", "dim": 1},
        "coefficients": {"b1": ["0"], "sigma1": _ONE, "b2": ["m - 0.5*y0"], "sigma2": _ONE,
                         "b1_depends_on_y": False, "sigma1_depends_on_y": False},
        "constants": {"L_b1s1": 1.0, "L_b2s2": 0.25, "beta": 1.0, "sigma2_bound": 1.0},
        "averaged_drift": ["0"],
        "x0": [0.0], "y0": [0.0], "T": 1.0,
        "epsilons": [0.2, 0.1, 0.05], "gamma_rule": "epsilon^1.5",
        "monte_carlo": {"tail_paths": 10_000_000, "tail_slow_steps": 20},
        "ldp": {"control": [1.0, 0.0], "target_end": [1.0], "tail_radius": 1.0,
                "tail_side": "upper"},
        "seed": 3,
    },
}


def builtin_document(name):
    try:
        return copy.deepcopy(BUILTIN_SCENARIOS[name])
    except KeyError:
        raise ScenarioError(f"unknown built-in scenario {name!r}; known: "
                            f"{', '.join(BUILTIN_SCENARIOS)}") from None


# ---------------------------------------------------------------------------
# construction from documents


def _set_from(spec):
    kind = spec["kind"]
    if kind == "box":
        lo = [-np.inf if v is None else v for v in spec["lower"]]
        hi = [np.inf if v is None else v for v in spec["upper"]]
        return Box(lo, hi)
    if kind == "ball":
        return Ball(spec["center"], spec["radius"])
    if kind == "halfspace":
        return HalfSpace(spec["normal"], spec["offset"])
    if kind == "polyhedron":
        return Polyhedron(spec["G"], spec["g"], spec.get("interior_point"))
    return WholeSpace(spec["dim"])


def _function_from(spec):
    kind = spec["kind"]
    if kind == "abs-norm":
        return AbsNorm(spec.get("weight", 1.0), spec.get("dim", 1))
    if kind == "quadratic":
        return Quadratic(spec["Q"], spec.get("c"))
    if kind == "indicator":
        return Indicator(_set_from(spec["set"]))
    return SumFunction(tuple(_function_from(t) for t in spec["terms"]))


def operator_from(spec):
    kind = spec["kind"]
    if kind == "zero":
        return ZeroOperator(spec["dim"])
    if kind == "linear-psd":
        op = LinearOperator(spec["matrix"])
        if not op.is_monotone():
            raise ScenarioError("linear-psd operator matrix is not positive semidefinite")
        return op
    if kind == "subdifferential":
        return Subdifferential(_function_from(spec["function"]))
    return NormalCone(_set_from(spec["set"]))


_GAMMA_RULE = re.compile(r"^\s*(?:eps|epsilon)\s*(?:(?:\^|\*\*)\s*([0-9]*\.?[0-9]+(?:[eE][-+]?\d+)?))?\s*$")


def parse_gamma_rule(text):
    """``"epsilon^p"`` -> :class:`GammaRule`; other expressions are rejected."""
    match = _GAMMA_RULE.match(text)
    if not match:
        raise ScenarioError(f"gamma rule must have the form 'epsilon^p', got {text!r}")
    return GammaRule(float(match.group(1)) if match.group(1) else 1.0)


def _merge_defaults(doc):
    out = copy.deepcopy(doc)
    for key, default in _DEFAULTS.items():
        if isinstance(default, dict):
            merged = copy.deepcopy(default)
            merged.update(out.get(key, {}))
            out[key] = merged
        else:
            out.setdefault(key, default)
    return out


def canonical_json(doc):
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


@dataclass
class ScenarioSpec:
    """A validated scenario: the normalized document plus the objects built from it."""

    document: dict
    sha256: str
    name: str
    A1: object
    A2: object
    coeffs: CoefficientSet
    x0: np.ndarray
    y0: np.ndarray
    T: float
    epsilons: list
    gamma_rule: GammaRule
    seed: int
    closed_form: Optional[object] = None
    audit: dict = field(default_factory=dict)

    @property
    def params(self):
        return self.document["params"]

    def system(self, epsilon=None):
        eps = self.epsilons[0] if epsilon is None else epsilon
        return SlowFastSystem(self.A1, self.A2, self.coeffs, eps, self.gamma_rule(eps),
                              self.x0, self.y0, self.T)

    def averaged_model(self):
        system = self.system()
        if self.closed_form is not None:
            return build_averaged_model(system, None, closed_form=self.closed_form)
        est = self.document["estimation"]
        if "x_nodes" not in est:
            raise CapabilityError("scenario declares neither a closed-form averaged drift nor "
                                  "estimation.x_nodes")
        nodes = est["x_nodes"][0] if self.coeffs.n == 1 else est["x_nodes"]
        config = EstimationConfig(sample_time=est["sample_time"], h=est["h"],
                                  burn_in=est.get("burn_in"), batches=est["batches"],
                                  seed=self.seed, stream=(9,))
        return build_averaged_model(system, nodes, config)


def _read_document(document):
    if isinstance(document, dict):
        return copy.deepcopy(document)
    if isinstance(document, Path) or (isinstance(document, str) and document.strip()
                                      and not document.lstrip().startswith("{")):
        if isinstance(document, str) and document in BUILTIN_SCENARIOS:
            return builtin_document(document)
        path = Path(document)
        if not path.exists():
            raise ScenarioError(f"no scenario file or built-in named {str(document)!r}")
        document = path.read_text()
    try:
        doc = json.loads(document) if str(document).strip() else {}
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") \
            from None
    if not isinstance(doc, dict):
        raise ScenarioError("scenario document must be a JSON object")
    return doc


def _validate_schema(doc):
    for key in _REQUIRED:
        if key not in doc:
            raise ScenarioError(f"missing required field {key!r}")
    validator = jsonschema.Draft202012Validator(SCENARIO_SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        if err.validator == "oneOf" and err.context:
            # report the most specific sub-error, e.g. an unknown key in an operator
            sub = min(err.context, key=lambda e: (e.validator != "additionalProperties",
                                                  len(e.message)))
            raise ScenarioError(f"field {where}: {sub.message}")
        raise ScenarioError(f"field {where}: {err.message}")


def load_scenario(document, audit=True, audit_count=10_000) -> ScenarioSpec:
    """Parse, validate and audit a scenario document.

    ``document`` may be a dict, JSON text, a file path or a built-in name.
    Raises :class:`ScenarioError` (parse/schema), :class:`RegimeError`
    (gamma rule or epsilon list) or :class:`AssumptionError` (audit failures,
    listed per assumption).
    """
    doc = _read_document(document)
    _validate_schema(doc)
    doc = _merge_defaults(doc)
    dims = doc["dims"]
    n, m, d1, d2 = dims["n"], dims["m"], dims["d1"], dims["d2"]
    params = {k: float(v) for k, v in doc["params"].items()}
    coef = doc["coefficients"]
    try:
        A1, A2 = operator_from(doc["A1"]), operator_from(doc["A2"])
    except (ValueError, NotImplementedError) as exc:
        raise ScenarioError(f"invalid operator: {exc}") from None
    shapes = {"b1": (len(coef["b1"]), n), "b2": (len(coef["b2"]), m),
              "sigma1": ((len(coef["sigma1"]), len(coef["sigma1"][0])), (n, d1)),
              "sigma2": ((len(coef["sigma2"]), len(coef["sigma2"][0])), (m, d2))}
    for key, (got, want) in shapes.items():
        if got != want:
            raise ScenarioError(f"field coefficients/{key}: shape {got} does not match dims {want}")
    str_exprs = lambda v: [str(e) for e in v]  # noqa: E731
    consts = doc["constants"]
    try:
        coeffs = CoefficientSet(
            vector_field(str_exprs(coef["b1"]), params, n, m),
            matrix_field([str_exprs(r) for r in coef["sigma1"]], params, n, m),
            vector_field(str_exprs(coef["b2"]), params, n, m),
            matrix_field([str_exprs(r) for r in coef["sigma2"]], params, n, m),
            n, m, d1, d2, consts.get("L_b1s1"), consts.get("L_b2s2"), consts.get("beta"),
            consts.get("sigma2_bound"), coef.get("b1_depends_on_y", True),
            coef.get("sigma1_depends_on_y", True))
    except ParameterError as exc:
        raise ScenarioError(f"field coefficients: {exc}") from None
    closed = None
    if "averaged_drift" in doc:
        if len(doc["averaged_drift"]) != n:
            raise ScenarioError("field averaged_drift: needs one expression per slow coordinate")
        closed = vector_field(str_exprs(doc["averaged_drift"]), params, n)
    rule = parse_gamma_rule(doc["gamma_rule"])
    eps = [float(e) for e in doc["epsilons"]]
    check_regime(eps, [rule(e) for e in eps])
    spec = ScenarioSpec(doc, hashlib.sha256(canonical_json(doc).encode()).hexdigest(),
                        doc["name"], A1, A2, coeffs, np.asarray(doc["x0"], dtype=float),
                        np.asarray(doc["y0"], dtype=float), float(doc["T"]), eps, rule,
                        int(doc["seed"]), closed)
    try:
        spec.system()
    except ParameterError as exc:
        raise ScenarioError(str(exc)) from None
    if audit:
        reports = audit_assumptions(coeffs, count=audit_count, seed=spec.seed, A1=A1, A2=A2)
        failed = [f"{k} (slack {r.worst_violation:.3g})" for k, r in reports.items() if not r.passed]
        if failed:
            raise AssumptionError("assumption audit failed: " + "; ".join(failed))
        spec.audit = reports
    return spec


def with_overrides(spec: ScenarioSpec, epsilons=None, gamma_power=None, seed=None,
                   replications=None, tail_paths=None) -> ScenarioSpec:
    """Re-validate a scenario after command-line style overrides."""
    doc = copy.deepcopy(spec.document)
    if epsilons is not None:
        doc["epsilons"] = [float(e) for e in epsilons]
    if gamma_power is not None:
        doc["gamma_rule"] = f"epsilon^{float(gamma_power)!r}"
    if seed is not None:
        doc["seed"] = int(seed)
    if replications is not None:
        doc["monte_carlo"]["replications"] = int(replications)
    if tail_paths is not None:
        doc["monte_carlo"]["tail_paths"] = int(tail_paths)
    return load_scenario(doc)


# ---------------------------------------------------------------------------
# experiments


def task_seed(master_seed, task):
    digest = hashlib.sha256(f"{int(master_seed)}:{task}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass
class ExperimentResult:
    scenario: dict
    scenario_sha256: str
    task: str
    seed: int
    task_seed: int
    report: dict
    wall_clock: float
    versions: dict
    paths: list = field(default_factory=list, repr=False)

    def numeric_payload(self):
        """Everything except timing; equal specs give equal payloads."""
        return canonical_json({"scenario": self.scenario, "task": self.task, "seed": self.seed,
                               "task_seed": self.task_seed, "report": self.report})

    def to_dict(self):
        return {"scenario": self.scenario, "scenario_sha256": self.scenario_sha256,
                "task": self.task, "seed": self.seed, "task_seed": self.task_seed,
                "report": self.report, "wall_clock": self.wall_clock, "versions": self.versions}

    def to_json(self):
        return json.dumps(_jsonable(self.to_dict()), indent=2, allow_nan=True)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _versions():
    return {"mmsde": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def _straight_target(spec, grid, averaged):
    """Averaged path plus a linear ramp reaching ``target_end - xbar(T)`` at ``T``."""
    xbar = solve_averaged(averaged, spec.x0, grid).states
    end = np.asarray(spec.document["ldp"].get("target_end", xbar[-1]), dtype=float)
    ramp = (grid.times / grid.T)[:, None] * (end - xbar[-1])
    target = spec.A1.domain.project(xbar + ramp)
    return target


def _task_audit(spec, seed, jobs):
    reports = audit_assumptions(spec.coeffs, seed=seed, A1=spec.A1, A2=spec.A2)
    for name, op in (("A1", spec.A1), ("A2", spec.A2)):
        reports[f"resolvent_{name}"] = audit_firm_nonexpansive(op, seed=seed)
    rows = [{"assumption": k, "passed": bool(r.passed), "worst_violation": r.worst_violation,
             "count": r.count} for k, r in reports.items()]
    return {"rows": rows, "all_passed": all(r["passed"] for r in rows)}


def _task_average(spec, seed, jobs):
    averaged = spec.averaged_model()
    rep = averaging_error(spec.system(), spec.epsilons, spec.gamma_rule, averaged,
                          spec.document["monte_carlo"]["replications"], seed,
                          spec.document["step_factor"], jobs,
                          min_replications=min(50, spec.document["monte_carlo"]["replications"]))
    out = rep.to_dict()
    out["trend"] = ("single epsilon: no trend claim" if len(rep.errors) == 1 else
                    f"errors {'strictly decreasing' if rep.strictly_decreasing() else 'not monotone'}")
    out["averaged_provenance"] = averaged.provenance
    out["khasminskii_delta"] = [g ** spec.document["iota"] for g in rep.gammas]
    return out


def _control(spec):
    c = spec.coeffs
    ldp = spec.document["ldp"]
    value = ldp.get("control", [0.0] * (c.d1 + c.d2))
    if len(value) != c.d1 + c.d2:
        raise ScenarioError(f"field ldp/control: needs {c.d1 + c.d2} entries")
    return Control.constant(value, spec.T, c.d1, ldp["pieces"])


def _skeleton_problem(spec, averaged):
    if spec.coeffs.sigma1_depends_on_y:
        raise CapabilityError("large-deviation tasks need sigma1 independent of the fast "
                              "variable (declare sigma1_depends_on_y: false)")
    grid = TimeGrid(spec.T, spec.document["ldp"]["grid_steps"])
    return SkeletonProblem(averaged, spec.x0, grid)


def _task_ldp_rate(spec, seed, jobs):
    averaged = spec.averaged_model()
    problem = _skeleton_problem(spec, averaged)
    target = _straight_target(spec, problem.grid, averaged)
    res = rate_function(target, problem, RateConfig(pieces=spec.document["ldp"]["pieces"]))
    out = res.to_dict()
    out["target"] = target.tolist()
    out["times"] = problem.grid.times.tolist()
    return out


def _task_ldp_probe(spec, seed, jobs):
    averaged = spec.averaged_model()
    problem = _skeleton_problem(spec, averaged)
    ldp = spec.document["ldp"]
    r = ldp["tail_radius"]
    xbar = solve_averaged(averaged, spec.x0, problem.grid).states
    ramp = (problem.grid.times / spec.T)[:, None] * np.eye(spec.coeffs.n)[0] * r
    exit_path = spec.A1.domain.project(xbar + ramp)
    rate = rate_function(exit_path, problem, RateConfig(pieces=ldp["pieces"]))
    mc = spec.document["monte_carlo"]
    rep = tail_probability_probe(spec.system(), spec.epsilons, spec.gamma_rule,
                                 TailEvent(r, ldp["tail_side"]), averaged,
                                 paths=mc["tail_paths"], rate=rate.value, seed=seed,
                                 chunk=mc["tail_chunk"], slow_steps=mc["tail_slow_steps"],
                                 step_factor=spec.document["step_factor"])
    out = rep.to_dict()
    out["rate_of_exit_path"] = rate.value
    return out


def _task_weak_probe(spec, seed, jobs):
    averaged = spec.averaged_model()
    _skeleton_problem(spec, averaged)
    u = _control(spec)
    rep = weak_convergence_probe(spec.system(), spec.epsilons, spec.gamma_rule, u, averaged,
                                 spec.document["monte_carlo"]["replications"], seed,
                                 step_factor=spec.document["step_factor"], jobs=jobs)
    out = rep.to_dict()
    out["trend"] = ("single epsilon: no trend claim" if len(rep.errors) == 1 else
                    f"errors {'strictly decreasing' if rep.strictly_decreasing() else 'not monotone'}")
    return out


def _task_simulate(spec, seed, jobs):
    system = spec.system()
    grid = TimeGrid.with_max_step(spec.T, system.max_step(spec.document["step_factor"]))
    reps = spec.document["monte_carlo"]["replications"]
    c = spec.coeffs
    n1 = [NoiseStream(seed, (0, r, 1), c.d1) for r in range(reps)]
    n2 = [NoiseStream(seed, (0, r, 2), c.d2) for r in range(reps)]
    slow, fast = simulate_slow_fast(system, grid, n1, n2, spec.document["step_factor"])
    return {"epsilon": system.epsilon, "gamma": system.gamma, "steps": grid.count,
            "replications": reps, "final_slow_mean": slow.final.mean(axis=0).tolist(),
            "max_domain_violation": max(slow.domain_violation, fast.domain_violation),
            "_paths": (slow, fast)}


_DISPATCH = {"audit": _task_audit, "average": _task_average, "ldp-rate": _task_ldp_rate,
             "ldp-probe": _task_ldp_probe, "weak-probe": _task_weak_probe,
             "simulate": _task_simulate}


def run_experiment(spec: ScenarioSpec, task: str, jobs: int = 1) -> ExperimentResult:
    """Run one task; ``jobs`` sets the worker count without changing any number."""
    if task not in _DISPATCH:
        raise ParameterError(f"unknown task {task!r}; expected one of {', '.join(TASKS)}")
    seed = task_seed(spec.seed, task)
    start = time.perf_counter()
    report = _DISPATCH[task](spec, seed, jobs)
    paths = report.pop("_paths", None)
    result = ExperimentResult(spec.document, spec.sha256, task, spec.seed, seed, _jsonable(report),
                              time.perf_counter() - start, _versions())
    if paths is not None:
        result.paths = list(paths)
    return result


# ---------------------------------------------------------------------------
# summaries and CSV


_SUMMARY_FIELDS = {
    "average": ("scenario", "seed", "epsilon", "gamma", "error", "ci_half_width", "reps"),
    "weak-probe": ("scenario", "seed", "epsilon", "gamma", "error", "ci_half_width", "reps"),
    "ldp-probe": ("scenario", "seed", "epsilon", "p_hat", "ci_low", "ci_high", "neg_eps_log_p"),
    "ldp-rate": ("scenario", "seed", "value", "infeasible", "residual"),
    "audit": ("scenario", "seed", "assumption", "passed", "worst_violation"),
    "simulate": ("scenario", "seed", "epsilon", "gamma", "steps", "replications"),
}
_BASE_FIELDS = ("scenario", "task", "seed")


def _summary_rows(res):
    base = {"scenario": res.scenario["name"], "seed": res.seed, "task": res.task}
    rep = res.report
    if res.task in ("average", "weak-probe", "ldp-probe", "audit"):
        return [{**row, **base} for row in rep["rows"]]
    if res.task == "ldp-rate":
        return [{**base, "value": rep["value"] if rep["value"] is not None else math.inf,
                 "infeasible": rep["infeasible"], "residual": rep["residual"]}]
    return [{**base, **{k: rep[k] for k in ("epsilon", "gamma", "steps", "replications")}}]


def summarize(results) -> str:
    """Merge results of one task type into CSV text, one row per (scenario, epsilon)."""
    results = list(results)
    tasks = {r.task for r in results}
    if len(tasks) > 1:
        raise ParameterError(f"cannot summarize mixed task types {sorted(tasks)}")
    fields = _SUMMARY_FIELDS[tasks.pop()] if results else _BASE_FIELDS
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(fields), extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for res in results:
        for row in _summary_rows(res):
            w.writerow({k: _csv_value(row.get(k)) for k in fields})
    return buf.getvalue()


def _csv_value(v):
    if isinstance(v, float):
        return repr(v)
    return v


def write_rows_csv(fileobj, rows, fields, provenance=None):
    for key, value in (provenance or {}).items():
        fileobj.write(f"# {key}={value}\n")
    w = csv.DictWriter(fileobj, fieldnames=list(fields), extrasaction="ignore",
                       lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: _csv_value(row.get(k)) for k in fields})
