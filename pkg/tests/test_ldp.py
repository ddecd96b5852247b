import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from conftest import HALF_LINE, worked_coeffs, worked_system
from mmsde.errors import CapabilityError, ParameterError
from mmsde.monotone import ZeroOperator
from mmsde.multiscale import AveragedModel, CoefficientSet, GammaRule, simulate_slow_fast, solve_averaged
from mmsde.ldp import (Control, RateConfig, SkeletonProblem, TailEvent, brownian_sup_tail,
                       fast_control_scale, rate_function, simulate_controlled, solve_skeleton,
                       tail_probability_probe, weak_convergence_probe)
from mmsde.paths import NoiseStream, TimeGrid


def unit_sigma(x):
    return np.ones(np.shape(x)[:-1] + (1, 1))


def brownian_model(scale=1.0, A1=None):
    return AveragedModel(A1 or ZeroOperator(1), lambda x: 0 * x,
                         lambda x: scale * unit_sigma(x), True)


def least_norm_oracle(target, x0, grid, pieces):
    """Exact discrete minimum of 0.5 ||u||^2 subject to x^u = target (A1 = 0, b = 0, sigma = 1)."""
    idx = Control.zeros(grid.T, 1, 0, pieces).piece_index(grid)
    dtau = grid.T / pieces
    M = np.zeros((grid.count, pieces))
    for k in range(grid.count):
        for j in range(k + 1):
            M[k, idx[j]] += grid.h
    rhs = np.asarray(target)[1:, 0] - x0
    # weighted least norm: substitute w = sqrt(dtau) u
    w = np.linalg.lstsq(M / math.sqrt(dtau), rhs, rcond=None)[0]
    assert np.allclose(M @ (w / math.sqrt(dtau)), rhs)
    return 0.5 * float(w @ w)


# controls

def test_control_norm_and_splits():
    u = Control([[1.0, 2.0], [3.0, 4.0]], T=2.0, d1=1)
    assert u.norm_sq == (1 + 4 + 9 + 16) * 1.0
    np.testing.assert_array_equal(u.pi1, [[1.0], [3.0]])
    np.testing.assert_array_equal(u.pi2, [[2.0], [4.0]])
    assert u.in_ball(30) and not u.in_ball(29.9)


@given(st.lists(st.floats(-5, 5), min_size=2, max_size=8),
       st.lists(st.floats(-5, 5), min_size=2, max_size=8))
def test_control_norm_additive(a, b):
    ua = Control(np.array(a)[:, None], T=len(a) * 0.25, d1=1)
    ub = Control(np.array(b)[:, None], T=len(b) * 0.25, d1=1)
    assert ua.concatenate(ub).norm_sq == pytest.approx(ua.norm_sq + ub.norm_sq, rel=1e-12, abs=1e-12)


def test_piece_index_uses_midpoints():
    u = Control(np.arange(4.0)[:, None], T=1.0, d1=1)
    np.testing.assert_array_equal(u.piece_index(TimeGrid(1.0, 8)), [0, 0, 1, 1, 2, 2, 3, 3])


# skeleton

def test_skeleton_zero_control_equals_averaged():
    model = AveragedModel(HALF_LINE, lambda x: -1.0 + 0 * x, unit_sigma, True)
    grid = TimeGrid(1.0, 200)
    a = solve_skeleton(SkeletonProblem(model, [0.5], grid), Control.zeros(1.0, 1, 1))
    b = solve_averaged(model, [0.5], grid)
    assert a.states.tobytes() == b.states.tobytes()


def test_skeleton_straight_and_reflected():
    grid = TimeGrid(1.0, 200)
    path = solve_skeleton(SkeletonProblem(brownian_model(), [0.2], grid),
                          Control.constant([1.5, 0.0], 1.0, 1))
    np.testing.assert_allclose(path.states[:, 0], 0.2 + 1.5 * grid.times, atol=1e-12)
    refl = solve_skeleton(SkeletonProblem(brownian_model(A1=HALF_LINE), [0.5], grid),
                          Control.constant([-1.0, 0.0], 1.0, 1))
    assert np.max(np.abs(refl.states[:, 0] - np.maximum(0.5 - grid.times, 0))) <= 2 * grid.h


def test_skeleton_rejects_y_dependent_sigma():
    model = AveragedModel(ZeroOperator(1), lambda x: 0 * x, None, False)
    with pytest.raises(CapabilityError):
        SkeletonProblem(model, [0.0], TimeGrid(1.0, 10))


# rate function

def test_rate_function_straight_line_oracle():
    grid = TimeGrid(1.0, 128)
    v = 1.5
    target = 0.2 + v * grid.times
    res = rate_function(target, SkeletonProblem(brownian_model(), [0.2], grid))
    oracle = least_norm_oracle(target[:, None], 0.2, grid, 64)
    assert oracle == pytest.approx(0.5 * v * v, rel=1e-9)
    assert not res.infeasible
    assert abs(res.value - oracle) <= 0.05 * oracle
    assert res.residual <= res.tolerance
    assert res.value == pytest.approx(0.5 * res.optimal_control.norm_sq)


def test_rate_function_curved_target_oracle():
    grid = TimeGrid(1.0, 64)
    target = np.sin(2 * grid.times)
    res = rate_function(target, SkeletonProblem(brownian_model(), [0.0], grid),
                        RateConfig(pieces=64))
    oracle = least_norm_oracle(target[:, None], 0.0, grid, 64)
    assert res.value <= oracle * 1.05 and res.value >= 0


def test_rate_function_zero_point():
    model = AveragedModel(HALF_LINE, lambda x: -1.0 + 0 * x, unit_sigma, True)
    grid = TimeGrid(1.0, 128)
    problem = SkeletonProblem(model, [0.5], grid)
    res = rate_function(solve_averaged(model, [0.5], grid), problem)
    assert res.value <= 1e-6
    assert np.max(np.abs(res.optimal_control.values)) <= 1e-3


def test_rate_function_infeasible_without_noise():
    grid = TimeGrid(1.0, 64)
    res = rate_function(grid.times * 1.0, SkeletonProblem(brownian_model(0.0), [0.0], grid),
                        RateConfig(pieces=16))
    assert res.infeasible and math.isinf(res.value)
    assert res.to_dict()["value"] is None and res.to_dict()["infinite"]


def test_rate_function_rejects_bad_targets():
    grid = TimeGrid(1.0, 16)
    problem = SkeletonProblem(brownian_model(A1=HALF_LINE), [0.5], grid)
    with pytest.raises(ParameterError):
        rate_function(0.5 - 2 * grid.times, problem)
    with pytest.raises(ParameterError):
        rate_function(1.0 + grid.times, problem)


def test_rate_function_finer_controls_do_not_increase_value():
    model = AveragedModel(HALF_LINE, lambda x: -1.0 + 0 * x, unit_sigma, True)
    grid = TimeGrid(1.0, 64)
    problem = SkeletonProblem(model, [0.5], grid)
    target = 0.5 + 0.5 * np.sin(3 * grid.times)
    coarse = rate_function(target, problem, RateConfig(pieces=8))
    fine = rate_function(target, problem, RateConfig(pieces=32))
    assert fine.value <= coarse.value + coarse.tolerance


def test_rate_value_bounded_by_trace():
    grid = TimeGrid(1.0, 64)
    res = rate_function(0.3 * grid.times, SkeletonProblem(brownian_model(), [0.0], grid),
                        RateConfig(pieces=16))
    feasible = [s["half_norm_sq"] for s in res.trace if s["residual"] <= res.tolerance]
    assert res.value <= min(feasible) + 1e-9


# controlled system

def test_zero_control_is_uncontrolled(system):
    grid = TimeGrid.with_max_step(1.0, system.max_step())
    n1, n2 = NoiseStream(2, 1, 1), NoiseStream(2, 2, 1)
    a = simulate_controlled(system, Control.zeros(1.0, 1, 1), grid, n1, n2)
    b = simulate_slow_fast(system, grid, n1, n2)
    assert a[0].states.tobytes() == b[0].states.tobytes()
    assert a[1].states.tobytes() == b[1].states.tobytes()


def test_fast_control_unit_check(system):
    grid = TimeGrid(system.gamma / 20 * 1, 1)
    dW = np.zeros((1, 1))
    u = Control.constant([0.0, 2.0], grid.T, 1, pieces=1)
    _, fast = simulate_controlled(system, u, grid, dW, dW)
    _, free = simulate_slow_fast(system, grid, dW, dW)
    gain = (fast.states[1, 0] - free.states[1, 0]) / grid.h
    assert gain == pytest.approx(2.0 * fast_control_scale(system), rel=1e-12)


def test_fast_control_scale_ratio():
    a = worked_system(eps=0.2, gamma=0.2 ** 2)
    b = worked_system(eps=0.1, gamma=0.1 ** 2)
    assert fast_control_scale(b) / fast_control_scale(a) == pytest.approx(math.sqrt(8))


def test_control_norm_ball_enforced(system):
    grid = TimeGrid.with_max_step(1.0, system.max_step())
    with pytest.raises(ParameterError):
        simulate_controlled(system, Control.constant([2.0, 0.0], 1.0, 1), grid,
                            NoiseStream(0, 1, 1), NoiseStream(0, 2, 1), N=1.0)


def test_weak_probe_trend_and_report():
    model = AveragedModel(HALF_LINE, lambda x: -1.0 + 0 * x, unit_sigma, True)
    u = Control.constant([1.0, 0.0], 1.0, 1)
    rep = weak_convergence_probe(worked_system(), [0.2, 0.1, 0.05], GammaRule(1.5), u, model,
                                 replications=200, seed=4)
    assert rep.strictly_decreasing()
    assert rep.extra["control_norm_sq"] == 1.0 and rep.extra["N"] == 1


def test_weak_probe_coincident_systems():
    c = worked_coeffs(b1=lambda x, y: -x + 0 * y, b1_y=False, sigma1_scale=0.0)
    model = AveragedModel(HALF_LINE, lambda x: -x, lambda x: 0 * unit_sigma(x), True)
    u = Control.constant([1.0, 0.5], 1.0, 1)
    rep = weak_convergence_probe(worked_system(coeffs=c), [0.2, 0.1], GammaRule(1.5), u, model,
                                 replications=50)
    for err, steps in zip(rep.errors, rep.steps):
        assert err <= 4 * (1.0 / steps) ** 2


# tail probe

def test_brownian_sup_tail_closed_forms():
    a = math.sqrt(20)
    assert brownian_sup_tail(1.0, 0.05, 1.0, "upper") == pytest.approx(2 * stats.norm.sf(a))
    assert brownian_sup_tail(1.0, 0.05, 1.0, "upper") == pytest.approx(7.74e-6, rel=1e-3)
    two = brownian_sup_tail(1.0, 0.05, 1.0)
    assert 2 * stats.norm.sf(a) < two <= 4 * stats.norm.sf(a)
    assert -0.05 * math.log(brownian_sup_tail(1.0, 0.05, 1.0, "upper")) == pytest.approx(0.589, abs=1e-3)


def test_two_sided_series_matches_simulation():
    rng = np.random.default_rng(0)
    W = np.cumsum(rng.standard_normal((20000, 2000)) * math.sqrt(1 / 2000), axis=1)
    p_mc = np.mean(np.max(np.abs(W), axis=1) > 1.5)
    assert p_mc == pytest.approx(brownian_sup_tail(1.5, 1.0, 1.0), abs=0.015)


def _brownian_system(sigma=1.0):
    def s1(x, y):
        return sigma * np.ones(np.broadcast_shapes(x.shape[:-1], y.shape[:-1]) + (1, 1))
    c = CoefficientSet(lambda x, y: 0 * x, s1, lambda x, y: -0.5 * y + 0 * x,
                       lambda x, y: np.ones(np.broadcast_shapes(x.shape[:-1], y.shape[:-1]) + (1, 1)),
                       1, 1, 1, 1, 1.0, 0.25, 1.0, 1.0, False, False)
    return worked_system(coeffs=c, A1=ZeroOperator(1), x0=0.0)


def test_tail_probe_matches_reflection_principle():
    rep = tail_probability_probe(_brownian_system(), [0.2, 0.1], GammaRule(1.5),
                                 TailEvent(1.0, "upper"), brownian_model(), paths=200_000,
                                 rate=0.5, seed=1, slow_steps=20)
    for row in rep.rows:
        exact = brownian_sup_tail(1.0, row["epsilon"], 1.0, "upper")
        assert row["ci_low"] <= exact <= row["ci_high"]
    assert not rep.inconclusive


def test_tail_probe_impossible_event_inconclusive():
    rep = tail_probability_probe(_brownian_system(0.0), [0.2, 0.1], GammaRule(1.5),
                                 TailEvent(0.5), brownian_model(), paths=1000, seed=1)
    assert rep.inconclusive and all(r["hits"] == 0 for r in rep.rows)
    assert all(math.isnan(r["neg_eps_log_p"]) for r in rep.rows)


def test_tail_probe_chunking_invariant():
    args = (_brownian_system(), [0.2], GammaRule(1.5), TailEvent(0.8), brownian_model())
    a = tail_probability_probe(*args, paths=5000, seed=2, chunk=5000)
    b = tail_probability_probe(*args, paths=5000, seed=2, chunk=5000)
    assert a.rows == b.rows


def test_tail_probe_coupled_path_runs():
    model = AveragedModel(HALF_LINE, lambda x: -1.0 + 0 * x, unit_sigma, True)
    rep = tail_probability_probe(worked_system(), [0.2, 0.1], GammaRule(1.5), TailEvent(0.5),
                                 model, paths=400, seed=3)
    assert rep.rows[0]["hits"] > 0
    assert rep.rows[0]["p_hat"] >= rep.rows[1]["p_hat"]


def test_tail_event_validation():
    with pytest.raises(ParameterError):
        TailEvent(0.0)
    with pytest.raises(ParameterError):
        TailEvent(1.0, "lower")
