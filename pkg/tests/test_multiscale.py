import math

import numpy as np
import pytest

from conftest import HALF_LINE, worked_coeffs, worked_system
from mmsde.errors import AssumptionError, ParameterError, RegimeError
from mmsde.monotone import ZeroOperator
from mmsde.multiscale import (AveragedModel, CoefficientSet, EstimationConfig, FrozenProblem,
                              GammaRule, KhasminskiiConfig, averaging_error, audit_assumptions,
                              build_averaged_model, check_regime, contraction_fit,
                              estimate_averaged_drift, estimate_invariant_measure,
                              integrate_deterministic, khasminskii_paths, simulate_frozen,
                              simulate_slow_fast, solve_averaged)
from mmsde.paths import NoiseStream, TimeGrid


def ones(x, y):
    return np.ones(np.broadcast_shapes(x.shape[:-1], y.shape[:-1]) + (1, 1))


def zeros(x, y):
    return np.zeros(np.broadcast_shapes(x.shape[:-1], y.shape[:-1]) + (1, 1))


def coupled_coeffs(k=0.3):
    """Worked example with the fast mean shifted by k*x (so Yhat differs from Y)."""
    return CoefficientSet(lambda x, y: 1.0 - y + 0 * x, ones,
                          lambda x, y: 1.0 + k * x - 0.5 * y, ones, 1, 1, 1, 1,
                          L_b1s1=1.0, L_b2s2=0.25 + k * k, beta=1.0, sigma2_bound=1.0,
                          sigma1_depends_on_y=False)


# coefficient set and system validation

def test_alpha_and_refusal():
    assert worked_coeffs().alpha == 0.5
    with pytest.raises(AssumptionError):
        CoefficientSet(lambda x, y: 0 * x, ones, lambda x, y: -y, ones, 1, 1, 1, 1,
                       L_b2s2=0.6, beta=1.0)


def test_shape_mismatch_rejected():
    with pytest.raises(ParameterError):
        CoefficientSet(lambda x, y: np.zeros(2), ones, lambda x, y: -y, ones, 1, 1, 1, 1)


def test_system_validation():
    with pytest.raises(ParameterError):
        worked_system(eps=1.5)
    with pytest.raises(ParameterError):
        worked_system(x0=-1.0)


def test_gamma_rule_regime():
    with pytest.raises(RegimeError):
        GammaRule(1.0)
    with pytest.raises(RegimeError):
        check_regime([0.2, 0.1], [0.2 ** 0.5, 0.1 ** 0.5])
    check_regime([0.2, 0.1, 0.05], [e ** 1.5 for e in (0.2, 0.1, 0.05)])


# coupled simulation

def test_step_rule_enforced(system):
    with pytest.raises(ParameterError, match="gamma/20"):
        simulate_slow_fast(system, TimeGrid(1.0, 10), NoiseStream(0, 1, 1), NoiseStream(0, 2, 1))


def test_decoupled_system_matches_averaged_path():
    c = worked_coeffs(b1=lambda x, y: -1.0 + 0 * x, b1_y=False, sigma1_scale=0.0)
    sys_ = worked_system(coeffs=c)
    grid = TimeGrid.with_max_step(1.0, sys_.max_step())
    slow, _ = simulate_slow_fast(sys_, grid, NoiseStream(1, 1, 1), NoiseStream(1, 2, 1))
    model = AveragedModel(HALF_LINE, lambda x: -1.0 + 0 * x)
    ref = solve_averaged(model, [0.5], grid)
    assert slow.states.tobytes() == ref.states.tobytes()


def test_simulation_deterministic_and_in_domain(system):
    grid = TimeGrid.with_max_step(1.0, system.max_step())
    noises = ([NoiseStream(4, (r, 1), 1) for r in range(10)],
              [NoiseStream(4, (r, 2), 1) for r in range(10)])
    a = simulate_slow_fast(system, grid, *noises)
    b = simulate_slow_fast(system, grid, *noises)
    assert a[0].states.tobytes() == b[0].states.tobytes()
    assert a[0].domain_violation <= 1e-9 and np.all(a[0].states >= 0)


# frozen equation

def test_frozen_linear_decay():
    c = CoefficientSet(lambda x, y: 0 * x, ones, lambda x, y: -y + 0 * x, zeros, 1, 1, 1, 1)
    path = simulate_frozen(FrozenProblem([0.0], ZeroOperator(1), c), 5.0, 1e-3,
                           NoiseStream(0, 0, 1), y0=[1.0])
    np.testing.assert_allclose(path.states[:, 0], np.exp(-path.times), atol=2e-3)


def test_frozen_boundary_start_stays_in_closure():
    c = worked_coeffs(m=0.0)
    path = simulate_frozen(FrozenProblem([0.0], HALF_LINE, c), 10.0, 0.01,
                           NoiseStream(0, 0, 1), y0=[0.0])
    assert path.domain_violation == 0.0 and np.all(path.states >= 0)


def test_invariant_measure_worked_example():
    est = estimate_invariant_measure(FrozenProblem([0.0], ZeroOperator(1), worked_coeffs()),
                                     burn_in=20, sample_time=2000, h=0.01,
                                     noise=NoiseStream(3, 0, 1))
    assert est.within(mean=2.0, second_moment=5.0, k=3)
    assert est.second_moment >= float(est.mean @ est.mean)


def test_invariant_measure_point_mass():
    c = CoefficientSet(lambda x, y: 0 * x, ones, lambda x, y: -y + 0 * x, zeros, 1, 1, 1, 1,
                       L_b2s2=0.0, beta=2.0)
    est = estimate_invariant_measure(FrozenProblem([0.0], ZeroOperator(1), c), burn_in=50,
                                     sample_time=50, y0=[1.0])
    assert abs(est.mean[0]) < 1e-10 and est.second_moment < 1e-10


def test_burn_in_rules():
    problem = FrozenProblem([0.0], ZeroOperator(1), worked_coeffs())
    with pytest.raises(ParameterError):
        estimate_invariant_measure(problem, burn_in=5, sample_time=10)
    est = estimate_invariant_measure(problem, sample_time=10)
    assert est.burn_in == 20.0


def test_second_moment_growth_bound():
    c = coupled_coeffs(k=0.1)
    C = 6.0  # closed form (2 + 0.2x)^2 + 1 <= 5.04 (1 + x^2)
    for x in (-3.0, 0.0, 2.0, 5.0):
        est = estimate_invariant_measure(FrozenProblem([x], ZeroOperator(1), c), sample_time=400,
                                         noise=NoiseStream(1, int(x + 10), 1))
        assert est.second_moment <= C * (1 + x * x)
        assert est.within(mean=2 + 0.2 * x, second_moment=(2 + 0.2 * x) ** 2 + 1, k=4)


# averaged drift

def test_averaged_drift_y_and_y_squared():
    cfg = EstimationConfig(sample_time=2000, seed=1)
    c = worked_coeffs(b1=lambda x, y: y + 0 * x)
    d = estimate_averaged_drift([0.0], c, ZeroOperator(1), cfg)
    assert abs(d.value[0] - 2.0) <= d.ci_half_width[0]
    c0 = worked_coeffs(m=0.0, b1=lambda x, y: y * y + 0 * x)
    d = estimate_averaged_drift([0.0], c0, ZeroOperator(1), cfg)
    assert abs(d.value[0] - 1.0) <= d.ci_half_width[0]


def test_averaged_drift_exact_without_y():
    c = worked_coeffs(b1=lambda x, y: x + 0 * y, b1_y=False)
    d = estimate_averaged_drift([0.37], c, ZeroOperator(1))
    assert d.value[0] == 0.37 and d.ci_half_width[0] == 0.0


def test_build_averaged_model_closed_form_and_table():
    sys_ = worked_system(coeffs=worked_coeffs(b1=lambda x, y: y + 0 * x))
    closed = build_averaged_model(sys_, None, closed_form=lambda x: 2.0 + 0 * x)
    assert closed.provenance == "closed-form" and closed.table is None
    cfg = EstimationConfig(sample_time=300, seed=2)
    model = build_averaged_model(sys_, np.linspace(0, 2, 5), cfg)
    assert model.provenance == "estimated"
    diffs = np.abs(np.diff(model.table[:, 0]))
    assert np.all(diffs <= 2 * (model.table_ci[1:, 0] + model.table_ci[:-1, 0]))
    assert np.isfinite(model.lipschitz_estimate)
    with pytest.warns(RuntimeWarning):
        model.bbar1(np.array([[3.0]]))
    assert model.extrapolations


def test_solve_averaged_examples():
    h = 1e-3
    grid = TimeGrid.from_step(1.0, h)
    refl = solve_averaged(AveragedModel(HALF_LINE, lambda x: -1.0 + 0 * x), [0.5], grid)
    assert np.max(np.abs(refl.states[:, 0] - np.maximum(0.5 - grid.times, 0))) <= 2 * h
    flat = solve_averaged(AveragedModel(ZeroOperator(1), lambda x: 0 * x), [0.3], grid)
    assert np.all(flat.states == 0.3)
    decay = solve_averaged(AveragedModel(ZeroOperator(1), lambda x: -x), [1.0], grid)
    assert np.max(np.abs(decay.states[:, 0] - np.exp(-grid.times))) <= 2 * h


def test_integrate_deterministic_batch_forcing():
    grid = TimeGrid(1.0, 10)
    speeds = np.array([[0.0], [1.0], [-1.0]])
    path = integrate_deterministic(ZeroOperator(1), lambda x: 0 * x, [0.0], grid,
                                   lambda x, k: speeds, batch_shape=(3,))
    np.testing.assert_allclose(path.final[:, 0], [0.0, 1.0, -1.0])


# Khasminskii construction

def test_khasminskii_x_independent_fast_equation():
    sys_ = worked_system()
    grid = TimeGrid.with_max_step(1.0, sys_.max_step())
    cfg = KhasminskiiConfig.from_gamma(sys_.gamma).snapped(grid.h)
    out = khasminskii_paths(sys_, cfg, grid, NoiseStream(0, 1, 1), NoiseStream(0, 2, 1))
    assert out["Yhat"].states.tobytes() == out["Y"].states.tobytes()


def test_khasminskii_single_block_freezes_x0():
    sys_ = worked_system(coeffs=coupled_coeffs())
    grid = TimeGrid.with_max_step(1.0, sys_.max_step())
    out = khasminskii_paths(sys_, KhasminskiiConfig(1.0), grid, NoiseStream(0, 1, 1),
                            NoiseStream(0, 2, 1))
    from mmsde.paths import brownian_increments
    dW2 = brownian_increments(NoiseStream(0, 2, 1), grid)
    y = np.array([0.0])
    for k in range(grid.count):
        y = y + grid.h / sys_.gamma * (1.0 + 0.3 * 0.5 - 0.5 * y) + dW2[k] / math.sqrt(sys_.gamma)
    np.testing.assert_allclose(out["Yhat"].final, y, rtol=1e-12)
    assert not np.array_equal(out["Yhat"].states, out["Y"].states)


def test_khasminskii_auxiliary_close_to_original():
    sys_ = worked_system(eps=0.05, coeffs=coupled_coeffs())
    grid = TimeGrid.with_max_step(1.0, sys_.max_step())
    cfg = KhasminskiiConfig.from_gamma(sys_.gamma).snapped(grid.h)
    out = khasminskii_paths(sys_, cfg, grid, [NoiseStream(1, (r, 1), 1) for r in range(50)],
                            [NoiseStream(1, (r, 2), 1) for r in range(50)])
    err = np.mean(np.max((out["X"].states - out["Xhat"].states)[..., 0] ** 2, axis=-1))
    assert err < 0.05
    assert cfg.block_start(0.37) <= 0.37 < cfg.block_start(0.37) + cfg.delta


def test_khasminskii_delta_must_divide_step():
    sys_ = worked_system()
    grid = TimeGrid.with_max_step(1.0, sys_.max_step())
    with pytest.raises(ParameterError):
        khasminskii_paths(sys_, KhasminskiiConfig(grid.h * 2.5), grid, NoiseStream(0, 1, 1),
                          NoiseStream(0, 2, 1))


# averaging error

def test_averaging_error_trend_and_report():
    sys_ = worked_system()
    model = AveragedModel(HALF_LINE, lambda x: -1.0 + 0 * x)
    rep = averaging_error(sys_, [0.2, 0.1, 0.05], GammaRule(1.5), model, 200, seed=5)
    assert rep.strictly_decreasing()
    assert rep.errors[-1] < 0.5 * rep.errors[0]
    assert all(h > 0 for h in rep.ci_half_widths) and rep.seed == 5
    assert [r["reps"] for r in rep.rows()] == [200] * 3


def test_averaging_error_pure_discretization():
    c = worked_coeffs(b1=lambda x, y: -x + 0 * y, b1_y=False, sigma1_scale=0.0)
    sys_ = worked_system(coeffs=c)
    model = AveragedModel(HALF_LINE, lambda x: -x)
    rep = averaging_error(sys_, [0.2, 0.1], GammaRule(1.5), model, 50)
    for err, steps in zip(rep.errors, rep.steps):
        assert err <= 4 * (1.0 / steps) ** 2


def test_averaging_error_guards():
    sys_ = worked_system()
    model = AveragedModel(HALF_LINE, lambda x: -1.0 + 0 * x)
    with pytest.raises(ParameterError):
        averaging_error(sys_, [0.2], GammaRule(1.5), model, 10)
    with pytest.raises(RegimeError):
        averaging_error(sys_, [0.1, 0.2], GammaRule(1.5), model, 50)


def test_averaging_error_jobs_independent():
    sys_ = worked_system()
    model = AveragedModel(HALF_LINE, lambda x: -1.0 + 0 * x)
    a = averaging_error(sys_, [0.2], GammaRule(1.5), model, 60, seed=3, jobs=1)
    b = averaging_error(sys_, [0.2], GammaRule(1.5), model, 60, seed=3, jobs=4)
    assert a.errors == b.errors and a.ci_half_widths == b.ci_half_widths


# assumption audit and contraction

def test_audit_worked_example_passes():
    reports = audit_assumptions(worked_coeffs(), A1=HALF_LINE, A2=ZeroOperator(1))
    assert all(r.passed for r in reports.values()), {k: r.worst_violation for k, r in reports.items()}


def test_audit_expanding_fast_drift_fails():
    c = CoefficientSet(lambda x, y: 0 * x, ones, lambda x, y: y + 0 * x, ones, 1, 1, 1, 1,
                       L_b1s1=1.0, L_b2s2=1.0, sigma2_bound=1.0)
    c.beta = 0.5
    reports = audit_assumptions(c)
    assert not reports["H2_b2_sigma2"].passed
    assert reports["H3_sigma2"].passed


def test_audit_detects_wrong_lipschitz_constant():
    c = worked_coeffs()
    c.L_b1s1 = 0.5
    assert not audit_assumptions(c)["H1_b1_sigma1"].passed


def test_contraction_fit_worked_example():
    problem = FrozenProblem([0.0], ZeroOperator(1), worked_coeffs())
    fit = contraction_fit(problem, [0.0], [3.0], T=5.0, h=0.01, noise=NoiseStream(0, 0, 1))
    assert fit.passed and fit.fitted_rate == pytest.approx(1.0, rel=0.02)


def test_contraction_fit_beta_rate():
    beta = 3.0
    c = CoefficientSet(lambda x, y: 0 * x, ones, lambda x, y: -beta * y / 2 + 0 * x, ones,
                       1, 1, 1, 1, L_b2s2=0.0, beta=beta)
    fit = contraction_fit(FrozenProblem([0.0], ZeroOperator(1), c), [1.0], [-1.0], T=3.0,
                          h=0.005, noise=NoiseStream(1, 0, 1))
    assert fit.fitted_rate == pytest.approx(beta, rel=0.02)


def test_contraction_fit_degenerate():
    problem = FrozenProblem([0.0], ZeroOperator(1), worked_coeffs())
    with pytest.raises(ParameterError):
        contraction_fit(problem, [1.0], [1.0], T=1.0, h=0.01, noise=NoiseStream(0, 0, 1))
