import numpy as np
import pytest

from gensmooth.model import FunctionModel, GlucoseInsulinModel, InputFunctions, LinearModel, from_natural
from gensmooth.odesolve import IntegrationError, closed_form_insulin, solve

THETA = np.array([2.08, -4.60, -7.99, -2.91, 0.08, 2.15, -0.07, 0.39, -0.03])


def test_zero_rhs_constant_trajectory():
    m = FunctionModel(lambda x, t, th: np.zeros_like(x), 2, 1)
    out = solve(m, [0.0], [3.0, -1.0], np.linspace(0, 10, 11))
    assert np.all(out == [3.0, -1.0])


def test_decay_accuracy_and_grid_order():
    grid = np.array([0.0, 0.5, 0.5, 2.0, 7.0])
    out = solve(LinearModel.decay(), [0.3], [2.0], grid)
    assert np.allclose(out[:, 0], 2.0 * np.exp(-0.3 * grid), rtol=1e-7, atol=0)


def test_fixed_step_fifth_order():
    m = LinearModel.decay()
    errs = []
    for h in (0.5, 0.25, 0.125):
        x = solve(m, [1.0], [1.0], [0.0, 10.0], fixed_step=h)[-1, 0]
        errs.append(abs(x - np.exp(-10.0)))
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(rates > 4.5)


def test_piecewise_constant_rhs_is_exact_with_breakpoints():
    # xdot = 1 before t=1.3, 3 afterwards; stepping across 1.3 would not be exact
    m = FunctionModel(lambda x, t, th: np.where(t[:, None] < 1.3, 1.0, 3.0) + 0 * x, 1, 1, breakpoints=[1.3])
    grid = np.linspace(0, 4, 9)
    out = solve(m, [0.0], [0.0], grid)[:, 0]
    exact = np.where(grid < 1.3, grid, 1.3 + 3 * (grid - 1.3))
    assert np.max(np.abs(out - exact)) <= 1e-12


def test_insulin_matches_closed_form_protocol():
    inp = InputFunctions((30.0, 240.0), ((30, 150, 60.0), (240, 360, 40.0)), 500 / 60)
    m = GlucoseInsulinModel(inp)
    grid = np.linspace(0, 360, 361)
    X = solve(m, THETA, [120.0, 12.0], grid)
    ref = closed_form_insulin(np.exp(THETA[3]), THETA[4], inp, 12.0, grid)
    assert np.max(np.abs(X[:, 1] - ref)) <= 1e-8


def test_three_segment_schedule_both_directions():
    inp = InputFunctions((), ((10, 40, 20.0), (40, 55, 5.0), (90, 200, 12.0)), 2.0)
    th = from_natural(1.0, 0.01, 1e-4, 0.07, 0.05)
    grid = np.linspace(0, 300, 151)
    X = solve(GlucoseInsulinModel(inp), th, [100.0, 3.0], grid)
    ref = closed_form_insulin(0.07, 0.05, inp, 3.0, grid)
    assert np.max(np.abs(X[:, 1] - ref)) <= 1e-8


def test_closed_form_trivial_cases():
    t = np.linspace(0, 100, 11)
    assert np.allclose(closed_form_insulin(0.1, 0.05, InputFunctions(), 10.0, t), 10.0 * np.exp(-0.1 * t))
    steady = closed_form_insulin(0.1, 0.05, InputFunctions((), (), 8.0), 0.0, np.array([1e4]))
    assert steady[0] == pytest.approx(0.05 * 8.0 / 0.1)
    with pytest.raises(ValueError):
        closed_form_insulin(0.0, 0.05, InputFunctions(), 1.0, t)


def test_tolerance_self_convergence():
    inp = InputFunctions((30.0, 240.0), ((30, 150, 60.0), (240, 360, 40.0)), 500 / 60)
    m = GlucoseInsulinModel(inp)
    grid = np.linspace(0, 360, 61)
    a = solve(m, THETA, [120.0, 12.0], grid)
    b = solve(m, THETA, [120.0, 12.0], grid, rtol=5e-10, atol=5e-10)
    assert np.max(np.abs(a - b) / np.abs(b)) < 1e-7


def test_invalid_inputs():
    m = LinearModel.decay()
    with pytest.raises(ValueError):
        solve(m, [1.0], [1.0], [2.0, 1.0])
    with pytest.raises(ValueError):
        solve(m, [1.0], [np.nan], [0.0, 1.0])
    with pytest.raises(ValueError):
        solve(m, [1.0], [1.0], [0.0, 1.0], t0=0.5)


def test_blow_up_reports_location():
    m = FunctionModel(lambda x, t, th: x ** 2, 1, 1)
    with pytest.raises((IntegrationError, FloatingPointError)):
        solve(m, [0.0], [1.0], [0.0, 2.0])
