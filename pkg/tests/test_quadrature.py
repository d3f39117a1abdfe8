import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gensmooth.bspline import design_matrix, equal_knot_vector, make_knot_vector
from gensmooth.model import FunctionModel, GlucoseInsulinModel, InputFunctions, LinearModel
from gensmooth.quadrature import Collocation, make_rule, pen_grad_alpha, pen_second_derivs, pen_value

THETA = np.array([2.08, -4.60, -7.99, -2.91, 0.08, 2.15, -0.07, 0.39, -0.03])


def glucose_setup():
    inp = InputFunctions((30.0, 240.0), ((30, 150, 60.0), (240, 360, 40.0)), 500 / 60)
    model = GlucoseInsulinModel(inp)
    kvs = [equal_knot_vector(8, (0, 360)), make_knot_vector(3, [50, 100, 200], (0, 360))]
    return model, Collocation(model, kvs)


def zero_model(d=1):
    return FunctionModel(lambda x, t, th: np.zeros_like(x), d, 1)


def test_rule_panels_and_weights():
    rule = make_rule([30, 150, 150, 500], (0, 360), order=5)
    assert rule.panels.tolist() == [0, 30, 150, 360]
    assert rule.weights.sum() == pytest.approx(360.0, abs=1e-12)
    assert np.all(rule.weights > 0)
    for a, b in zip(rule.panels[:-1], rule.panels[1:]):
        inside = rule.nodes[(rule.nodes > a) & (rule.nodes < b)]
        assert inside.size == 5


def test_rule_contains_input_breaks():
    model, col = glucose_setup()
    for b in (30.0, 150.0, 240.0):
        assert b in col.rule.panels


def test_polynomial_exactness():
    rule = make_rule([1.0, 2.5], (0, 4), order=5)
    for deg in range(10):
        exact = 4.0 ** (deg + 1) / (deg + 1)
        assert rule.integrate(rule.nodes ** deg) == pytest.approx(exact, rel=1e-12)


def test_constant_spline_zero_model_has_zero_penalty():
    kv = equal_knot_vector(10, (0, 5))
    col = Collocation(zero_model(), [kv])
    pen, total = pen_value(np.full(10, 3.0), [0.0], [1.0], col)
    assert pen[0] == pytest.approx(0.0, abs=1e-24) and total == pytest.approx(0.0, abs=1e-24)
    assert np.allclose(pen_grad_alpha(np.zeros(10), [0.0], [1.0], col), 0.0)


def test_polynomial_spline_penalty_exact():
    # xdot = 0 with x = t^3: PEN = int_0^2 9 t^4 dt = 9 * 32 / 5, exact for Gauss order 5
    kv = make_knot_vector(3, [0.7, 1.3], (0, 2))
    t = np.linspace(0, 2, 40)
    a = np.linalg.lstsq(design_matrix(kv, t).values, t ** 3, rcond=None)[0]
    col = Collocation(zero_model(), [kv])
    assert col.evaluate(a, [0.0]).pen[0] == pytest.approx(9 * 32 / 5, rel=1e-12)


def test_exponential_interpolant_penalty_converges():
    m = FunctionModel(lambda x, t, th: x, 1, 1)
    pens = []
    for n in (8, 16, 32):
        kv = equal_knot_vector(n, (0, 1))
        t = np.linspace(0, 1, 200)
        a = np.linalg.lstsq(design_matrix(kv, t).values, np.exp(t), rcond=None)[0]
        pens.append(Collocation(m, [kv]).evaluate(a, [0.0]).pen[0])
    assert pens[2] < pens[1] < pens[0] and pens[2] < 1e-8


def test_lambda_linearity():
    model, col = glucose_setup()
    a = np.concatenate([np.full(8, 120.0), np.full(7, 15.0)])
    pen, tot1 = pen_value(a, THETA, [1.0, 1.0], col)
    _, tot2 = pen_value(a, THETA, [2.0, 1.0], col)
    assert tot2 - tot1 == pytest.approx(pen[0], rel=1e-12)


def test_refining_order_changes_penalty_little():
    m = LinearModel.decay()
    kv = equal_knot_vector(12, (0, 4))
    t = np.linspace(0, 4, 100)
    a = np.linalg.lstsq(design_matrix(kv, t).values, np.exp(-0.7 * t), rcond=None)[0]
    p5 = Collocation(m, [kv], order=5).evaluate(a, [0.5]).pen[0]
    p10 = Collocation(m, [kv], order=10).evaluate(a, [0.5]).pen[0]
    assert abs(p5 - p10) <= 1e-8 * p10


def test_zero_lambda_state_contributes_nothing():
    model, col = glucose_setup()
    a = np.concatenate([np.full(8, 120.0), np.linspace(10, 20, 7)])
    d = pen_second_derivs(a, THETA, [0.0, 1.0], col)
    T = col.evaluate(a, THETA, 2, True)
    assert np.allclose(d["alpha_alpha"], T.hess[1])
    assert np.allclose(d["theta_alpha"], T.cross[1])


def test_linear_model_hessian_constant_in_alpha():
    m = LinearModel(np.array([[[-1.0, 0.5], [0.0, -0.3]]]))
    kv = equal_knot_vector(6, (0, 3))
    col = Collocation(m, [kv, kv])
    rng = np.random.default_rng(0)
    h1 = col.evaluate(rng.normal(size=12), [1.2], 2).hess
    h2 = col.evaluate(rng.normal(size=12), [1.2], 2).hess
    assert np.allclose(h1, h2, atol=1e-12)


def test_third_derivative_is_unit_lambda_hessian():
    model, col = glucose_setup()
    a = np.concatenate([np.full(8, 120.0), np.linspace(10, 20, 7)])
    d = pen_second_derivs(a, THETA, [1.0, 0.0], col)
    assert np.allclose(d["lambda_alpha_alpha"][0], d["alpha_alpha"])


def _fd_check(col, a, th, lam, rng):
    h = 1e-5
    T = col.evaluate(a, th, 2, True)
    gmax = np.abs(T.grad).max()
    hmax = np.abs(T.hess).max()
    for c in rng.choice(a.size, 4, replace=False):
        e = np.zeros(a.size)
        e[c] = h
        Tp, Tm = col.evaluate(a + e, th, 1), col.evaluate(a - e, th, 1)
        assert np.allclose((Tp.pen - Tm.pen) / (2 * h), T.grad[:, c], rtol=1e-6, atol=1e-6 * gmax)
        assert np.allclose((Tp.grad - Tm.grad) / (2 * h), T.hess[:, :, c], rtol=1e-5, atol=1e-5 * hmax)
    cmax = np.abs(T.cross).max()
    for c in range(th.size):
        e = np.zeros(th.size)
        e[c] = 1e-6
        fd = (col.evaluate(a, th + e, 1).grad - col.evaluate(a, th - e, 1).grad) / 2e-6
        assert np.allclose(fd, T.cross[:, :, c], rtol=1e-5, atol=1e-5 * cmax)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_derivatives_match_finite_differences(seed):
    model, col = glucose_setup()
    rng = np.random.default_rng(seed)
    a = np.concatenate([100 + 30 * rng.normal(size=8), 15 + 5 * rng.normal(size=7)])
    th = THETA + rng.normal(0, 0.2, THETA.size)
    _fd_check(col, a, th, [1.0, 1.0], rng)


def test_third_derivative_contraction():
    model, col = glucose_setup()
    rng = np.random.default_rng(3)
    a = np.concatenate([100 + 10 * rng.normal(size=8), 15 + 3 * rng.normal(size=7)])
    W = rng.normal(size=(15, 15))
    W = W + W.T
    lam = np.array([0.7, 1.3])
    g = col.penalty_alpha_third(a, THETA, W, lam)
    h = 1e-5
    for c in range(a.size):
        e = np.zeros(a.size)
        e[c] = h
        Hp = np.tensordot(lam, col.evaluate(a + e, THETA, 2).hess, 1)
        Hm = np.tensordot(lam, col.evaluate(a - e, THETA, 2).hess, 1)
        assert np.trace(W @ (Hp - Hm)) / (2 * h) == pytest.approx(g[c], abs=1e-6 * np.abs(g).max())


def test_bases_must_match_model():
    model, _ = glucose_setup()
    with pytest.raises(ValueError):
        Collocation(model, [equal_knot_vector(5, (0, 360))])
    with pytest.raises(ValueError):
        Collocation(model, [equal_knot_vector(5, (0, 360)), equal_knot_vector(5, (0, 300))])


def test_nonfinite_penalty_raises():
    model, col = glucose_setup()
    th = THETA.copy()
    th[1] = 800.0
    with pytest.raises(FloatingPointError):
        col.evaluate(np.full(15, 100.0), th)
