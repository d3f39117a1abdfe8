import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gensmooth.model import (
    FunctionModel,
    GlucoseInsulinModel,
    InputFunctions,
    LinearModel,
    NaturalParams,
    Partials,
    check_partials,
    derived_quantities,
    from_natural,
    infusion_rate,
    meal_ramp,
    read_schedule_csv,
    to_natural,
)
from gensmooth.odesolve import solve

THETA = np.array([2.08, -4.60, -7.99, -2.91, 0.08, 2.15, -0.07, 0.39, -0.03])
BASAL = 500.0 / 60.0


@pytest.fixture
def model():
    return GlucoseInsulinModel(InputFunctions((30.0, 240.0), ((30, 150, 60.0), (240, 360, 40.0)), BASAL))


def test_meal_ramp():
    assert meal_ramp(20, 30) == 0
    assert meal_ramp(30, 30) == 0
    assert meal_ramp(90, 30) == 60


def test_infusion_rate_lookup():
    inp = InputFunctions((), ((60, 180, 30.0),), BASAL)
    assert infusion_rate(0.0, inp) == pytest.approx(8.333333333333334)
    assert infusion_rate(100.0, inp) == 30.0
    assert infusion_rate(60.0, inp) == 30.0  # half-open: the right segment at a boundary
    assert infusion_rate(180.0, inp) == pytest.approx(BASAL)


def test_overlapping_segments_rejected():
    with pytest.raises(ValueError):
        InputFunctions((), ((0, 100, 1.0), (50, 150, 1.0)), 0.0)
    with pytest.raises(ValueError):
        InputFunctions((), ((0, 100, -1.0),), 0.0)


def test_rhs_oracle():
    model = GlucoseInsulinModel(InputFunctions((30.0, 240.0), (), BASAL))
    # scalar arithmetic of each term at the study parameters
    f1 = 2.08 - math.exp(-4.60) * 100 - math.exp(-7.99) * 100 * 20 + 2.15 * 30 * math.exp(-0.07 * 30)
    f2 = -math.exp(-2.91) * 20 + 0.08 * BASAL
    assert f1 == pytest.approx(8.295587881127123, abs=1e-12)
    assert math.exp(-4.60) * 100 == pytest.approx(1.0052, abs=1e-4)
    out = model.rhs([100.0, 20.0], 60.0, THETA)[0]
    assert out[0] == pytest.approx(f1, rel=1e-13)
    assert out[1] == pytest.approx(f2, rel=1e-13)


def test_rhs_trivial_cases(model):
    th = THETA.copy()
    th[4] = 0.0
    assert model.rhs([50.0, 0.0], 100.0, th)[0, 1] == 0.0
    th = THETA.copy()
    th[0] = 0.0
    assert model.rhs([0.0, 10.0], 10.0, th)[0, 0] == 0.0


def test_nonfinite_input_raises(model):
    with pytest.raises(FloatingPointError):
        model.rhs([np.nan, 1.0], 0.0, THETA)


def test_partials_structure(model):
    rng = np.random.default_rng(1)
    x = rng.uniform([50, 0], [300, 80], (20, 2))
    t = rng.uniform(0, 360, 20)
    P = model.partials(x, t, THETA)
    assert np.all(P.fx[:, 1, 0] == 0)
    assert np.all(P.fxx[:, 1] == 0)
    assert np.allclose(P.fx[:, 0, 0], -np.exp(THETA[1]) - np.exp(THETA[2]) * x[:, 1])
    assert np.allclose(P.fx[:, 0, 1], -np.exp(THETA[2]) * x[:, 0])
    assert np.allclose(P.fxx[:, 0, 0, 1], -np.exp(THETA[2]))
    assert np.allclose(P.fx[:, 1, 1], -np.exp(THETA[3]))


def test_partials_match_finite_differences_100_points(model):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        x = rng.uniform([40, 0], [300, 100], (1, 2))
        t = rng.uniform(0, 360, 1)
        th = THETA + rng.normal(0, 0.3, THETA.size)
        worst = max(worst, check_partials(model, x, t, th))
    assert worst <= 1e-5


def test_sign_subgradient_at_zero(model):
    th = THETA.copy()
    th[5] = 0.0
    P = model.partials([[100.0, 10.0]], [90.0], th)
    assert P.ftheta[0, 0, 5] == 0.0


def test_to_natural_examples():
    nat = to_natural(THETA, (30, 240))
    assert nat.b1 == pytest.approx(0.010052, abs=5e-7)
    th = THETA.copy()
    th[5], th[6] = -2.0, 0.0
    nat = to_natural(th)
    assert nat.mu[0] == 2.0 and nat.nu[0] == 0.0


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=9, max_size=9))
def test_sign_guarantees(theta):
    nat = to_natural(np.array(theta))
    assert nat.b1 > 0 and nat.b2 > 0 and nat.c1 > 0
    assert all(m >= 0 for m in nat.mu) and all(v <= 0 for v in nat.nu)


def test_sign_guarantees_bulk():
    th = np.random.default_rng(0).normal(0, 10, (10_000, 9))
    for row in th[:: 97]:
        nat = to_natural(row)
        assert nat.b1 > 0 and nat.b2 > 0 and nat.c1 > 0
    assert np.all(np.exp(th[:, 1:4]) > 0) and np.all(-np.abs(th[:, 6::2]) <= 0)


def test_from_natural_round_trip():
    th = from_natural(1.2, 0.005, 3e-4, 0.11, 0.06, [2.0, 0.4], [-0.05, -0.02])
    nat = to_natural(th)
    assert nat.b0 == pytest.approx(1.2) and nat.b2 == pytest.approx(3e-4) and nat.nu[1] == pytest.approx(-0.02)


def test_mcr_arithmetic():
    dq = derived_quantities(NaturalParams(0.95, 0.001, 0.0002, 0.05, 0.04), 73.5)
    assert dq.mcr == pytest.approx(17.0068, abs=1e-3)


def test_basal_zero_at_euglycemic_balance():
    dq = derived_quantities(NaturalParams(80 * 0.002, 0.002, 1e-4, 0.1, 0.05), 70)
    assert dq.basal_insulin == pytest.approx(0.0, abs=1e-15)
    assert not dq.needs_basal


def test_derived_validation():
    with pytest.raises(ValueError):
        derived_quantities(NaturalParams(1, 0.001, 1e-4, 0.1, 0.0), 70)
    with pytest.raises(ValueError):
        derived_quantities(NaturalParams(1, 0.001, 1e-4, 0.1, 0.05), 0)


# subject, b0, b1, b2, c1, c2, weight, printed MCR, printed r_b (U/hr)
TABLE1 = [
    (1, 0.95, 0.001, 0.0002, 0.05, 0.04, 73.5, 20.9, 0.30),
    (2, 0.46, 0.001, 0.0001, 0.25, 0.17, 65.8, 23.2, 0.29),
    (3, 1.94, 0.001, 0.0002, 0.03, 0.04, 61.3, 13.4, 0.34),
    (4, 1.24, 0.005, 0.0003, 0.11, 0.06, 74.9, 23.5, 0.22),
]


@pytest.mark.parametrize("row", TABLE1, ids=lambda r: f"subject{r[0]}")
def test_table_fixture_ranges(row):
    _, b0, b1, b2, c1, c2, w, mcr, rb = row
    dq = derived_quantities(NaturalParams(b0, b1, b2, c1, c2), w)
    # printed inputs are rounded, so only the literature MCR range is enforced
    assert 7.5 <= dq.mcr <= 35.2
    assert 7.5 <= mcr <= 35.2 and 0.22 <= rb <= 0.34
    assert dq.mcr == pytest.approx(mcr, rel=0.5)


def test_schedule_csv(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("start_min,end_min,rate_mU_per_min\n30,150,60\n240,360,40\n")
    assert read_schedule_csv(p) == ((30.0, 150.0, 60.0), (240.0, 360.0, 40.0))
    p.write_text("start_min,end_min\n30,150\n")
    with pytest.raises(ValueError, match="rate_mU_per_min"):
        read_schedule_csv(p)


def test_insulin_channel_linearity():
    ra = InputFunctions((), ((20, 80, 30.0),), 0.0)
    rb = InputFunctions((), ((50, 170, 10.0),), 0.0)
    both = InputFunctions((), ((20, 50, 30.0), (50, 80, 40.0), (80, 170, 10.0)), 0.0)
    grid = np.linspace(0, 240, 49)

    def ins(inp):
        return solve(GlucoseInsulinModel(inp), from_natural(1, 0.01, 1e-4, 0.05, 0.08), [100, 0.0], grid)[:, 1]

    assert np.max(np.abs(ins(ra) + ins(rb) - ins(both))) <= 1e-8


def test_function_model_fd_fallback_and_validation():
    def rhs(x, t, th):
        return -th[0] * x ** 2

    m = FunctionModel(rhs, 1, 1)
    P = m.partials([[2.0]], [0.0], [0.5])
    assert P.fx[0, 0, 0] == pytest.approx(-2.0, rel=1e-6)
    assert P.fxx[0, 0, 0, 0] == pytest.approx(-1.0, rel=1e-4)

    def bad(x, t, th):
        n = x.shape[0]
        z = np.zeros((n, 1, 1))
        return Partials(rhs(x, t, th), z + 5.0, z, np.zeros((n, 1, 1, 1)), z, np.zeros((n, 1, 1, 1, 1)))

    with pytest.raises(ValueError):
        FunctionModel(rhs, 1, 1, partials=bad, validate_at=(np.array([[2.0]]), np.array([0.0]), np.array([0.5])))


def test_linear_model_decay():
    m = LinearModel.decay()
    P = m.partials([[3.0]], [0.0], [0.2])
    assert P.f[0, 0] == pytest.approx(-0.6)
    assert P.ftheta[0, 0, 0] == -3.0
    assert check_partials(m, [[3.0]], [0.0], [0.2]) < 1e-6
