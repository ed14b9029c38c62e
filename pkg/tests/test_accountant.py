import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from langevin_dp import accountant as acc
from langevin_dp.errors import PreTransitionError, ValidationError
from langevin_dp.model import ConstantSchedule, PowerSchedule


def test_finite_time_examples():
    assert acc.rdp_finite_time(0.0, ConstantSchedule(5.0), 3.0).eval(7.0) == 0.0
    v = acc.rdp_finite_time(0.002, ConstantSchedule(100.0), 0.01).eval(2.0)
    assert v == pytest.approx(2e-4, rel=1e-12)
    v = acc.rdp_finite_time(1.0, PowerSchedule(1.0), 2.0).eval(4.0)
    assert v == pytest.approx(8.0 / 3.0, rel=1e-12)
    with pytest.raises(ValidationError):
        acc.rdp_finite_time(-1.0, ConstantSchedule(1.0), 1.0)


def test_finite_time_equals_discrete_gaussian_composition():
    # T / eta Gaussian steps with drift sensitivity Delta*beta*eta and variance 2*eta
    delta_grad, beta, T, eta, alpha = 0.01, 40.0, 0.5, 0.001, 3.0
    per_step = alpha * (delta_grad * beta * eta) ** 2 / (2 * 2 * eta)
    composed = per_step * round(T / eta)
    curve = acc.rdp_finite_time(delta_grad, ConstantSchedule(beta), T)
    assert curve.eval(alpha) == pytest.approx(composed, rel=1e-12)


def test_short_term_examples():
    assert acc.rdp_short_term_sc(0.1, 10.0, 1.0, 0.0).eval(2.0) == 0.0
    assert acc.rdp_short_term_sc(0.1, 10.0, 1.0, 0.2).eval(2.0) == pytest.approx(
        0.12642411176571154, rel=1e-12
    )
    asym = 2.0 * 10.0 * 0.1**2 / 1.0
    v = acc.rdp_short_term_sc(0.1, 10.0, 1.0, 100.0 / 10.0).eval(2.0)
    assert abs(v - asym) <= 1e-20 * asym
    assert "N(0, (beta m)^-1 I)" in acc.rdp_short_term_sc(0.1, 1, 1, 1).description
    with pytest.raises(ValidationError):
        acc.rdp_short_term_sc(0.1, 0.0, 1.0, 1.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.001, 2), st.floats(0.1, 50), st.floats(0.1, 5), st.floats(0, 100), st.floats(1.01, 100))
def test_short_term_below_asymptote(dg, beta, m, T, alpha):
    v = acc.rdp_short_term_sc(dg, beta, m, T).eval(alpha)
    assert 0 <= v <= alpha * beta * dg**2 / m * (1 + 1e-12)


UNIT = acc.ScBoundParams(m=1, M=1, R=1, beta=1, delta_grad=1, p=1)


def test_long_term_examples():
    zero = lambda a: 0.0
    t0 = UNIT.t0(2.0)
    assert t0 == pytest.approx(2 * math.log(2))
    assert acc.rdp_long_term_sc(UNIT, zero, t0).eval(2.0) == pytest.approx(10.5, rel=1e-14)
    stat = lambda a: 0.01 * a
    far = acc.rdp_long_term_sc(UNIT, stat, t0 + 1e4).eval(2.0)
    assert far == pytest.approx(4 / 3 * 0.06, abs=1e-12)
    with pytest.raises(PreTransitionError):
        acc.rdp_long_term_sc(UNIT, zero, t0 - 1e-3).eval(2.0)
    with pytest.raises(ValidationError):
        acc.rdp_long_term_sc(UNIT, zero, 10.0).eval(1.5)


def test_long_term_nonincreasing_in_T():
    params = acc.ScBoundParams(m=0.5, M=2.0, R=1.5, beta=3.0, delta_grad=0.2, p=3)
    stat = lambda a: 0.02 * a
    Ts = np.linspace(params.t0(4.0), params.t0(4.0) + 20, 60)
    vals = [acc.rdp_long_term_sc(params, stat, T).eval(4.0) for T in Ts]
    assert np.all(np.diff(vals) <= 1e-15)


def test_sc_params_validation():
    with pytest.raises(ValidationError):
        acc.ScBoundParams(m=2, M=1, R=1, beta=1, delta_grad=1, p=1)
    with pytest.raises(ValidationError):
        acc.ScBoundParams(m=1, M=1, R=0, beta=1, delta_grad=1, p=1)


# ---------------------------------------------------------------- conversion


def test_conversion_linear_example():
    curve = acc.linear_curve(0.01)
    opt = acc.analytic_optimum_linear(0.01, 1e-5)
    # independent values via mpmath: alpha* = 1 + sqrt(log(1e5)/0.01)
    assert opt.alpha == pytest.approx(34.93070212207556, rel=1e-12)
    assert opt.eps == pytest.approx(0.6886140424415112, rel=1e-12)
    coarse = acc.rdp_to_approx_dp(curve, 1e-5, acc.default_alpha_grid())
    assert abs(coarse.eps - opt.eps) <= 0.02 * opt.eps
    assert acc.rdp_to_approx_dp(curve, 1e-5).eps == pytest.approx(opt.eps, rel=1e-12)


def test_conversion_zero_curve_uses_largest_alpha():
    grid = [1.5, 2.0, 10.0, 1024.0]
    res = acc.rdp_to_approx_dp(acc.linear_curve(0.0), 1e-6, grid)
    assert res.alpha == 1024.0
    assert res.eps == pytest.approx(math.log(1e6) / 1023.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-4, 10.0), st.floats(1e-10, 0.5), st.integers(2, 40))
def test_conversion_superset_grid_never_worse(c, delta, k):
    curve = acc.linear_curve(c)
    g = np.geomspace(1.1, 500, k)
    g2 = np.union1d(g, np.geomspace(1.05, 900, 2 * k))
    a = acc.rdp_to_approx_dp(curve, delta, g)
    b = acc.rdp_to_approx_dp(curve, delta, g2)
    assert b.eps <= a.eps
    assert a.eps >= curve.eval(a.alpha)


def test_conversion_errors():
    with pytest.raises(ValidationError):
        acc.rdp_to_approx_dp(acc.linear_curve(1.0), 1e-5, [])
    with pytest.raises(ValidationError):
        acc.rdp_to_approx_dp(acc.linear_curve(1.0), 1.5)
    with pytest.raises(ValidationError):
        acc.rdp_to_approx_dp(acc.linear_curve(1.0), 1e-5, [0.5])


def test_conversion_skips_pre_transition_orders():
    # t0 grows with alpha, so long-horizon curves are undefined at large orders
    curve = acc.rdp_long_term_sc(UNIT, lambda a: 0.0, 5.0)
    res = acc.rdp_to_approx_dp(curve, 1e-5)
    assert UNIT.t0(res.alpha) <= 5.0


def test_preset_alpha():
    assert acc.preset_alpha(1.0, 1e-5) == pytest.approx(1 + 2 * math.log(1e5))


# ---------------------------------------------------------------- other bounds


def test_expmech_epsilon():
    assert acc.pure_dp_expmech_epsilon(1.0, 2.0, 100, 25.0) == pytest.approx(1.0)
    assert acc.pure_dp_expmech_epsilon(1.0, 2.0, 100, 0.0) == 0.0
    t = acc.expmech_temperature(0.7, 1.3, 2.5, 321)
    assert acc.pure_dp_expmech_epsilon(1.3, 2.5, 321, t) == pytest.approx(0.7, rel=1e-15)


def test_stability_bound_examples():
    assert acc.stability_bound(1.0, 100, ConstantSchedule(10.0), 0.0) == 0.0
    assert acc.stability_bound(1.0, 100, ConstantSchedule(10.0), 0.1) == pytest.approx(0.04)
    assert acc.stability_bound(1.0, 4, PowerSchedule(1.0), 2.0) == pytest.approx(2.0)
    s = ConstantSchedule(3.0)
    assert acc.stability_bound(2.0, 200, s, 1.0) == pytest.approx(acc.stability_bound(2.0, 100, s, 1.0) / 2)
    assert acc.stability_bound(2.0, 100, s, 2.0) == pytest.approx(2 * acc.stability_bound(2.0, 100, s, 1.0))


# ---------------------------------------------------------------- phase transition


def test_phase_transition_zero_stationary():
    res = acc.phase_transition_time(UNIT, lambda a: 0.0, 2.0)
    assert res is not None and res.T_star >= res.t0
    long = lambda T: acc.rdp_long_term_sc(UNIT, lambda a: 0.0, T).eval(2.0)
    short = lambda T: acc.rdp_short_term_sc(1.0, 1.0, 1.0, T).eval(2.0)
    assert long(res.T_star) <= short(res.T_star)
    assert long(res.T_star - 1e-3) > short(res.T_star - 1e-3)
    assert math.isfinite(res.approximation)


def test_phase_transition_none_when_condition_fails():
    assert acc.phase_transition_time(UNIT, lambda a: 1e6, 2.0) is None


def test_phase_transition_monotone_in_stationary_scale():
    Ts = [acc.phase_transition_time(UNIT, lambda a, s=s: s * a, 2.0).T_star for s in (0.1, 0.05, 0.0)]
    assert Ts[0] >= Ts[1] >= Ts[2]


# ---------------------------------------------------------------- coupling


def test_pgd_identical_functions_gap_zero():
    f = acc.ShiftedQuadraticPair(np.array([1.0, 2.0]), np.zeros(2))
    assert acc.pgd_trajectory_stability_check(f, 0, 0.1, 2000) == 0.0


def test_pgd_isotropic_gap_approaches_delta():
    v = np.array([0.3, -0.4])
    f = acc.ShiftedQuadraticPair(np.ones(2), v)
    gap = acc.pgd_trajectory_stability_check(f, 1, 0.05, 5000)
    assert gap <= f.delta_grad / f.m + 1e-9
    # the coupled difference obeys e_{t+1} = (1 - eta) e_t + eta v, so e_t -> v
    assert gap == pytest.approx(0.5 * (1 - 0.95**5000), rel=1e-9)


def test_pgd_gap_scale_invariant():
    v = np.array([0.2, 0.1, -0.3])
    spec = np.array([0.5, 1.0, 2.0])
    g1 = acc.pgd_trajectory_stability_check(acc.ShiftedQuadraticPair(spec, v), 2, 0.1, 3000)
    f3 = acc.ShiftedQuadraticPair(3 * spec, v)
    assert f3.delta_grad / f3.m == pytest.approx(acc.ShiftedQuadraticPair(spec, v).delta_grad / 0.5)
    g3 = acc.pgd_trajectory_stability_check(f3, 2, 0.1, 3000)
    bound = acc.ShiftedQuadraticPair(spec, v).delta_grad / 0.5
    assert g1 <= bound + 1e-9 and g3 <= bound + 1e-9


def test_pgd_rejects_large_step():
    with pytest.raises(ValidationError):
        acc.pgd_trajectory_stability_check(acc.ShiftedQuadraticPair(np.array([4.0]), np.array([1.0])), 0, 0.5, 10)


def test_curve_csv(tmp_path):
    curve = acc.linear_curve(0.5)
    path = tmp_path / "c.csv"
    curve.to_csv(path, [2, 4, 8])
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["alpha", "bound"]
    assert [float(r[1]) for r in rows[1:]] == [1.0, 2.0, 4.0]


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(0, 5), st.floats(0.1, 10))
def test_curves_monotone_and_nonnegative(dg, a, T):
    curve = acc.rdp_finite_time(dg, PowerSchedule(a), T)
    vals = [curve.eval(x) for x in np.linspace(1.1, 50, 30)]
    assert min(vals) >= 0 and np.all(np.diff(vals) >= 0)
