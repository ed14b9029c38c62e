import math

import numpy as np
import pytest
from scipy import stats

from langevin_dp import accountant
from langevin_dp import diffusion as dif
from langevin_dp.errors import NumericalError, ValidationError
from langevin_dp.model import (
    Box,
    ConstantSchedule,
    Dataset,
    EmpiricalLoss,
    L2Ball,
    LossModel,
    PowerSchedule,
    make_abs_linear_loss,
    make_quadratic_loss,
)


def _linear_loss(p, g):
    g = np.asarray(g, dtype=float)
    return LossModel(
        name="linear",
        p=p,
        per_example_value=lambda th, d: np.repeat((th @ g)[..., None], len(d), axis=-1),
        per_example_gradient=lambda th, d: np.broadcast_to(g, th.shape[:-1] + (len(d), p)).copy(),
        lipschitz_L=float(np.linalg.norm(g)) or 1.0,
        convex=True,
    )


def _quad(p=2, n=50, seed=0, radius=1.0, data_radius=0.5):
    ball = L2Ball(np.zeros(p), radius)
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-1, 1, (n, p))
    pts *= data_radius / np.maximum(np.linalg.norm(pts, axis=1, keepdims=True), data_radius)
    return EmpiricalLoss(make_quadratic_loss(p, ball, data_radius), Dataset(pts)), ball


BIG = Box.cube(2, 1e6)


# ---------------------------------------------------------------- run_pld


def test_zero_gradient_is_brownian():
    el = EmpiricalLoss(_linear_loss(2, [0.0, 0.0]), Dataset(np.zeros((1, 1))))
    theta0 = np.array([0.3, -0.2])
    T = 1.0
    cfg = dif.DiffusionConfig(ConstantSchedule(1.0), T, 50, seed=11, theta0=theta0)
    final = dif.simulate_chains(el, BIG, cfg, 10_000).final
    assert np.all(np.abs(final.mean(axis=0) - theta0) <= 3 * math.sqrt(2 * T / 1e4))


def test_linear_drift_mean():
    g = np.array([1.0, -2.0])
    el = EmpiricalLoss(_linear_loss(2, g), Dataset(np.zeros((1, 1))))
    beta, T = 3.0, 0.5
    cfg = dif.DiffusionConfig(ConstantSchedule(beta), T, 40, seed=5, theta0=np.zeros(2))
    final = dif.simulate_chains(el, BIG, cfg, 10_000).final
    expect = -beta * T * g
    assert np.all(np.abs(final.mean(axis=0) - expect) <= 3 * math.sqrt(2 * T / 1e4))


def test_halving_step_is_stable():
    el, ball = _quad()
    sched, T = ConstantSchedule(20.0), 0.5
    finals = []
    for steps in (500, 1000):
        cfg = dif.DiffusionConfig(sched, T, steps, seed=21)
        finals.append(el.value(dif.simulate_chains(el, ball, cfg, 1000).final))
    a, b = finals
    se = math.sqrt(a.var(ddof=1) / a.size + b.var(ddof=1) / b.size)
    assert abs(a.mean() - b.mean()) < 3 * se


def test_trajectory_feasible_and_uniform_times():
    el, ball = _quad()
    cfg = dif.DiffusionConfig(PowerSchedule(1.0), 2.0, 400, seed=3, theta0=np.array([0.9, 0.0]))
    traj = dif.run_pld(el, ball, cfg)
    assert traj.thetas.shape == (401, 2)
    assert np.all(ball.contains(traj.thetas))
    np.testing.assert_allclose(np.diff(traj.times), 2.0 / 400, rtol=1e-12)
    assert traj.times[0] == 0.0 and traj.times[-1] == 2.0


def test_determinism():
    el, ball = _quad()
    cfg = dif.DiffusionConfig(ConstantSchedule(5.0), 1.0, 200, seed=99)
    a = dif.run_pld(el, ball, cfg).thetas
    b = dif.run_pld(el, ball, cfg).thetas
    assert np.array_equal(a, b)
    c = dif.run_pld(el, ball, dif.DiffusionConfig(ConstantSchedule(5.0), 1.0, 200, seed=100)).thetas
    assert not np.array_equal(a, c)


def test_chain_independent_of_batch_size():
    el, ball = _quad()
    cfg = dif.DiffusionConfig(ConstantSchedule(5.0), 1.0, 100, seed=4)
    solo = dif.simulate_chains(el, ball, cfg, 1, first_chain=2).final[0]
    batch = dif.simulate_chains(el, ball, cfg, 5).final[2]
    np.testing.assert_allclose(solo, batch, rtol=0, atol=1e-14)


def test_zero_noise_is_contracting_pgd():
    el, ball = _quad()
    star = el.exact_minimizer(ball)
    beta, T, steps = 10.0, 2.0, 200  # eta * beta * M = 0.1
    cfg = dif.DiffusionConfig(ConstantSchedule(beta), T, steps, seed=0, theta0=np.array([-0.9, 0.3]))
    traj = dif.run_pld(el, ball, cfg, noise_scale=0.0)
    dist = np.linalg.norm(traj.thetas - star, axis=1)
    assert np.all(np.diff(dist) <= 1e-15)
    assert dist[-1] < 1e-6


def test_nonfinite_gradient_names_step():
    bad = LossModel(
        name="bad",
        p=1,
        per_example_value=lambda th, d: np.zeros(th.shape[:-1] + (len(d),)),
        per_example_gradient=lambda th, d: np.full(th.shape[:-1] + (len(d), 1), np.nan),
        lipschitz_L=1.0,
    )
    el = EmpiricalLoss(bad, Dataset(np.zeros((2, 1))))
    cfg = dif.DiffusionConfig(ConstantSchedule(1.0), 1.0, 10, seed=0)
    with pytest.raises(NumericalError, match="step 0"):
        dif.run_pld(el, Box.cube(1, 1.0), cfg)


def test_config_validation():
    with pytest.raises(ValidationError):
        dif.DiffusionConfig(ConstantSchedule(1.0), 1.0, 0, seed=0)
    with pytest.raises(ValidationError):
        dif.DiffusionConfig(ConstantSchedule(1.0), -1.0, 10, seed=0)


def test_default_steps_floor():
    assert dif.default_steps(0.25, 2) == 1000
    assert dif.default_steps(10.0, 5) == 5000


def test_trajectory_csv(tmp_path):
    el, ball = _quad()
    traj = dif.run_pld(el, ball, dif.DiffusionConfig(ConstantSchedule(1.0), 0.1, 5, seed=1))
    traj.to_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "step,time,theta_0,theta_1" and len(lines) == 7


# ---------------------------------------------------------------- output rules


def test_convex_calibration_examples():
    beta, T = dif.calibrate_convex(1.0, 1e-6, 1.0, 1000, 1.0, 2)
    assert T == 0.25
    # closed form 1000 / sqrt(2 ln 1e6); mpmath gives 190.23986655081259
    assert beta == pytest.approx(190.23986655081259, rel=1e-12)
    assert beta == pytest.approx(190.28, rel=1e-3)
    with pytest.raises(ValidationError, match="log"):
        dif.calibrate_convex(30.0, 1e-6, 1.0, 1000, 1.0, 2)


def test_convex_last_iterate_certified():
    el, ball = _quad(n=200)
    rel = dif.convex_last_iterate(el, ball, 1.0, 1e-5, seed=2)
    assert ball.contains(rel.theta_priv)
    assert rel.certified_eps <= 1.0
    curve = rel.privacy_curve(el.gradient_sensitivity)
    assert accountant.rdp_to_approx_dp(curve, 1e-5).eps <= 1.0


def test_sc_weights_sum_to_one_and_nonnegative():
    s = PowerSchedule(1.7)
    for T, m in [(3.0, 0.5), (200.0, 2.0)]:
        times = np.linspace(0, T, 5001)
        w = dif.average_weights(s, m, times)
        assert np.all(w >= 0)
        assert abs(w.sum() - 1.0) <= 1e-12


def test_sc_weights_constant_trajectory():
    s = PowerSchedule(0.5)
    times = np.linspace(0, 4.0, 1001)
    w = dif.average_weights(s, 0.5, times)
    v = np.array([0.1, -0.7])
    np.testing.assert_allclose(w @ np.tile(v, (1000, 1)), v, rtol=1e-12)


def test_sc_weights_small_m_limit():
    s = PowerSchedule(1.0)
    times = np.linspace(0, 3.0, 3001)
    traj = np.sin(times[:-1])[:, None]
    avg = dif.average_weights(s, 1e-8, times) @ traj
    B = s.cumulative(times)
    direct = (np.diff(B) @ traj) / B[-1]
    np.testing.assert_allclose(avg, direct, rtol=1e-4)


def test_sc_fixed_point_oracle():
    # oracle by mpmath root finding for T = log^2(R + 1) (a + 1)^2 / (m Q)^2
    cal = dif.calibrate_sc_weighted(1.0, 1e-5, 1.5, 250, 0.5, 2, 4.0)
    assert cal.T == pytest.approx(3.608040991036920, rel=1e-9)
    assert cal.a == pytest.approx(1.994701415592412, rel=1e-9)
    assert cal.c == pytest.approx(0.5 * 250 / (3 * math.sqrt(math.log(1e5))) / (cal.a + 1), rel=1e-12)


def test_sc_rejects_negative_exponent():
    with pytest.raises(ValidationError):
        dif.calibrate_sc_weighted(0.01, 1e-5, 1.0, 20, 0.5, 2, 4.0)


def test_sc_weighted_average_release():
    el, ball = _quad(n=250)
    rel = dif.sc_weighted_average(el, ball, 0.5, 1.0, 1e-5, seed=8)
    assert ball.contains(rel.theta_priv)
    assert rel.certified_eps <= 1.0
    assert rel.extra["a"] >= 0


def test_smooth_sc_example():
    el, ball = _quad(p=2, n=500)
    beta, T = dif.calibrate_smooth_sc(1.0, 1e-6, el.lipschitz_L, 500, 1.0, 2, 1.0)
    assert T > 0
    rel = dif.smooth_sc_last_iterate(el, ball, 1.0, 1.0, 1.0, 1e-6, 1.0, seed=3)
    assert rel.certified_eps <= 1.0
    assert rel.horizon_T == pytest.approx(T)


def test_smooth_sc_from_minimizer_noise_scale():
    el, ball = _quad(p=2, n=500)
    star = el.exact_minimizer(ball)
    T = 1e-4
    cfg = dif.DiffusionConfig(ConstantSchedule(1.0), T, 50, seed=0, theta0=star)
    final = dif.simulate_chains(el, ball, cfg, 2000).final
    r = np.linalg.norm(final - star, axis=1)
    scale = math.sqrt(2 * T * 2)
    assert 0.8 * scale < math.sqrt(np.mean(r**2)) < 1.2 * scale


def test_smooth_sc_requires_smoothness():
    el, ball = _quad()
    with pytest.raises(ValidationError):
        dif.smooth_sc_last_iterate(el, ball, 1.0, None, 1.0, 1e-6, 1.0, seed=0)


# ---------------------------------------------------------------- Gibbs


def _quad_1d(beta_target=0.3):
    box = Box.cube(1, 1.0)
    el = EmpiricalLoss(make_quadratic_loss(1, box, 0.5), Dataset(np.array([[beta_target]])))
    return el, box


def test_gibbs_langevin_zero_beta_short_time_mean():
    el, _ = _quad_1d()
    box2 = Box.cube(2, 1.0)
    el2 = EmpiricalLoss(make_quadratic_loss(2, box2, 0.5), Dataset(np.zeros((1, 2))))
    th0 = np.array([0.2, -0.1])
    out = dif.gibbs_sample_langevin(el2, box2, 0.0, 0.01, 100, 4000, seed=1, theta0=th0)
    assert np.all(np.abs(out.mean(axis=0) - th0) < 3 * math.sqrt(0.02 / 4000))


def test_gibbs_langevin_ks_quadratic():
    el, box = _quad_1d()
    grid = dif.GibbsGrid(el, box, 4.0, 2048)
    x = dif.gibbs_sample_langevin(el, box, 4.0, 5.0, None, 10_000, seed=7)[:, 0]
    assert stats.kstest(x, grid.cdf).statistic < 0.05


def test_gibbs_langevin_ks_abs():
    box = Box.cube(1, 1.0)
    el = EmpiricalLoss(make_abs_linear_loss(1), Dataset(np.array([[1.0]])))
    grid = dif.GibbsGrid(el, box, 8.0, 2048)
    x = dif.gibbs_sample_langevin(el, box, 8.0, 5.0, None, 10_000, seed=9)[:, 0]
    assert stats.kstest(x, grid.cdf).statistic < 0.05


def test_oracle_uniform_at_zero_beta():
    box = Box.cube(2, 1.0)
    el = EmpiricalLoss(make_quadratic_loss(2, box, 0.5), Dataset(np.zeros((1, 2))))
    s = dif.gibbs_oracle_sample(el, box, 0.0, 256, 20_000, seed=2)
    sd = math.sqrt(1 / 3 / 20_000)
    assert np.all(np.abs(s.mean(axis=0)) < 3 * sd)
    ball = L2Ball(np.zeros(2), 1.0)
    s = dif.gibbs_oracle_sample(EmpiricalLoss(make_quadratic_loss(2, ball, 0.5), Dataset(np.zeros((1, 2)))),
                                ball, 0.0, 256, 20_000, seed=3)
    assert np.all(ball.contains(s, tol=0.0))
    assert np.all(np.abs(s.mean(axis=0)) < 3 * math.sqrt(0.25 / 20_000))


def test_oracle_concentrates():
    el, box = _quad_1d(0.3)
    beta = 1e4
    s = dif.gibbs_oracle_sample(el, box, beta, 4096, 5000, seed=4)[:, 0]
    assert np.mean(np.abs(s - 0.3) <= 3 / math.sqrt(beta)) >= 0.95


def test_oracle_grid_refinement():
    box = Box.cube(2, 1.0)
    el = EmpiricalLoss(make_quadratic_loss(2, box, 0.5), Dataset(np.array([[0.4, -0.2], [0.1, 0.3]])))
    m1 = dif.GibbsGrid(el, box, 6.0, 256).mean()
    m2 = dif.GibbsGrid(el, box, 6.0, 512).mean()
    assert np.max(np.abs(m1 - m2)) < 1e-3


def test_oracle_rejects_high_dim_and_coarse_grid():
    ball = L2Ball(np.zeros(3), 1.0)
    el = EmpiricalLoss(make_quadratic_loss(3, ball, 0.5), Dataset(np.zeros((1, 3))))
    with pytest.raises(ValidationError):
        dif.gibbs_oracle_sample(el, ball, 1.0, 256, 10, seed=0)
    el1, box = _quad_1d()
    with pytest.raises(ValidationError):
        dif.GibbsGrid(el1, box, 1.0, 100)
