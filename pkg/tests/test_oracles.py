"""Closed-form and PDE reference controls, divergence metrics."""

import math

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.special import ive

from ccbridge import (DensityTable1D, TimeGrid, cir_bridge_control,
                      cir_ground_truth, cir_transition_density, kl_to_base,
                      kl_to_truth, load_density_table, max_energy,
                      ou_bridge_control, ou_ground_truth, ou_transition_logpdf,
                      save_density_table, simulate_controlled,
                      solve_backward_kolmogorov_1d)
from ccbridge.oracles import GroundTruthControl, _log_bessel_i, cir_log_transition_density
from ccbridge.sde import TrajectoryBatch
from helpers import ou_problem, zero_drift_problem


# ------------------------------------------------------------ linear bridge

def test_linear_bridge_control_frozen_value():
    # hand derivation: u = e^{-a*d} (x1 - x e^{-a*d}) / v with
    # v = s^2 (1 - e^{-2ad}) / (2a); a=2, s=0.1, d=0.5, x=0, x1=1
    got = ou_bridge_control(2.0, 0.1, np.array([1.0]), 0.5, np.array([0.0]))
    np.testing.assert_allclose(got, [170.1836256478643], rtol=1e-12)


def test_linear_bridge_control_zero_at_vanishing_bracket():
    alpha, t = 1.3, 0.4
    x1 = np.array([0.8])
    x = x1 * math.exp(alpha * (1.0 - t))
    np.testing.assert_allclose(ou_bridge_control(alpha, 0.5, x1, t, x), [0.0],
                               atol=1e-12)


def test_linear_bridge_control_domain():
    x1 = np.array([1.0])
    with pytest.raises(ValueError):
        ou_bridge_control(2.0, 0.1, x1, 1.0, np.array([0.0]))
    with pytest.raises(ValueError):
        ou_bridge_control(2.0, 0.1, x1, -0.1, np.array([0.0]))
    with pytest.raises(ValueError):
        ou_bridge_control(0.0, 0.1, x1, 0.5, np.array([0.0]))
    ou_bridge_control(2.0, 0.1, x1, 0.0, np.array([0.0]))  # left edge is fine


def test_linear_bridge_control_is_log_gradient_of_kernel():
    alpha, sigma = 2.0, 0.3
    x1 = np.array([1.0])
    h = 1e-5
    for t in (0.0, 0.3, 0.6, 0.9):
        for xv in np.linspace(-2.0, 2.0, 9):
            x = np.array([xv])
            fd = (ou_transition_logpdf(alpha, sigma, 1.0 - t, x + h, x1)
                  - ou_transition_logpdf(alpha, sigma, 1.0 - t, x - h, x1)) / (2 * h)
            u = ou_bridge_control(alpha, sigma, x1, t, x)
            np.testing.assert_allclose(u, fd, rtol=1e-6, atol=1e-6)


def test_linear_transition_logpdf_normalizes():
    val, _ = quad(lambda y: math.exp(
        ou_transition_logpdf(2.0, 0.5, 0.3, np.array([0.7]), np.array([y]))[0]),
        -np.inf, np.inf)
    assert abs(val - 1.0) <= 1e-8
    with pytest.raises(ValueError):
        ou_transition_logpdf(2.0, 0.5, 0.0, np.array([0.7]), np.array([0.7]))


def test_linear_ground_truth_jvp_matches_finite_differences():
    truth = ou_ground_truth(2.0, 0.4, np.array([1.0, -0.5]))
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 2))
    v = rng.standard_normal((4, 2))
    h = 1e-6
    fd = (truth.values(0.35, x + h * v) - truth.values(0.35, x - h * v)) / (2 * h)
    np.testing.assert_allclose(truth.input_jvp(0.35, x, v), fd, atol=1e-6)


def test_ground_truth_protocol():
    ctrl = GroundTruthControl(fn=lambda t, x: t + x)
    x = np.arange(6.0).reshape(3, 2)
    np.testing.assert_array_equal(ctrl.values(np.float64(0.5), x), 0.5 + x)
    ts = np.array([0.1, 0.1, 0.4])
    expect = np.stack([ctrl.values(ts[i], x[i:i + 1])[0] for i in range(3)])
    np.testing.assert_array_equal(ctrl.values_batch(ts, x), expect)
    with pytest.raises(NotImplementedError):
        ctrl.input_jvp(0.1, x, x)


# ------------------------------------------------------- square-root bridge

def test_log_bessel_against_scipy():
    for q in (1.0, 3.7):
        z = np.concatenate([np.logspace(-2, 1.4, 30), np.linspace(30.0, 300.0, 10)])
        ours = _log_bessel_i(q, z)
        ref = np.log(ive(q, z)) + z
        np.testing.assert_allclose(ours, ref, rtol=1e-10)


def test_sqrt_density_matches_explicit_index_one_formula():
    # a = b = eps = 1 puts the Bessel index at exactly 2ab/eps^2 - 1 = 1
    gap, x = 0.5, 2.0
    c = 2.0 / (1.0 - math.exp(-gap))
    u = c * x * math.exp(-gap)
    ys = np.linspace(0.05, 6.0, 40)
    v = c * ys
    explicit = c * np.exp(-u - v) * np.sqrt(v / u) * ive(1.0, 2.0 * np.sqrt(u * v)) \
        * np.exp(2.0 * np.sqrt(u * v))
    ours = cir_transition_density(1.0, 1.0, 1.0, gap, x, ys)
    np.testing.assert_allclose(ours, explicit, rtol=1e-10)


def test_sqrt_density_normalizes():
    val, _ = quad(lambda y: cir_transition_density(1.0, 1.0, 1.0, 0.5, 2.0, y),
                  1e-12, np.inf, limit=200)
    assert abs(val - 1.0) <= 1e-4


def test_sqrt_density_reproduces_known_mean():
    gap, x, a, b = 0.5, 2.0, 1.0, 1.0
    val, _ = quad(lambda y: y * cir_transition_density(a, b, 1.0, gap, x, y),
                  1e-12, np.inf, limit=200)
    np.testing.assert_allclose(val, b + (x - b) * math.exp(-a * gap), rtol=1e-6)


def test_sqrt_density_finite_near_absorbing_boundary():
    tiny = cir_transition_density(1.0, 1.0, 1.0, 0.5, 2.0, 1e-10)
    assert np.isfinite(tiny) and tiny >= 0.0
    assert tiny < cir_transition_density(1.0, 1.0, 1.0, 0.5, 2.0, 2.0)


def test_sqrt_bridge_control_is_log_gradient():
    a, b, eps, x1, T = 1.0, 1.0, 1.0, 2.0, 1.0
    h = 1e-6
    for t in (0.1, 0.5, 0.9):
        for xv in (0.5, 1.0, 2.0, 3.5):
            fd = (cir_log_transition_density(a, b, eps, T - t, xv + h, x1)
                  - cir_log_transition_density(a, b, eps, T - t, xv - h, x1)) / (2 * h)
            u = cir_bridge_control(a, b, eps, x1, t, xv)
            np.testing.assert_allclose(u, fd, rtol=1e-6, atol=1e-8)


def test_sqrt_bridge_domain_errors():
    with pytest.raises(ValueError):
        cir_bridge_control(1.0, 1.0, 1.0, 2.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        cir_bridge_control(1.0, 1.0, 1.0, 2.0, 0.5, -1.0)
    with pytest.raises(ValueError):
        cir_log_transition_density(1.0, 1.0, 1.0, -0.1, 1.0, 1.0)
    truth = cir_ground_truth(1.0, 1.0, 1.0, 2.0)
    with pytest.raises(NotImplementedError):
        truth.input_jvp(0.1, np.ones((1, 1)), np.ones((1, 1)))


# ----------------------------------------------------------- density tables

def test_table_interpolation_is_exact_for_bilinear_data():
    xs = np.linspace(-2.0, 2.0, 81)
    ts = np.linspace(0.0, 0.9, 10)
    logp = -(xs[None, :] - ts[:, None]) ** 2
    table = DensityTable1D(xs=xs, ts=ts, logp=logp, horizon=1.0)
    rng = np.random.default_rng(1)
    xq = rng.uniform(xs[1], xs[-2], size=32)
    for t in (0.0, 0.33, 0.9):
        # centered differences of a quadratic are exact; du is bilinear
        np.testing.assert_allclose(table.control(t, xq), -2.0 * (xq - t),
                                   rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(table.log_density(ts[3], xs[5]), logp[3, 5],
                               rtol=1e-14)


def test_table_clamps_out_of_range_queries():
    xs = np.linspace(0.0, 1.0, 11)
    ts = np.array([0.0, 0.5])
    logp = np.tile(xs, (2, 1))
    table = DensityTable1D(xs=xs, ts=ts, logp=logp, horizon=1.0)
    assert table.log_density(0.0, 5.0) == logp[0, -1]
    assert table.log_density(0.0, -5.0) == logp[0, 0]


def test_table_control_adapter_shapes():
    xs = np.linspace(-1.0, 1.0, 21)
    ts = np.linspace(0.0, 0.9, 4)
    table = DensityTable1D(xs=xs, ts=ts, logp=np.zeros((4, 21)), horizon=1.0)
    ctrl = table.as_control()
    out = ctrl.values(0.2, np.zeros((7, 1)))
    assert out.shape == (7, 1)
    np.testing.assert_array_equal(out, np.zeros((7, 1)))


def test_backward_solve_matches_heat_kernel():
    xT = 0.5
    p = zero_drift_problem(dim=1, sigma=1.0, x0=0.0, xT=xT)
    xs = np.linspace(xT - 8.0, xT + 8.0, 2401)
    steps = 1200
    table = solve_backward_kolmogorov_1d(p, xT, xs, steps)
    dt = 1.0 / steps
    dx = xs[1] - xs[0]
    for t in (0.1, 0.45, 0.8):
        i = int(round(t / dt))
        var = (1.0 - dt - table.ts[i]) + (2.0 * dx) ** 2  # mollified start
        closed = np.exp(-0.5 * (xs - xT) ** 2 / var) / math.sqrt(2 * math.pi * var)
        got = np.exp(table.logp[i])
        bulk = np.abs(xs - xT) <= 3.0 * math.sqrt(var)
        rel = np.abs(got[bulk] - closed[bulk]) / closed[bulk]
        assert rel.max() <= 1e-3


def test_backward_solve_control_matches_linear_closed_form():
    alpha, sigma, x1 = 1.0, 1.0, 1.0
    p = ou_problem(dim=1, alpha=alpha, sigma=sigma, xT=x1)
    xs = np.linspace(-6.0, 6.0, 1201)
    steps = 800
    table = solve_backward_kolmogorov_1d(p, x1, xs, steps)
    dt, dx = 1.0 / steps, xs[1] - xs[0]
    for t in (0.2, 0.45, 0.7):
        xq = np.linspace(x1 - 1.5, x1 + 1.5, 41)
        got = table.control(t, xq)
        ref = ou_bridge_control(alpha, sigma, np.array([x1]), t, xq[:, None])[:, 0]
        err = np.abs(got - ref) / np.maximum(np.abs(ref), 1.0)
        assert err.max() <= 2e-2  # includes the O(dt) init-placement bias
        # the bias is closed-form for a linear drift: the table solves for a
        # width-2dx Gaussian target sitting one step before the horizon
        delta = 1.0 - dt - t
        decay = math.exp(-alpha * delta)
        v = (sigma**2 * (1.0 - math.exp(-2.0 * alpha * delta)) / (2.0 * alpha)
             + (2.0 * dx) ** 2 * decay**2)
        aware = decay * (x1 - xq * decay) / v
        err = np.abs(got - aware) / np.maximum(np.abs(aware), 1.0)
        assert err.max() <= 5e-3


def test_backward_solve_self_convergence():
    # no closed form needed: successive refinements along each grid axis
    # must shrink the solution change geometrically (dt first order from
    # the init placement, dx second order)
    xT = 0.0
    p = zero_drift_problem(dim=1, sigma=1.0, xT=xT)

    def table(points, steps):
        return solve_backward_kolmogorov_1d(
            p, xT, np.linspace(-8, 8, points), steps)

    def pair_gap(a, b):
        worst = 0.0
        for t in (0.2, 0.5, 0.8):
            half = 2.0 * math.sqrt(1.0 - t)
            xq = np.linspace(xT - half, xT + half, 33)
            worst = max(worst,
                        np.abs(a.log_density(t, xq) - b.log_density(t, xq)).max())
        return worst

    t1, t2, t3 = table(1601, 200), table(1601, 400), table(1601, 800)
    e1, e2 = pair_gap(t1, t2), pair_gap(t2, t3)
    assert e2 <= 0.65 * e1 and e2 <= 1.5e-2

    s1, s2, s3 = table(801, 400), table(1601, 400), table(3201, 400)
    f1, f2 = pair_gap(s1, s2), pair_gap(s2, s3)
    assert f2 <= 0.4 * f1 and f2 <= 4e-3


def test_backward_solve_input_validation():
    p = zero_drift_problem(dim=2)
    with pytest.raises(ValueError):
        solve_backward_kolmogorov_1d(p, 0.0, np.linspace(-1, 1, 11), 10)
    p1 = zero_drift_problem(dim=1)
    with pytest.raises(ValueError):
        solve_backward_kolmogorov_1d(p1, 0.0, np.array([0.0, 0.1, 0.5]), 10)


def test_density_table_round_trip(tmp_path):
    p = zero_drift_problem(dim=1, xT=0.3)
    table = solve_backward_kolmogorov_1d(p, 0.3, np.linspace(-4, 4, 101), 50)
    path = tmp_path / "table.bin"
    save_density_table(path, table)
    loaded = load_density_table(path)
    np.testing.assert_array_equal(loaded.logp, table.logp)
    np.testing.assert_array_equal(loaded.xs, table.xs)
    np.testing.assert_array_equal(loaded.ts, table.ts)
    assert loaded.horizon == table.horizon


# ---------------------------------------------------------------- metrics

def constant_control(c):
    c = np.asarray(c, dtype=np.float64)
    return GroundTruthControl(fn=lambda t, x: np.broadcast_to(c, x.shape).copy())


def test_divergence_of_control_against_itself_is_zero():
    p = zero_drift_problem(dim=2, xT=[1.0, 0.0])
    truth = constant_control([0.2, -0.1])
    grid = TimeGrid(steps=10, horizon=1.0)
    traj = simulate_controlled(p, grid, truth, 8, seed=0)
    mean, se = kl_to_truth(truth, truth, p, traj, truncate_last=0)
    assert mean == 0.0 and se == 0.0


def test_divergence_of_constant_offset():
    c = np.array([0.3, -0.4])
    p = zero_drift_problem(dim=2, xT=[1.0, 0.0])
    truth = constant_control([0.0, 0.0])
    offset = constant_control(c)
    grid = TimeGrid(steps=10, horizon=1.0)
    traj = simulate_controlled(p, grid, truth, 4, seed=1)
    mean, se = kl_to_truth(truth, offset, p, traj, truncate_last=0)
    np.testing.assert_allclose(mean, 0.5 * np.sum(c ** 2), rtol=1e-12)
    np.testing.assert_allclose(se, 0.0, atol=1e-15)
    base_mean, _ = kl_to_base(offset, p, traj, truncate_last=0)
    np.testing.assert_allclose(base_mean, mean, rtol=1e-12)


def test_divergence_truncation_drops_terminal_steps():
    c = np.array([1.0])
    p = zero_drift_problem(dim=1)
    ctrl = constant_control(c)
    grid = TimeGrid(steps=10, horizon=1.0)
    traj = simulate_controlled(p, grid, ctrl, 3, seed=2)
    full, _ = kl_to_base(ctrl, p, traj, truncate_last=0)
    half, _ = kl_to_base(ctrl, p, traj, truncate_last=5)
    np.testing.assert_allclose(full, 0.5, rtol=1e-12)
    np.testing.assert_allclose(half, 0.25, rtol=1e-12)
    with pytest.raises(ValueError):
        kl_to_base(ctrl, p, traj, truncate_last=10)


def test_max_energy_is_per_trajectory_max_over_all_states():
    grid = TimeGrid(steps=2, horizon=1.0)
    states = np.array([[[0.0], [2.0], [1.0]],
                       [[-3.0], [0.5], [1.0]]])
    traj = TrajectoryBatch(states=states, noise=np.zeros((2, 2, 1)), grid=grid,
                           controlled=True)
    out = max_energy(traj, lambda x: np.sum(x ** 2, axis=-1))
    np.testing.assert_array_equal(out, [4.0, 9.0])
