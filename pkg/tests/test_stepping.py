import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from gmsphere.fem import Operators, build_operators
from gmsphere.linalg import PositivityError
from gmsphere.mesh import build_cubed_sphere
from gmsphere.reaction import ModelParams, patankar_coefficients
from gmsphere.sim import flat_equilibrium, make_initial_u
from gmsphere.stepping import (
    SchemeConfig,
    State,
    StateError,
    averaged_coefficients,
    coupling_bound,
    m_matrix_margin,
    ode_rates,
    ode_step_euler,
    patankar_theta,
    patankar_theta_ode_step,
    step,
    step_first_order,
    step_second_order,
    surface_step_high,
    surface_step_low,
    theta_stage,
)

from oracles import scalar_patankar, ssp_rk2

P = ModelParams()


@pytest.fixture(scope="module")
def ops2():
    return build_operators(build_cubed_sphere(2))


def one_node(m=1.0):
    M = sp.csr_matrix([[m]])
    return Operators(None, M, np.array([m]), sp.csr_matrix([[0.0]]))


def near_equilibrium(ops, params, amp=0.1):
    us, vs, ws = flat_equilibrium(params.with_(gamma_area=ops.area))
    x = ops.mesh.vertices
    return State(us * (1 + amp * x[:, 2]), vs * (1 + amp * x[:, 0]), ws)


# ---------------------------------------------------------------- bulk ODE


def test_euler_pure_decay():
    ops = one_node()
    w = ode_step_euler(2.0, np.zeros(1), 0.1, ops, P.with_(K=0.0, tau_b=0.1))
    assert w == 1.0


def test_euler_sourceless_contraction():
    ops = one_node()
    w = ode_step_euler(1.0, np.zeros(1), 0.3, ops, P)
    assert w == pytest.approx(P.tau_b / (P.tau_b + 0.3 * P.ode_decay), rel=1e-15) and w < 1.0


def test_euler_decay_factor_arithmetic():
    params = P.with_(gamma_area=3.0 * P.omega_volume)
    w = ode_step_euler(1.0, np.zeros(1), 1e-5, one_node(), params)
    assert w == pytest.approx(0.1 / (0.1 + 1e-5 * 1.006), rel=1e-15)
    assert w == pytest.approx(0.99989941, abs=5e-9)


def test_euler_source_scalings(ops2):
    v = np.full(ops2.M.shape[0], 0.5)
    a = ode_step_euler(0.0, v, 0.1, ops2, P.with_(gamma_area=ops2.area))
    b = ode_step_euler(0.0, v, 0.1, ops2, P.with_(gamma_area=ops2.area, ode_source_scaling="derived"))
    assert b == pytest.approx(a / P.omega_volume, rel=1e-14)


def test_theta_hand_example():
    w1, th = theta_stage(1.0, 0.0, 1.0, 2.0)
    assert th == 0.5 and w1 == 0.0


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 10), st.floats(1e-6, 1e3), st.floats(1e-6, 10))
def test_theta_sourceless_contracts(w, b, dt):
    w_new, _, _ = patankar_theta(w, 0.0, b, dt)
    assert 0.0 <= w_new <= w


def test_theta_zero_state_stays_zero():
    assert patankar_theta(0.0, 0.0, 3.0, 0.5)[0] == 0.0


@settings(max_examples=300, deadline=None)
@given(st.floats(1e-3, 10), st.floats(0, 10), st.floats(1e-3, 10), st.floats(1e-4, 0.1))
def test_theta_degenerates_to_ssp_rk2(w, a, b, dt):
    w_new, th1, th2 = patankar_theta(w, a, b, dt)
    if th1 == 0.0 and th2 == 0.0:
        ref = ssp_rk2(w, a, b, dt)
        assert abs(w_new - ref) <= 1e-14 * abs(ref)


@settings(max_examples=300, deadline=None)
@given(st.floats(0, 10), st.floats(0, 1e3), st.floats(1e-3, 1e4), st.floats(1e-6, 1.0))
def test_theta_nonnegative(w, a, b, dt):
    w_new, th1, th2 = patankar_theta(w, a, b, dt)
    assert w_new >= 0.0 and 0.0 <= th1 <= 1.0 and 0.0 <= th2 <= 1.0


def test_theta_stiff_overshoot_then_zero():
    # explicit first stage overshoots, second stage is cut to zero, so the step halves w
    a, b, dt = 2.5e6, 6e6, 5e-5
    w1, th1 = theta_stage(0.01, a, b, dt)
    assert th1 == 0.0 and w1 == pytest.approx(0.01 + dt * (a - b * 0.01), rel=1e-14)
    w2, th2 = theta_stage(w1, a, b, dt)
    assert th2 > 0.99 and w2 == 0.0
    assert patankar_theta(0.01, a, b, dt)[0] == 0.005


def test_theta_ode_step_records_weights(ops2):
    info = {}
    v = np.full(ops2.M.shape[0], 0.5)
    patankar_theta_ode_step(0.01, v, 1e-4, ops2, P.with_(gamma_area=ops2.area), info)
    assert len(info["theta"]) == 1 and len(info["theta"][0]) == 2


# ---------------------------------------------------------------- surface steps


def test_low_order_scalar_closed_form():
    ops = one_node()
    params = P.with_(gamma_area=1.0)
    u, v, w, dt = 0.3, 0.8, 0.05, 0.01
    bu, bv, cu, cv = (float(x[0]) for x in patankar_coefficients(np.array([u]), np.array([v]), params))
    # 2x2 system by Cramer's rule
    a11, a12, a21, a22 = 1 + dt * bu, -dt * cu, -dt * cv, 1 + dt * bv
    r1, r2 = u + dt * params.sigma, v + dt * params.e_coeff * w
    det = a11 * a22 - a12 * a21
    uL, vL = surface_step_low(State(np.array([u]), np.array([v]), w), w, dt, ops, params)
    assert uL[0] == pytest.approx((r1 * a22 - a12 * r2) / det, rel=1e-12)
    assert vL[0] == pytest.approx((a11 * r2 - a21 * r1) / det, rel=1e-12)


def test_low_order_decoupled_scalar_backward_euler():
    # u = 0 removes the coupling: u' = (u + dt sigma) / (1 + dt)
    ops = one_node()
    dt = 0.02
    uL, _ = surface_step_low(State(np.zeros(1), np.ones(1), 0.0), 0.0, dt, ops, P.with_(gamma_area=1.0))
    assert uL[0] == pytest.approx(dt * P.sigma / (1 + dt), rel=1e-12)


def test_lumped_heat_step_keeps_constants(ops2):
    from gmsphere.linalg import solve_spd

    ml = ops2.M_lumped
    c = np.full(len(ml), 0.7)
    x = solve_spd(sp.diags(ml) + 0.1 * ops2.L, ml * c, tol=1e-13)
    assert np.abs(x - 0.7).max() <= 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([1e-5, 1e-4, 1e-3]))
def test_low_order_nonnegative_on_admissible_states(seed, dt):
    ops = _OPS2
    rng = np.random.default_rng(seed)
    n = ops.M.shape[0]
    params = P.with_(gamma_area=ops.area)
    u = rng.random(n) * rng.choice([0.01, 0.25, 1.0])
    v = 0.1 + rng.random(n)
    while m_matrix_margin(u, v, dt, params) <= 1.0:
        u *= 0.5
    uL, vL = surface_step_low(State(u, v, 0.01), 0.01, dt, ops, params)
    assert uL.min() >= 0 and vL.min() >= 0


_OPS2 = build_operators(build_cubed_sphere(2))


def test_coupling_bound_closed_form():
    bu, bv, cu, cv = (np.array([1.0, 3.0]), np.array([2.0, 0.0]), np.array([4.0, 1.0]), np.array([0.5, 2.0]))
    dt = 0.5
    expected = max(2.0 / 1.5, 0.5 / 2.5) * max(0.25 / 2.0, 1.0 / 1.0)
    assert coupling_bound((bu, bv, cu, cv), dt) == pytest.approx(expected, rel=1e-15)


def test_averaged_coefficients_closed_form():
    params = P.with_(gamma_area=1.0)
    u0, v0, u1, v1, uP, vP = (np.array([x]) for x in (0.3, 0.8, 0.32, 0.78, 0.31, 0.79))
    bu, bv, cu, cv = averaged_coefficients(u0, v0, u1, v1, uP, vP, params)
    k0 = scalar_patankar(0.3, 0.8)
    k1 = scalar_patankar(0.32, 0.78)
    assert bu[0] == pytest.approx(0.5 * (k0[0] * 0.3 + k1[0] * 0.32) / 0.31, rel=1e-14)
    assert bv[0] == pytest.approx(0.5 * (k0[1] * 0.8 + k1[1] * 0.78) / 0.79, rel=1e-14)
    assert cu[0] == pytest.approx(0.5 * (k0[2] * 0.8 + k1[2] * 0.78) / 0.79, rel=1e-14)
    assert cv[0] == pytest.approx(0.5 * (k0[3] * 0.3 + k1[3] * 0.32) / 0.31, rel=1e-14)


def test_averaged_coefficients_fixed_point_and_fallback():
    params = P.with_(gamma_area=1.0)
    u, v = np.array([0.3, 0.2]), np.array([0.8, 0.9])
    for a, b in zip(averaged_coefficients(u, v, u, v, u, v, params), patankar_coefficients(u, v, params)):
        assert np.allclose(a, b, rtol=1e-15)
    # an inadmissible predicted state falls back to the low-order predictor
    bad = averaged_coefficients(u, v, np.array([-0.1, 0.2]), np.array([0.8, 0.0]), u, v, params)
    for a, b in zip(bad, patankar_coefficients(u, v, params)):
        assert np.allclose(a, b, rtol=1e-15)


def test_high_order_scalar_surrogate():
    ops = one_node()
    params = P.with_(gamma_area=1.0)
    u, v, w, dt = 0.3, 0.8, 0.05, 0.01
    bu, bv, cu, cv = (float(x[0]) for x in patankar_coefficients(np.array([u]), np.array([v]), params))
    uL, vL = np.array([0.31]), np.array([0.79])
    uH, vH = surface_step_high(State(np.array([u]), np.array([v]), w), uL, vL, w, dt, ops, params)
    assert uH[0] == pytest.approx(u + dt * (-bu * uL[0] + cu * vL[0] + params.sigma), rel=1e-12)
    assert vH[0] == pytest.approx(v + dt * (-bv * vL[0] + cv * uL[0] + params.e_coeff * w), rel=1e-12)


def test_high_order_dt_to_zero(ops2):
    params = P.with_(gamma_area=ops2.area)
    s = near_equilibrium(ops2, params, 0.3)
    uH, vH = surface_step_high(s, s.u, s.v, s.w, 1e-12, ops2, params)
    assert np.abs(uH - s.u).max() <= 1e-9 and np.abs(vH - s.v).max() <= 1e-9


def test_equilibrium_is_fixed_point_of_high_order(ops2):
    params = P.with_(gamma_area=ops2.area)
    us, vs, ws = flat_equilibrium(params)
    n = ops2.M.shape[0]
    s = State(np.full(n, us), np.full(n, vs), ws)
    uH, vH = surface_step_high(s, s.u, s.v, ws, 1e-3, ops2, params)
    assert np.abs(uH - us).max() <= 1e-12 and np.abs(vH - vs).max() <= 1e-12


# ---------------------------------------------------------------- full steps


def test_first_order_is_composition(ops2):
    params = P.with_(gamma_area=ops2.area)
    s = near_equilibrium(ops2, params)
    dt = 1e-3
    w = ode_step_euler(s.w, s.v, dt, ops2, params)
    u, v = surface_step_low(s, w, dt, ops2, params, tol=1e-12)
    out = step_first_order(s, dt, ops2, params)
    assert np.array_equal(out.u, u) and np.array_equal(out.v, v) and out.w == w and out.t == dt


def test_zero_activator_invariant_subspace(ops2):
    params = P.with_(gamma_area=ops2.area, sigma=0.0, K=0.0)
    n = ops2.M.shape[0]
    s = State(np.zeros(n), np.full(n, 0.5), 0.0)
    for _ in range(20):
        s = step_first_order(s, 1e-2, ops2, params)
    assert np.all(s.u == 0.0)
    assert np.allclose(s.v, 0.5 / (1 + 1e-2 / P.tau_s) ** 20, rtol=1e-10)


@pytest.mark.parametrize("order", [1, 2])
def test_smoke_run_keeps_invariants(ops2, order):
    params = P.with_(gamma_area=ops2.area)
    n = ops2.M.shape[0]
    s = State(make_initial_u("spike2_180", ops2.mesh, 0.25, 0.3), np.full(n, 0.1), 0.01)
    scheme = SchemeConfig(dt=1e-4, order=order)
    for k in range(100):
        s = step(s, scheme, ops2, params).check(k + 1)
    assert s.t == pytest.approx(0.01)


@pytest.mark.parametrize("reaction", ["frozen", "averaged"])
def test_alpha_zero_gives_low_order_composition(ops2, reaction):
    params = P.with_(gamma_area=ops2.area)
    s = near_equilibrium(ops2, params, 0.3)
    dt = 1e-3
    out = step_second_order(s, dt, ops2, params, limiter="zero", reaction=reaction)
    w_half = patankar_theta_ode_step(s.w, s.v, 0.5 * dt, ops2, params)
    mid = State(s.u, s.v, w_half)
    coeffs = None
    if reaction == "averaged":
        uP, vP = surface_step_low(mid, w_half, dt, ops2, params, tol=1e-12)
        uC, vC = surface_step_high(mid, uP, vP, w_half, dt, ops2, params, tol=1e-12)
        coeffs = averaged_coefficients(s.u, s.v, uC, vC, uP, vP, params)
    uL, vL = surface_step_low(mid, w_half, dt, ops2, params, tol=1e-12, coeffs=coeffs)
    w_new = patankar_theta_ode_step(w_half, vL, 0.5 * dt, ops2, params)
    assert np.array_equal(out.u, uL) and np.array_equal(out.v, vL) and out.w == w_new


def test_fct_step_conservative_and_bounded(ops2):
    params = P.with_(gamma_area=ops2.area)
    n = ops2.M.shape[0]
    s = State(make_initial_u("spike6", ops2.mesh, 0.25, 0.3), np.full(n, 0.1), 0.01)
    ml = ops2.M_lumped
    for _ in range(10):
        info = {}
        s = step_second_order(s, 1e-4, ops2, params, info=info)
        for name, x in (("u", s.u), ("v", s.v)):
            ws = info[f"fct_{name}"]
            assert abs(ml @ x - ml @ ws.u_L) <= 1e-12 * (ml @ ws.u_L)
            assert np.all(x >= ws.u_min - 1e-12 * ws.u_max.max()) and np.all(x <= ws.u_max * (1 + 1e-12))


@pytest.mark.parametrize("order", [1, 2])
def test_flat_equilibrium_stays_constant(ops2, order):
    params = P.with_(gamma_area=ops2.area)
    us, vs, ws = flat_equilibrium(params)
    n = ops2.M.shape[0]
    s = State(np.full(n, us), np.full(n, vs), ws)
    scheme = SchemeConfig(dt=1e-3, order=order)
    for _ in range(100):
        s = step(s, scheme, ops2, params)
    assert np.abs(s.u - us).max() <= 1e-10 and np.abs(s.v - vs).max() <= 1e-10 and abs(s.w - ws) <= 1e-10


@pytest.mark.parametrize("order", [1, 2])
@pytest.mark.parametrize("dt", [1e-5, 1e-4, 1e-3, 1e-2])
def test_positivity_over_time_steps(ops2, order, dt):
    params = P.with_(gamma_area=ops2.area)
    s = near_equilibrium(ops2, params, 0.5)
    scheme = SchemeConfig(dt=dt, order=order)
    for k in range(20):
        s = step(s, scheme, ops2, params).check(k + 1)


def test_positivity_loss_is_reported_not_hidden(ops2):
    # a large spike on a small inhibitor breaks the nodal M-matrix margin at this dt
    params = P.with_(gamma_area=ops2.area)
    n = ops2.M.shape[0]
    s = State(make_initial_u("spike2_180", ops2.mesh, 2.0, 0.3), np.full(n, 0.1), 0.01)
    assert m_matrix_margin(s.u, s.v, 1e-4, params) < 1
    with pytest.raises(PositivityError) as exc:
        step(s, SchemeConfig(dt=1e-4), ops2, params)
    assert exc.value.node >= 0


def test_deterministic(ops2):
    params = P.with_(gamma_area=ops2.area)
    runs = []
    for _ in range(2):
        s = near_equilibrium(ops2, params, 0.3)
        for _ in range(5):
            s = step(s, SchemeConfig(dt=1e-3, order=2), ops2, params)
        runs.append(s)
    assert np.array_equal(runs[0].u, runs[1].u) and runs[0].w == runs[1].w


def test_state_check():
    with pytest.raises(StateError):
        State(np.array([-1.0]), np.ones(1), 0.0).check()
    with pytest.raises(StateError):
        State(np.ones(1), np.zeros(1), 0.0).check()
    with pytest.raises(StateError):
        State(np.ones(1), np.ones(1), math.nan).check()
    with pytest.raises(StateError) as exc:
        State(np.array([1.0, np.inf]), np.ones(2), 0.0).check(7)
    assert exc.value.node == 1 and exc.value.step == 7


def test_scheme_config_validation():
    with pytest.raises(ValueError):
        SchemeConfig(dt=0.0)
    with pytest.raises(ValueError):
        SchemeConfig(dt=1e-3, order=3)
    with pytest.raises(ValueError):
        SchemeConfig(dt=1e-3, limiter="clip")


def test_ode_rates_match_definition(ops2):
    params = P.with_(gamma_area=ops2.area)
    v = np.full(ops2.M.shape[0], 2.0)
    a, b = ode_rates(v, ops2, params)
    assert a == pytest.approx(P.K * 2.0 * ops2.area / P.tau_b, rel=1e-13)
    assert b == pytest.approx((1 + P.K * ops2.area / P.omega_volume) / P.tau_b, rel=1e-14)
