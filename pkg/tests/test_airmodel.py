import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from mpmath import mp, mpf

from airmhe import airmodel as am
from airmhe.errors import AltitudeOutOfRange, ComplexAirspeed, DegenerateSpeed
from airmhe.verify import central_difference, random_point, rel_err

mp.dps = 40
G = mpf("9.80665")
T0, LAPSE, RGAS, GAMMA = mpf("288.15"), mpf("-0.0065"), mpf("287.05287"), mpf("1.4")


def P(V_g=120.0, theta=0.0, q=0.0, n_x=0.0, n_z=0.0, z=0.0):
    return am.FlightParams(V_g, theta, q, n_x, n_z, z)


# ----------------------------------------------------------------------
# high-precision scalar oracles written directly from the model equations


def mp_f_alpha(a, th, nx, nz):
    a, th, nx, nz = map(mpf, (a, th, nx, nz))
    return nz * mp.cos(a) - nx * mp.sin(a) + G * mp.cos(a - th)


def mp_vt(a, th, wx, wz, vg):
    a, th, wx, wz, vg = map(mpf, (a, th, wx, wz, vg))
    s, c = mp.sin(a - th), mp.cos(a - th)
    return -wx * c + wz * s + mp.sqrt(vg**2 - (wx * s + wz * c) ** 2)


def mp_vc(vt, z):
    vt, z = mpf(vt), mpf(z)
    T = T0 + LAPSE * z
    pbar = (1 + LAPSE * z / T0) ** (G / (-RGAS * LAPSE))
    inner = ((1 + vt**2 / (5 * GAMMA * RGAS * T)) ** mpf("3.5") - 1) * pbar + 1
    return mp.sqrt(5 * GAMMA * RGAS * T0) * mp.sqrt(inner ** (1 / mpf("3.5")) - 1)


def mp_alpha_dot_exact(a, th, q, nx, nz, vg, wx, wz, dwx, dwz):
    vt = mp_vt(a, th, wx, wz, vg)
    fw = mpf(dwx) * mp.sin(mpf(a) - mpf(th)) - mpf(dwz) * mp.cos(mpf(a) - mpf(th))
    return mp_f_alpha(a, th, nx, nz) / vt + mpf(q) + fw / vt


# ----------------------------------------------------------------------
# examples


def test_f_alpha_level_example():
    assert am.f_alpha(0.0, P(n_z=1.0)) == pytest.approx(1 + 9.80665, abs=1e-15)


def test_f_alpha_vertical_example():
    assert am.f_alpha(np.pi / 2, P(theta=np.pi / 2, n_x=2.0)) == pytest.approx(-2 + 9.80665, abs=1e-14)


def test_f_alpha_generic_against_oracle():
    val = am.f_alpha(0.05, P(theta=0.02, n_x=0.3, n_z=9.6))
    assert val == pytest.approx(float(mp_f_alpha(0.05, 0.02, 0.3, 9.6)), rel=1e-15)


def _trim_nz(alpha, theta, n_x):
    # n_z that makes f_alpha vanish
    return (n_x * np.sin(alpha) - 9.80665 * np.cos(alpha - theta)) / np.cos(alpha)


def test_alpha_dot_model_zero_and_q():
    p = P(theta=0.03, n_x=0.4, n_z=_trim_nz(0.04, 0.03, 0.4))
    assert abs(am.alpha_dot_model(0.04, p)) < 1e-15
    assert am.alpha_dot_model(0.04, p._replace(q=0.01)) == pytest.approx(0.01, abs=1e-15)


def test_alpha_dot_model_generic():
    p = P(V_g=95.0, theta=0.04, q=-0.02, n_x=0.7, n_z=-9.5)
    expect = mp_f_alpha(0.07, 0.04, 0.7, -9.5) / 95 + mpf(-0.02) + mpf(1e-3)
    assert am.alpha_dot_model(0.07, p, 1e-3) == pytest.approx(float(expect), rel=1e-14)


def test_degenerate_speed():
    with pytest.raises(DegenerateSpeed):
        am.alpha_dot_model(0.0, P(V_g=0.5))


def test_alpha_dot_exact_zero_wind_matches_model():
    p = P(V_g=110.0, theta=0.05, q=0.003, n_x=0.2, n_z=-9.7)
    for a in (-0.1, 0.0, 0.06, 0.2):
        assert am.alpha_dot_exact(a, p, (0.0, 0.0), (0.0, 0.0)) == am.alpha_dot_model(a, p, 0.0)


def test_alpha_dot_exact_wind_term_vanishes_at_alpha_eq_theta():
    p = P(V_g=110.0, theta=0.05, n_z=-9.7)
    a = am.alpha_dot_exact(0.05, p, (0.0, 0.0), (3.0, 0.0))
    b = am.alpha_dot_exact(0.05, p, (0.0, 0.0), (0.0, 0.0))
    assert a == pytest.approx(b, abs=1e-16)


def test_alpha_dot_exact_generic():
    p = P(V_g=118.0, theta=0.03, q=0.01, n_x=0.5, n_z=-9.6)
    val = am.alpha_dot_exact(0.06, p, (4.0, -1.5), (0.8, -0.3))
    expect = mp_alpha_dot_exact(0.06, 0.03, 0.01, 0.5, -9.6, 118.0, 4.0, -1.5, 0.8, -0.3)
    assert val == pytest.approx(float(expect), rel=1e-13)


def test_h_vt_examples():
    assert am.h_vt(0.07, (0.0, 0.0), P(V_g=123.0, theta=0.02)) == pytest.approx(123.0, rel=1e-15)
    assert am.h_vt(0.02, (7.0, 0.0), P(V_g=123.0, theta=0.02)) == pytest.approx(116.0, rel=1e-15)


def test_h_vt_generic():
    val = am.h_vt(0.08, (6.0, -2.0), P(V_g=101.0, theta=0.01))
    assert val == pytest.approx(float(mp_vt(0.08, 0.01, 6.0, -2.0, 101.0)), rel=1e-14)


def test_h_vt_complex_raises():
    with pytest.raises(ComplexAirspeed):
        am.h_vt(1.2, (0.0, 200.0), P(V_g=50.0, theta=0.0))


def test_h_vz_examples():
    assert am.h_vz(0.03, (5.0, 0.0), P(theta=0.03)) == pytest.approx(0.0, abs=1e-14)
    assert am.h_vz(0.03, (5.0, 3.0), P(theta=0.03)) == pytest.approx(3.0, abs=1e-14)


def test_h_vz_generic():
    a, th, wx, wz, vg = 0.09, 0.02, 3.0, 1.0, 105.0
    expect = -mp_vt(a, th, wx, wz, vg) * mp.sin(mpf(a) - mpf(th)) + wz
    assert am.h_vz(a, (wx, wz), P(V_g=vg, theta=th)) == pytest.approx(float(expect), rel=1e-13)


def test_h_vc_examples():
    assert am.cas_from_tas(0.0, 1524.0) == 0.0
    for v in (1e-3, 1.0, 57.0, 199.0):
        assert am.cas_from_tas(v, 0.0) == pytest.approx(v, rel=4 * np.finfo(float).eps)


def test_h_vc_oracle_5000ft():
    assert am.cas_from_tas(120.0, 1524.0) == pytest.approx(float(mp_vc(120.0, 1524.0)), rel=1e-13)


def test_h_vc_altitude_range():
    with pytest.raises(AltitudeOutOfRange):
        am.cas_from_tas(100.0, 12000.0)
    with pytest.raises(AltitudeOutOfRange):
        am.cas_from_tas(100.0, -1.0)


def test_sea_level_identity_grid():
    v = np.linspace(0.0, 200.0, 4001)
    assert np.max(np.abs(am.cas_from_tas(v, 0.0) - v)) <= 4 * np.finfo(float).eps * 200


def test_h_vc_strictly_increasing():
    v = np.linspace(0.0, 200.0, 4001)
    for z in (0.0, 1524.0, 6000.0, 11000.0):
        assert np.all(np.diff(am.cas_from_tas(v, z)) > 0)


def test_output_h_stacks_components():
    x = np.array([0.05, 4.0, -1.0])
    p = P(V_g=110.0, theta=0.02, z=1524.0)
    y = am.output_h(x, p)
    assert y[0] == 0.05
    assert y[1] == pytest.approx(am.h_vz(0.05, (4.0, -1.0), p))
    assert y[2] == pytest.approx(float(mp_vc(mp_vt(0.05, 0.02, 4.0, -1.0, 110.0), 1524.0)), rel=1e-13)


def test_step_F_examples():
    p = P(theta=0.03, n_x=0.4, n_z=_trim_nz(0.04, 0.03, 0.4))
    x = np.array([0.04, 2.0, -1.0])
    assert np.allclose(am.step_F(x, np.zeros(3), p, 0.04), x, atol=1e-16)
    x1 = am.step_F(x, np.array([0.0, 1.0, 0.0]), p, 0.04)
    assert x1[1] - x[1] == pytest.approx(0.04, abs=1e-15)


def test_step_F_generic():
    p = P(V_g=112.0, theta=0.02, q=0.004, n_x=0.3, n_z=-9.5)
    x = np.array([0.05, 3.0, -2.0])
    u = np.array([1e-4, 0.5, -0.2])
    out = am.step_F(x, u, p, 0.04)
    a_exp = mpf(0.05) + mpf(0.04) * (mp_f_alpha(0.05, 0.02, 0.3, -9.5) / 112 + mpf(0.004) + mpf(1e-4))
    assert out[0] == pytest.approx(float(a_exp), rel=1e-14)
    assert out[1] == pytest.approx(3.0 + 0.04 * 0.5, rel=1e-15)
    assert out[2] == pytest.approx(-2.0 - 0.04 * 0.2, rel=1e-15)


def test_jacobian_structure():
    x, u, p, _ = random_point(np.random.default_rng(0))
    Fx, Fu, Hx = am.jacobians(x, u, p, 0.04)
    assert np.allclose(Fu, 0.04 * np.eye(3))
    assert np.array_equal(Hx[0], [1.0, 0.0, 0.0])


def test_jacobians_finite_difference_1000_points():
    rng = np.random.default_rng(123)
    worst = 0.0
    for _ in range(1000):
        x, u, p, _ = random_point(rng)
        Fx, Fu, Hx = am.jacobians(x, u, p, 0.04)
        worst = max(worst,
                    rel_err(Fx, central_difference(lambda v: am.step_F(v, u, p, 0.04), x)),
                    rel_err(Fu, central_difference(lambda v: am.step_F(x, v, p, 0.04), u)),
                    rel_err(Hx, central_difference(lambda v: am.output_h(v, p), x)))
    assert worst <= 1e-5


def test_jacobians_broadcast_over_horizon():
    rng = np.random.default_rng(5)
    pts = [random_point(rng) for _ in range(4)]
    xs = np.array([p[0] for p in pts])
    us = np.array([p[1] for p in pts])
    params = am.FlightParams(*(np.array(v) for v in zip(*[p[2] for p in pts])))
    Fx, Fu, Hx = am.jacobians(xs, us, params, 0.04)
    for i, (x, u, p, _) in enumerate(pts):
        a, b, c = am.jacobians(x, u, p, 0.04)
        assert np.allclose(Fx[i], a, rtol=1e-14, atol=0)
        assert np.allclose(Hx[i], c, rtol=1e-14, atol=0)


# ----------------------------------------------------------------------
# properties


@settings(max_examples=200, deadline=None)
@given(alpha=st.floats(-0.3, 0.3), theta=st.floats(-0.2, 0.2), wx=st.floats(-40, 40), wz=st.floats(-15, 15),
       vt=st.floats(60.0, 200.0))
def test_round_trip_ground_speed(alpha, theta, wx, wz, vt):
    vg = am.ground_speed(vt, alpha, theta, wx, wz)
    back = am.h_vt(alpha, (wx, wz), P(V_g=vg, theta=theta))
    assert back == pytest.approx(vt, rel=1e-9)


@settings(max_examples=200, deadline=None)
@given(alpha=st.floats(-0.3, 0.3), theta=st.floats(-0.2, 0.2), nx=st.floats(-3, 3), nz=st.floats(-12, -7),
       vg=st.floats(60, 200), q=st.floats(-0.1, 0.1))
def test_zero_wind_consistency_property(alpha, theta, nx, nz, vg, q):
    p = P(V_g=vg, theta=theta, q=q, n_x=nx, n_z=nz)
    assert am.alpha_dot_exact(alpha, p, (0.0, 0.0), (0.0, 0.0)) == am.alpha_dot_model(alpha, p, 0.0)


@settings(max_examples=200, deadline=None)
@given(v1=st.floats(0.0, 200.0), v2=st.floats(0.0, 200.0), z=st.floats(0.0, 11000.0))
def test_cas_monotone_property(v1, v2, z):
    lo, hi = sorted((v1, v2))
    if hi - lo > 1e-9:
        assert am.cas_from_tas(lo, z) < am.cas_from_tas(hi, z)
