"""
Longitudinal air-data model: angle-of-attack dynamics, wind kinematics,
vertical speed and calibrated airspeed outputs.

All quantities are SI (rad, m/s, m/s^2, m).  Functions broadcast over
numpy arrays, so a whole horizon can be evaluated in one call; the
parameter vector is a :class:`FlightParams` whose fields may be arrays.

State ``x = [alpha, W_x, W_z]``, input ``u = [u_alpha, u_dx, u_dz]`` and
output ``y = [alpha, V_z, V_c]``.
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import AltitudeOutOfRange, ComplexAirspeed, DegenerateSpeed

KT = 1852.0 / 3600.0  # m/s per knot
DEG = np.pi / 180.0
FT = 0.3048

EPS_SPEED = 1.0
TROPOPAUSE = 11000.0

STATE_NAMES = ("alpha", "W_x", "W_z")
INPUT_NAMES = ("u_alpha", "u_dx", "u_dz")
OUTPUT_NAMES = ("alpha", "V_z", "V_c")


@dataclass(frozen=True)
class IsaConstants:
    T0: float = 288.15
    L: float = -6.5e-3
    R: float = 287.05287
    gamma: float = 1.4
    g: float = 9.80665


ISA = IsaConstants()


class FlightParams(NamedTuple):
    """Measured exogenous parameters: ground speed, pitch, pitch rate,
    load factors (already in m/s^2) and pressure altitude."""

    V_g: float
    theta: float
    q: float
    n_x: float
    n_z: float
    z: float

    @classmethod
    def from_array(cls, arr):
        arr = np.asarray(arr, dtype=float)
        return cls(*(arr[..., i] for i in range(6)))

    def as_array(self):
        return np.stack(np.broadcast_arrays(*self), axis=-1).astype(float)

    def index(self, k):
        return FlightParams(*(np.asarray(v)[k] for v in self))


def _check_speed(v, eps_speed, what):
    if np.any(np.asarray(v) <= eps_speed):
        raise DegenerateSpeed(f"{what} <= {eps_speed} m/s")


def f_alpha(alpha, p, g=ISA.g):
    """Specific-force term ``n_z cos a - n_x sin a + g cos(a - theta)``."""
    return p.n_z * np.cos(alpha) - p.n_x * np.sin(alpha) + g * np.cos(alpha - p.theta)


def alpha_dot_model(alpha, p, u_alpha=0.0, eps_speed=EPS_SPEED):
    """Simplified AOA dynamics used by the estimator (ground speed in
    place of true airspeed, wind accelerations neglected)."""
    _check_speed(p.V_g, eps_speed, "ground speed")
    return f_alpha(alpha, p) / p.V_g + p.q + u_alpha


def alpha_dot_exact(alpha, p, wind, wind_accel, eps_speed=EPS_SPEED):
    """Exact AOA dynamics with true airspeed and wind-acceleration forcing.

    Parameters
    ----------
    alpha : float or ndarray
    p : FlightParams
    wind : (W_x, W_z)
    wind_accel : (dW_x/dt, dW_z/dt)
    """
    V_t = h_vt(alpha, wind, p)
    _check_speed(V_t, eps_speed, "true airspeed")
    dWx, dWz = wind_accel
    phi = alpha - p.theta
    f_w = dWx * np.sin(phi) - dWz * np.cos(phi)
    return f_alpha(alpha, p) / V_t + p.q + f_w / V_t


def h_vt(alpha, wind, p):
    """True airspeed reconstructed from ground speed and wind."""
    W_x, W_z = wind
    phi = alpha - p.theta
    c, s = np.cos(phi), np.sin(phi)
    b = W_x * s + W_z * c
    rad = p.V_g**2 - b**2
    if np.any(rad < 0):
        raise ComplexAirspeed("wind projection exceeds ground speed")
    return -W_x * c + W_z * s + np.sqrt(rad)


def h_vz(alpha, wind, p):
    return -h_vt(alpha, wind, p) * np.sin(alpha - p.theta) + wind[1]


def _isa_factors(z, isa=ISA):
    z = np.asarray(z, dtype=float)
    if np.any(z < 0.0) or np.any(z > TROPOPAUSE):
        raise AltitudeOutOfRange(f"altitude outside [0, {TROPOPAUSE}] m")
    T = isa.T0 + isa.L * z
    pbar = (1.0 + isa.L * z / isa.T0) ** (isa.g / (-isa.R * isa.L))
    return T, pbar


def _cas_terms(V_t, z, isa):
    """``(k, B, A - 1, rho^2)`` of the compressible conversion, evaluated with
    expm1/log1p so that small speeds keep full relative precision."""
    T, pbar = _isa_factors(z, isa)
    k = 5.0 * isa.gamma * isa.R * T
    x = V_t**2 / k
    b35m1 = np.expm1(3.5 * np.log1p(x))  # B**3.5 - 1
    am1 = b35m1 * pbar  # A - 1
    rho2 = np.expm1(np.log1p(am1) / 3.5)  # A**(1/3.5) - 1
    return k, 1.0 + x, am1, pbar, rho2


def cas_from_tas(V_t, z, isa=ISA):
    """Calibrated airspeed from true airspeed at pressure altitude ``z``."""
    V_t = np.asarray(V_t, dtype=float)
    if np.any(V_t < 0):
        raise ComplexAirspeed("negative true airspeed")
    _, _, _, _, rho2 = _cas_terms(V_t, z, isa)
    return np.sqrt(5.0 * isa.gamma * isa.R * isa.T0) * np.sqrt(np.maximum(rho2, 0.0))


def dcas_dtas(V_t, z, isa=ISA):
    V_t = np.asarray(V_t, dtype=float)
    k, B, am1, pbar, rho2 = _cas_terms(V_t, z, isa)
    rho = np.sqrt(np.maximum(rho2, 0.0))
    small = rho < 1e-12
    safe_rho = np.where(small, 1.0, rho)
    d = (1.0 + am1) ** (1.0 / 3.5 - 1.0) * pbar * B**2.5 * V_t / k / safe_rho
    limit = np.sqrt(pbar / k)
    return np.sqrt(5.0 * isa.gamma * isa.R * isa.T0) * np.where(small, limit, d)


def h_vc(alpha, wind, p):
    return cas_from_tas(h_vt(alpha, wind, p), p.z)


def output_h(x, p):
    """Stack ``[alpha, V_z, V_c]`` for state(s) ``x`` of shape (..., 3)."""
    x = np.asarray(x, dtype=float)
    alpha = x[..., 0]
    wind = (x[..., 1], x[..., 2])
    V_t = h_vt(alpha, wind, p)
    V_z = -V_t * np.sin(alpha - p.theta) + wind[1]
    V_c = cas_from_tas(V_t, p.z)
    return np.stack(np.broadcast_arrays(alpha, V_z, V_c), axis=-1)


def step_F(x, u, p, t_s, eps_speed=EPS_SPEED):
    """Explicit Euler step of the augmented model (AOA + integrating wind)."""
    if t_s <= 0:
        raise ValueError("sampling period must be positive")
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    a_dot = alpha_dot_model(x[..., 0], p, u[..., 0], eps_speed)
    out = x + t_s * u
    out[..., 0] = x[..., 0] + t_s * a_dot
    return out


def jacobians(x, u, p, t_s, eps_speed=EPS_SPEED):
    """Closed-form partial derivatives ``(dF/dx, dF/du, dh/dx)``.

    Leading dimensions of ``x`` broadcast; each result has shape
    ``(..., 3, 3)``.
    """
    x = np.asarray(x, dtype=float)
    alpha, W_x, W_z = x[..., 0], x[..., 1], x[..., 2]
    _check_speed(p.V_g, eps_speed, "ground speed")
    batch = np.broadcast_shapes(alpha.shape, np.shape(p.V_g))

    g = ISA.g
    dfa = (-p.n_z * np.sin(alpha) - p.n_x * np.cos(alpha) - g * np.sin(alpha - p.theta)) / p.V_g
    Fx = np.zeros(batch + (3, 3))
    Fx[..., 0, 0] = 1.0 + t_s * dfa
    Fx[..., 1, 1] = 1.0
    Fx[..., 2, 2] = 1.0
    Fu = np.zeros(batch + (3, 3))
    Fu[..., 0, 0] = Fu[..., 1, 1] = Fu[..., 2, 2] = t_s

    phi = alpha - p.theta
    c, s = np.cos(phi), np.sin(phi)
    b = W_x * s + W_z * c
    rad = p.V_g**2 - b**2
    if np.any(rad <= 0):
        raise ComplexAirspeed("wind projection exceeds ground speed")
    root = np.sqrt(rad)
    V_t = -W_x * c + W_z * s + root
    db_da = W_x * c - W_z * s
    dvt_da = b - b * db_da / root
    dvt_dwx = -c - b * s / root
    dvt_dwz = s - b * c / root

    dvc = dcas_dtas(V_t, p.z)
    Hx = np.zeros(batch + (3, 3))
    Hx[..., 0, 0] = 1.0
    Hx[..., 1, 0] = -dvt_da * s - V_t * c
    Hx[..., 1, 1] = -dvt_dwx * s
    Hx[..., 1, 2] = -dvt_dwz * s + 1.0
    Hx[..., 2, 0] = dvc * dvt_da
    Hx[..., 2, 1] = dvc * dvt_dwx
    Hx[..., 2, 2] = dvc * dvt_dwz
    return Fx, Fu, Hx


def ground_speed(V_t, alpha, theta, W_x, W_z):
    """Forward kinematics: ground speed from true airspeed and wind."""
    u_g = V_t * np.cos(alpha) + W_x * np.cos(theta) + W_z * np.sin(theta)
    w_g = V_t * np.sin(alpha) + W_x * np.sin(theta) - W_z * np.cos(theta)
    return np.hypot(u_g, w_g)
