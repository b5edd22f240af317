"""
Desk-scale truth simulator for longitudinal flight in wind.

Produces the measured parameter trace, the true AOA/wind trajectory
(RK4 on the exact AOA dynamics) and triplex AOA / single V_z / triplex
VCAS measurements with additive faults and Gaussian noise.
"""

from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence

import numpy as np

from . import airmodel as am
from .airmodel import DEG, FT, KT, FlightParams
from .errors import ConfigError, FaultSpecError

SENSORS = ("aoa1", "aoa2", "aoa3", "vcas1", "vcas2", "vcas3")


# ----------------------------------------------------------------------
# Parameter trace


@dataclass
class ParamTrace:
    """Sampled exogenous parameters; every field has shape (n,)."""

    V_g: np.ndarray
    theta: np.ndarray
    q: np.ndarray
    n_x: np.ndarray
    n_z: np.ndarray
    z: np.ndarray

    def __len__(self):
        return len(self.V_g)

    def at(self, k) -> FlightParams:
        return FlightParams(self.V_g[k], self.theta[k], self.q[k],
                            self.n_x[k], self.n_z[k], self.z[k])

    def window(self, start, stop) -> FlightParams:
        return FlightParams(self.V_g[start:stop], self.theta[start:stop],
                            self.q[start:stop], self.n_x[start:stop],
                            self.n_z[start:stop], self.z[start:stop])

    def as_array(self):
        return np.column_stack([self.V_g, self.theta, self.q, self.n_x, self.n_z, self.z])

    def interpolate(self, t_grid, t):
        cols = [np.interp(t, t_grid, c) for c in self.as_array().T]
        return FlightParams(*cols)


@dataclass
class FlightProfile:
    """Level-flight template: sinusoidal ground speed and pitch at fixed
    altitude, AOA trimmed at the pitch angle in still air."""

    V_g_mean: float = 120.0
    V_g_amp: float = 10.0
    V_g_period: float = 60.0
    theta_mean: float = 0.05
    theta_amp: float = 0.01
    theta_period: float = 20.0
    altitude: float = 5000 * FT

    def validate(self):
        if self.V_g_mean - abs(self.V_g_amp) <= am.EPS_SPEED:
            raise ConfigError("ground speed profile reaches zero")
        if self.V_g_period <= 0 or self.theta_period <= 0:
            raise ConfigError("periods must be positive")
        if not 0 <= self.altitude <= am.TROPOPAUSE:
            raise ConfigError("altitude outside troposphere")

    def at(self, t) -> FlightParams:
        t = np.asarray(t, dtype=float)
        wv = 2 * np.pi / self.V_g_period
        wt = 2 * np.pi / self.theta_period
        V_g = self.V_g_mean + self.V_g_amp * np.sin(wv * t)
        V_dot = self.V_g_amp * wv * np.cos(wv * t)
        theta = self.theta_mean + self.theta_amp * np.sin(wt * t)
        q = self.theta_amp * wt * np.cos(wt * t)
        g = am.ISA.g
        n_x = V_dot + g * np.sin(theta)
        # still-air trim at alpha = theta: f_alpha(theta) = 0
        n_z = (n_x * np.sin(theta) - g) / np.cos(theta)
        z = np.full_like(t, self.altitude)
        return FlightParams(V_g, theta, q, n_x, n_z, z)


def generate_param_trace(profile: FlightProfile, t) -> ParamTrace:
    profile.validate()
    p = profile.at(np.asarray(t, dtype=float))
    return ParamTrace(*(np.asarray(v, dtype=float) for v in p))


# ----------------------------------------------------------------------
# Wind


@dataclass
class Ramp:
    start: float
    target: float
    accel: float


@dataclass
class AxisProfile:
    """Piecewise wind speed on one axis: constant initial value, then a
    sequence of constant-acceleration ramps each holding its target."""

    initial: float = 0.0
    ramps: List[Ramp] = field(default_factory=list)

    def evaluate(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        w = np.full_like(t, self.initial)
        wd = np.zeros_like(t)
        value = self.initial
        ramps = sorted(self.ramps, key=lambda r: r.start)
        for i, r in enumerate(ramps):
            if r.accel <= 0 or not np.isfinite(r.accel):
                raise ConfigError("ramp acceleration must be positive and finite")
            end_t = ramps[i + 1].start if i + 1 < len(ramps) else np.inf
            sign = np.sign(r.target - value)
            dur = abs(r.target - value) / r.accel
            tau = t - r.start
            seg = (tau >= 0) & (t < end_t)
            moving = seg & (tau < dur)
            w[seg] = np.where(tau[seg] < dur, value + sign * r.accel * tau[seg], r.target)
            wd[moving] = sign * r.accel
            # value at the start of the next ramp
            tn = min(end_t, r.start + dur) - r.start
            value = value + sign * r.accel * tn if np.isfinite(end_t) and end_t < r.start + dur else r.target
        return w, wd


@dataclass
class Turbulence:
    enabled: bool = False
    rms: float = 0.0
    bandwidth: float = 0.5
    seed: int = 0


@dataclass
class WindProfile:
    x: AxisProfile = field(default_factory=AxisProfile)
    z: AxisProfile = field(default_factory=AxisProfile)
    turbulence: Turbulence = field(default_factory=Turbulence)


def turbulence(seed, rms, bandwidth, t_s, n):
    """First-order low-pass filtered white noise with stationary std ``rms``.

    Returns an array of shape (n,); reproducible for a given seed.
    """
    if rms < 0:
        raise ConfigError("turbulence rms must be non-negative")
    if rms == 0 or n == 0:
        return np.zeros(n)
    rng = np.random.default_rng(seed)
    a = np.exp(-2 * np.pi * bandwidth * t_s)
    xi = rng.standard_normal(n)
    out = np.empty(n)
    out[0] = rms * xi[0]
    drive = rms * np.sqrt(1 - a * a)
    for k in range(1, n):
        out[k] = a * out[k - 1] + drive * xi[k]
    return out


class _WindField:
    """Continuous-time wind: analytic profile plus linearly interpolated
    turbulence (whose derivative is piecewise constant)."""

    def __init__(self, wind: WindProfile, t_grid):
        self.wind = wind
        self.t_grid = np.asarray(t_grid, dtype=float)
        n = len(self.t_grid)
        t_s = self.t_grid[1] - self.t_grid[0] if n > 1 else 1.0
        tb = wind.turbulence
        if tb.enabled:
            self.turb = np.column_stack([
                turbulence(tb.seed, tb.rms, tb.bandwidth, t_s, n),
                turbulence(tb.seed + 7919, tb.rms, tb.bandwidth, t_s, n),
            ])
        else:
            self.turb = np.zeros((n, 2))
        self.t_s = t_s

    def __call__(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        wx, wxd = self.wind.x.evaluate(t)
        wz, wzd = self.wind.z.evaluate(t)
        if len(self.t_grid) > 1:
            tx = np.interp(t, self.t_grid, self.turb[:, 0])
            tz = np.interp(t, self.t_grid, self.turb[:, 1])
            idx = np.clip(np.searchsorted(self.t_grid, t, side="right") - 1, 0, len(self.t_grid) - 2)
            dtx = (self.turb[idx + 1, 0] - self.turb[idx, 0]) / self.t_s
            dtz = (self.turb[idx + 1, 1] - self.turb[idx, 1]) / self.t_s
        else:
            tx = tz = dtx = dtz = np.zeros_like(t)
        return (wx + tx, wz + tz), (wxd + dtx, wzd + dtz)


# ----------------------------------------------------------------------
# Faults and sensors


@dataclass(frozen=True)
class FaultSpec:
    """Additive sensor fault in SI units.

    ``value`` is the bias amplitude (rad or m/s) for ``kind='bias'`` and the
    drift rate (rad/s or m/s^2) for ``kind='runaway'``.
    """

    sensor: str
    kind: str
    value: float
    start: float

    def __post_init__(self):
        if self.sensor not in SENSORS:
            raise FaultSpecError(f"unknown sensor {self.sensor!r}")
        if self.kind not in ("bias", "runaway"):
            raise FaultSpecError(f"unknown fault kind {self.kind!r}")
        if not np.isfinite(self.value):
            raise FaultSpecError("fault amplitude must be finite")

    @property
    def column(self):
        return SENSORS.index(self.sensor)

    def signal(self, t):
        t = np.asarray(t, dtype=float)
        on = t >= self.start
        if self.kind == "bias":
            return np.where(on, self.value, 0.0)
        return np.where(on, self.value * (t - self.start), 0.0)

    @classmethod
    def from_config(cls, d):
        """Build from I/O units: degrees for AOA, knots for VCAS."""
        sensor = d["sensor"]
        scale = DEG if sensor.startswith("aoa") else KT
        if "bias" in d:
            return cls(sensor, "bias", float(d["bias"]) * scale, float(d["start"]))
        if "rate" in d:
            return cls(sensor, "runaway", float(d["rate"]) * scale, float(d["start"]))
        raise FaultSpecError("fault needs 'bias' or 'rate'")


@dataclass(frozen=True)
class SensorNoiseSpec:
    sigma_alpha: float = 0.001
    sigma_vz: float = 0.1
    sigma_vc: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if min(self.sigma_alpha, self.sigma_vz, self.sigma_vc) < 0:
            raise ConfigError("noise std must be non-negative")


@dataclass
class MeasurementBundle:
    """Triplex AOA (n,3), single V_z (n,), triplex VCAS (n,3)."""

    alpha: np.ndarray
    vz: np.ndarray
    vc: np.ndarray

    def row(self, k):
        return np.concatenate([self.alpha[k], [self.vz[k]], self.vc[k]])

    def rows(self):
        return np.column_stack([self.alpha, self.vz, self.vc])


@dataclass
class ScenarioTrace:
    t: np.ndarray
    t_s: float
    params: ParamTrace
    states: np.ndarray
    wind_accel: np.ndarray
    outputs: np.ndarray
    measurements: Optional[MeasurementBundle] = None
    fault_signal: Optional[np.ndarray] = None
    fault_flags: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.t)


def simulate_truth(params: ParamTrace, wind: WindProfile, t, alpha0=None, substeps=4):
    """Integrate the exact AOA dynamics with RK4 over the sample grid.

    The parameter trace is linearly interpolated between samples for the
    RK4 stages.  ``alpha0`` defaults to the pitch angle at ``t[0]``.
    """
    t = np.asarray(t, dtype=float)
    n = len(t)
    if len(params) != n:
        raise ConfigError("parameter trace and time grid differ in length")
    t_s = float(t[1] - t[0]) if n > 1 else 0.04
    wf = _WindField(wind, t)

    # parameters and wind on the half-step stage grid, evaluated once
    h = t_s / substeps
    m = 2 * substeps * (n - 1) + 1
    tf = t[0] + np.arange(m) * (h / 2)
    pf = params.interpolate(t, tf)
    (fwx, fwz), (fwxd, fwzd) = wf(tf)

    def rhs(j, a):
        p = FlightParams(*(c[j] for c in pf))
        return am.alpha_dot_exact(a, p, (fwx[j], fwz[j]), (fwxd[j], fwzd[j]))

    alpha = np.empty(n)
    alpha[0] = params.theta[0] if alpha0 is None else alpha0
    j = 0
    for k in range(n - 1):
        a = alpha[k]
        for _ in range(substeps):
            k1 = rhs(j, a)
            k2 = rhs(j + 1, a + h / 2 * k1)
            k3 = rhs(j + 1, a + h / 2 * k2)
            k4 = rhs(j + 2, a + h * k3)
            a = a + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            j += 2
        alpha[k + 1] = a

    (wx, wz), (wxd, wzd) = wf(t)
    states = np.column_stack([alpha, wx, wz])
    outputs = am.output_h(states, FlightParams(*(getattr(params, f) for f in FlightParams._fields)))
    return ScenarioTrace(t=t, t_s=t_s, params=params, states=states,
                         wind_accel=np.column_stack([wxd, wzd]), outputs=outputs)


def sample_sensors(trace: ScenarioTrace, noise: SensorNoiseSpec, faults: Sequence[FaultSpec] = ()):
    """Triplex measurements ``truth + fault(t) + noise``.

    Noise is drawn independently of the fault list, so removing the fault
    signal from a faulty bundle recovers the fault-free bundle.
    """
    seen = set()
    for f in faults:
        if f.sensor in seen:
            raise FaultSpecError(f"duplicate fault on {f.sensor}")
        seen.add(f.sensor)
    n = len(trace)
    rng = np.random.default_rng(noise.seed)
    n_alpha = noise.sigma_alpha * rng.standard_normal((n, 3))
    n_vz = noise.sigma_vz * rng.standard_normal(n)
    n_vc = noise.sigma_vc * rng.standard_normal((n, 3))

    fsig = np.zeros((n, 6))
    for f in faults:
        fsig[:, f.column] = f.signal(trace.t)
    flags = np.zeros((n, 6), dtype=bool)
    for f in faults:
        flags[:, f.column] = trace.t >= f.start

    y = trace.outputs
    alpha = (y[:, [0]] + n_alpha) + fsig[:, :3]
    vz = y[:, 1] + n_vz
    vc = (y[:, [2]] + n_vc) + fsig[:, 3:]
    return replace(trace, measurements=MeasurementBundle(alpha, vz, vc),
                   fault_signal=fsig, fault_flags=flags)


# ----------------------------------------------------------------------
# Scenario assembly


@dataclass
class ScenarioConfig:
    duration: float = 20.0
    t_s: float = 0.04
    flight: FlightProfile = field(default_factory=FlightProfile)
    wind: WindProfile = field(default_factory=WindProfile)
    noise: SensorNoiseSpec = field(default_factory=SensorNoiseSpec)
    faults: List[FaultSpec] = field(default_factory=list)
    theta_noise: float = 0.0
    wind_limits: Optional[tuple] = None  # (|W_x|max, |W_z|max) asserted after generation

    def time_grid(self):
        n = int(round(self.duration / self.t_s)) + 1
        return np.arange(n) * self.t_s


def build_scenario(cfg: ScenarioConfig) -> ScenarioTrace:
    if cfg.t_s <= 0 or cfg.duration <= 0:
        raise ConfigError("duration and sampling period must be positive")
    t = cfg.time_grid()
    params = generate_param_trace(cfg.flight, t)
    trace = simulate_truth(params, cfg.wind, t)
    if cfg.wind_limits is not None:
        lx, lz = cfg.wind_limits
        if np.max(np.abs(trace.states[:, 1])) > lx or np.max(np.abs(trace.states[:, 2])) > lz:
            raise ConfigError("generated wind exceeds configured limits")
    if cfg.theta_noise > 0:
        rng = np.random.default_rng(cfg.noise.seed + 104729)
        noisy = replace(params, theta=params.theta + cfg.theta_noise * rng.standard_normal(len(t)))
        trace = replace(trace, params=noisy)
    return sample_sensors(trace, cfg.noise, cfg.faults)


# ----------------------------------------------------------------------
# Config parsing (I/O units: kts, kts/s, deg, deg/s, ft)


def _axis_from_config(d):
    if d is None:
        return AxisProfile()
    ramps = [Ramp(float(r["start"]), float(r["target_kts"]) * KT, float(r["accel_kts_s"]) * KT)
             for r in d.get("ramps", [])]
    return AxisProfile(initial=float(d.get("initial_kts", 0.0)) * KT, ramps=ramps)


def scenario_from_dict(d) -> ScenarioConfig:
    try:
        fl = d.get("flight", {})
        flight = FlightProfile(
            V_g_mean=float(fl.get("V_g_mean", 120.0)),
            V_g_amp=float(fl.get("V_g_amp", 10.0)),
            V_g_period=float(fl.get("V_g_period", 60.0)),
            theta_mean=float(fl.get("theta_mean_deg", 0.05 / DEG)) * DEG,
            theta_amp=float(fl.get("theta_amp_deg", 0.01 / DEG)) * DEG,
            theta_period=float(fl.get("theta_period", 20.0)),
            altitude=float(fl.get("altitude_ft", 5000.0)) * FT,
        )
        w = d.get("wind", {})
        tb = w.get("turbulence", {})
        wind = WindProfile(
            x=_axis_from_config(w.get("x")),
            z=_axis_from_config(w.get("z")),
            turbulence=Turbulence(enabled=bool(tb.get("enabled", False)),
                                  rms=float(tb.get("rms", 0.0)),
                                  bandwidth=float(tb.get("bandwidth", 0.5)),
                                  seed=int(tb.get("seed", 0))),
        )
        nz = d.get("noise", {})
        noise = SensorNoiseSpec(sigma_alpha=float(nz.get("sigma_alpha_deg", 0.001 / DEG)) * DEG,
                                sigma_vz=float(nz.get("sigma_vz", 0.1)),
                                sigma_vc=float(nz.get("sigma_vc", 0.15)),
                                seed=int(nz.get("seed", 0)))
        faults = [FaultSpec.from_config(f) for f in d.get("faults", [])]
        return ScenarioConfig(duration=float(d.get("duration", 20.0)),
                              t_s=float(d.get("t_s", 0.04)),
                              flight=flight, wind=wind, noise=noise, faults=faults,
                              theta_noise=float(d.get("theta_noise_deg", 0.0)) * DEG)
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise ConfigError(f"bad scenario config: {exc}") from exc
