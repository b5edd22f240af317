"""
Residual generation, sliding-window RMS evaluation and the persistence
detection/isolation logic wrapped around the moving horizon estimator.

Per sample ``k`` the closed loop does

1. predict ``yhat_{k|k-1}`` from the estimate at ``k-1`` (u = 0),
2. form per-channel residuals against the raw triplex measurements,
3. update the RMS windows and the exceedance counters,
4. latch newly isolated sensors out of the healthy sets,
5. re-estimate with the remaining healthy channels.
"""

import copy
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .airmodel import FlightParams
from .errors import AllSensorsFaulty, EmptyBank
from .mhe import Bounds, MovingHorizonEstimator, SolverOptions, Weights
from .simulator import SENSORS

AOA = (0, 1, 2)
VCAS = (3, 4, 5)


def residuals(row, prediction):
    """Per-channel residuals ``[r_a1, r_a2, r_a3, r_vc1, r_vc2, r_vc3]``.

    ``row`` is the raw measurement row ``[a1, a2, a3, V_z, Vc1, Vc2, Vc3]``
    and ``prediction`` is ``[alpha_hat, V_z_hat, V_c_hat]``.
    """
    row = np.asarray(row, dtype=float)
    return np.concatenate([row[0:3] - prediction[0], row[4:7] - prediction[2]])


class EvaluationState:
    """Sliding RMS windows and exceedance history for the six channels."""

    def __init__(self, n_eval=10, window=10, required=3):
        if not 1 <= required <= window:
            raise ValueError("need 1 <= required <= window")
        self.n_eval = n_eval
        self.window = window
        self.required = required
        self.buf = [deque(maxlen=n_eval) for _ in range(6)]
        self.hits = [deque(maxlen=window) for _ in range(6)]

    def push(self, r):
        for b, v in zip(self.buf, np.asarray(r, dtype=float)):
            b.append(v)
        return self.rms()

    def rms(self):
        return np.array([np.sqrt(np.mean(np.square(b))) if b else 0.0 for b in self.buf])

    def record_hits(self, hit):
        for h, v in zip(self.hits, hit):
            h.append(bool(v))
        return np.array([sum(h) for h in self.hits])

    def reset(self, channels):
        for i in channels:
            self.buf[i].clear()
            self.hits[i].clear()


def evaluate_rms(state: EvaluationState, record):
    """Push one residual record and return the current RMS values."""
    return state.push(record)


@dataclass(frozen=True)
class Thresholds:
    J_alpha: float
    J_vc: float

    def __post_init__(self):
        if not (self.J_alpha > 0 and self.J_vc > 0):
            raise ValueError("thresholds must be positive")

    def per_channel(self):
        return np.array([self.J_alpha] * 3 + [self.J_vc] * 3)

    @classmethod
    def disabled(cls):
        return cls(np.inf, np.inf)


@dataclass
class HealthReport:
    faulty_since: dict = field(default_factory=dict)

    def healthy(self, group):
        return tuple(i + 1 - group[0] for i in group if SENSORS[i] not in self.faulty_since)

    @property
    def H_alpha(self):
        return self.healthy(AOA)

    @property
    def H_vc(self):
        return self.healthy(VCAS)

    def flags(self):
        return np.array([s in self.faulty_since for s in SENSORS])


def detect(state: EvaluationState, J, thresholds: Thresholds, health: HealthReport, k, active=True):
    """Record exceedances at sample ``k`` and latch newly faulty sensors.

    Returns the list of sensors isolated at this sample.  Raises
    :class:`AllSensorsFaulty` if a whole sensor type has been excluded.
    """
    hit = (np.asarray(J) > thresholds.per_channel()) if active else np.zeros(6, dtype=bool)
    count = state.record_hits(hit)
    new = []
    for i, name in enumerate(SENSORS):
        if name not in health.faulty_since and count[i] >= state.required:
            health.faulty_since[name] = k
            new.append(name)
    # surviving channels of an affected type were evaluated against
    # predictions that still fused the isolated channel
    for group in (AOA, VCAS):
        if any(SENSORS.index(n) in group for n in new):
            state.reset([i for i in group if SENSORS[i] not in health.faulty_since])
    if new and (not health.H_alpha or not health.H_vc):
        raise AllSensorsFaulty("every channel of a sensor type is isolated")
    return new


@dataclass
class LoopConfig:
    weights: Weights = field(default_factory=Weights)
    bounds: Bounds = field(default_factory=Bounds)
    horizon: int = 5
    options: SolverOptions = field(default_factory=SolverOptions)
    n_eval: int = 10
    persistence: tuple = (3, 10)
    n_suppress: int = 10
    thresholds: Thresholds = field(default_factory=Thresholds.disabled)


@dataclass
class LoopTrace:
    """Per-sample arrays from a closed-loop run (index = sample)."""

    t: np.ndarray
    prediction: np.ndarray
    residual: np.ndarray
    J: np.ndarray
    healthy: np.ndarray
    estimate: np.ndarray
    n_active: np.ndarray
    iterations: np.ndarray
    solve_time: np.ndarray
    stationarity: np.ndarray
    isolation: dict
    terminated: Optional[str] = None

    def __len__(self):
        return len(self.t)


class ClosedLoop:
    """Stateful residual generator; :meth:`copy` snapshots the full state."""

    def __init__(self, config: LoopConfig, t_s=0.04):
        self.cfg = config
        self.t_s = t_s
        self.estimator = MovingHorizonEstimator(config.weights, config.bounds, t_s,
                                                config.horizon, config.options)
        required, window = config.persistence
        self.evals = EvaluationState(config.n_eval, window, required)
        self.health = HealthReport()
        self.k = -1
        self.log = {key: [] for key in ("t", "prediction", "residual", "J", "healthy", "estimate",
                                        "n_active", "iterations", "solve_time", "stationarity")}
        self.terminated = None

    def copy(self):
        return copy.deepcopy(self)

    def step(self, t, row, params: FlightParams):
        """Process one sample; returns the sensors isolated at this sample."""
        if self.terminated:
            return []
        self.k += 1
        k = self.k
        new = []
        if self.estimator.solution is not None:
            pred = self.estimator.predict(params)
            r = residuals(row, pred)
            J = self.evals.push(r)
            try:
                new = detect(self.evals, J, self.cfg.thresholds, self.health, k,
                             active=k >= self.cfg.n_suppress)
            except AllSensorsFaulty as exc:
                self.terminated = str(exc)
        else:
            pred = np.full(3, np.nan)
            r = np.full(6, np.nan)
            J = np.full(6, np.nan)
        healthy = ~self.health.flags()
        if self.terminated:
            sol = None
        else:
            start = time.perf_counter()
            sol = self.estimator.update(row, params, self.health.H_alpha, self.health.H_vc)
            elapsed = time.perf_counter() - start
        lg = self.log
        lg["t"].append(t)
        lg["prediction"].append(pred)
        lg["residual"].append(r)
        lg["J"].append(J)
        lg["healthy"].append(healthy)
        lg["estimate"].append(sol.x_last if sol is not None else np.full(3, np.nan))
        lg["n_active"].append(len(sol.active) if sol is not None else 0)
        lg["iterations"].append(sol.iterations if sol is not None else 0)
        lg["solve_time"].append(elapsed if sol is not None else np.nan)
        lg["stationarity"].append(sol.kkt["stationarity"] if sol is not None else np.nan)
        return new

    def trace(self) -> LoopTrace:
        lg = self.log
        return LoopTrace(t=np.array(lg["t"]), prediction=np.array(lg["prediction"]).reshape(-1, 3),
                         residual=np.array(lg["residual"]).reshape(-1, 6), J=np.array(lg["J"]).reshape(-1, 6),
                         healthy=np.array(lg["healthy"]).reshape(-1, 6),
                         estimate=np.array(lg["estimate"]).reshape(-1, 3),
                         n_active=np.array(lg["n_active"]), iterations=np.array(lg["iterations"]),
                         solve_time=np.array(lg["solve_time"]), stationarity=np.array(lg["stationarity"]),
                         isolation=dict(self.health.faulty_since), terminated=self.terminated)


def run_closed_loop(scenario, config: LoopConfig, rows=None, stop=None) -> LoopTrace:
    """Run the residual generator over a simulated scenario.

    ``rows`` overrides the scenario's measurement rows (same shape), which
    lets callers inject faults into a shared fault-free bundle.
    """
    rows = scenario.measurements.rows() if rows is None else rows
    n = len(scenario) if stop is None else min(stop, len(scenario))
    loop = ClosedLoop(config, scenario.t_s)
    for k in range(n):
        loop.step(scenario.t[k], rows[k], scenario.params.at(k))
        if loop.terminated:
            break
    return loop.trace()


def isolation_times(trace: LoopTrace, faults: Sequence, t_s):
    """Seconds from fault injection to latch, per faulty sensor (None if missed)."""
    out = {}
    for f in faults:
        k = trace.isolation.get(f.sensor)
        out[f.sensor] = None if k is None else float(trace.t[k] - f.start)
    return out


def false_alarms(trace: LoopTrace, faults: Sequence):
    """Healthy sensors that were isolated, or faulty ones isolated before onset."""
    onset = {f.sensor: f.start for f in faults}
    out = []
    for s, k in trace.isolation.items():
        if s not in onset or trace.t[k] < onset[s]:
            out.append(s)
    return sorted(out)


def max_rms(trace: LoopTrace, n_suppress=10):
    """Largest evaluated RMS per sensor type over the detection-active samples."""
    J = trace.J[n_suppress:]
    if len(J) == 0 or np.all(np.isnan(J)):
        raise EmptyBank("run too short for calibration")
    return float(np.nanmax(J[:, :3])), float(np.nanmax(J[:, 3:]))


def calibrate_thresholds(bank, config: LoopConfig, safety=1.0, floor=1e-12) -> Thresholds:
    """Smallest per-type thresholds giving zero false alarms on ``bank``.

    ``bank`` is a sequence of fault-free scenarios; detection is disabled
    while the maxima are collected.  With the strict ``J > J_th`` test the
    maximum itself raises no alarm.
    """
    bank = list(bank)
    if not bank:
        raise EmptyBank("calibration bank is empty")
    cfg = copy.copy(config)
    cfg.thresholds = Thresholds.disabled()
    ja = jv = 0.0
    for sc in bank:
        tr = run_closed_loop(sc, cfg)
        a, v = max_rms(tr, config.n_suppress)
        ja, jv = max(ja, a), max(jv, v)
    return Thresholds(max(safety * ja, floor), max(safety * jv, floor))
