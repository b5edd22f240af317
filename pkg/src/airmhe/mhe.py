"""
Moving horizon estimation of AOA and wind.

The horizon problem over samples ``l..k`` (N samples) is

    min  1/2|x_l - x_l^-|^2_{P^-1} + 1/2 sum |u_i|^2_{Q^-1}
         + 1/2 sum |ybar_i - h(x_i)|^2_{R^-1}
    s.t. x_{i+1} = F(x_i, u_i),  box bounds on x_i and u_i

with decision vector ``z = [x_l, u_l, ..., x_{k-1}, u_{k-1}, x_k]``.  It is
written compactly as ``min 1/2|I - F1(z)|^2_{V^-1}  s.t. F2(z) = 0`` where
the information vector ``I = [x_l^-, 0, ybar_l, ..., 0, ybar_{k-1}, ybar_k]``.

The solver is a Gauss-Newton SQP; each QP goes through
:func:`airmhe.qp.solve_box_qp`.  With bounds switched off (UMHE) the QP is
a single equality-constrained solve.
"""

import copy
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import airmodel as am
from .airmodel import KT, FlightParams
from .errors import (ComplexAirspeed, DegenerateSpeed, DimensionMismatch,
                     MaxIterationsExceeded, NoHealthySensors)
from .qp import solve_box_qp

NX = NU = NY = 3


@dataclass(frozen=True)
class Weights:
    p_alpha: float = 1e-6
    p_d: float = 1.0
    q_alpha: float = 1e-8
    q_d: float = 1.0
    R_alpha: float = 1e-8
    R_vz: float = 2.5e-3
    R_vc: float = 2.5e-3

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if not v > 0:
                raise ValueError(f"weight {k} must be positive")

    def P(self):
        return np.array([self.p_alpha, self.p_d, self.p_d])

    def Q(self):
        return np.array([self.q_alpha, self.q_d, self.q_d])

    def R(self, n_alpha=3, n_vc=3):
        if not (1 <= n_alpha <= 3 and 1 <= n_vc <= 3):
            raise ValueError("healthy counts must be in 1..3")
        return np.array([self.R_alpha / n_alpha, self.R_vz, self.R_vc / n_vc])


@dataclass(frozen=True)
class Bounds:
    x_lb: tuple = (-np.inf, -120 * KT, -30 * KT)
    x_ub: tuple = (np.inf, 120 * KT, 30 * KT)
    u_lb: tuple = (-np.inf, -15 * KT, -15 * KT)
    u_ub: tuple = (np.inf, 15 * KT, 15 * KT)
    constrained: bool = True

    def __post_init__(self):
        if np.any(np.asarray(self.x_lb) > np.asarray(self.x_ub)) or \
                np.any(np.asarray(self.u_lb) > np.asarray(self.u_ub)):
            raise ValueError("lower bound exceeds upper bound")

    @classmethod
    def unconstrained(cls):
        return cls(constrained=False)

    @classmethod
    def wind(cls, wx_kts=120.0, wz_kts=30.0, accel_kts_s=15.0, constrained=True):
        return cls(x_lb=(-np.inf, -wx_kts * KT, -wz_kts * KT),
                   x_ub=(np.inf, wx_kts * KT, wz_kts * KT),
                   u_lb=(-np.inf, -accel_kts_s * KT, -accel_kts_s * KT),
                   u_ub=(np.inf, accel_kts_s * KT, accel_kts_s * KT),
                   constrained=constrained)

    def effective(self):
        if not self.constrained:
            inf = np.full(3, np.inf)
            return -inf, inf, -inf, inf.copy()
        return (np.asarray(self.x_lb, float), np.asarray(self.x_ub, float),
                np.asarray(self.u_lb, float), np.asarray(self.u_ub, float))


@dataclass(frozen=True)
class SolverOptions:
    max_sqp_iter: int = 3
    converge: bool = False
    max_iter_converge: int = 50
    tol_step: float = 1e-10
    tol_stat: float = 1e-6
    tol_eq: float = 1e-8
    tol_comp: float = 1e-8
    tol_act_rel: float = 1e-6
    tol_act_mult: float = 1e-8
    qp_tol: float = 1e-10
    strict: bool = False

    def converged_mode(self):
        return SolverOptions(**{**self.__dict__, "converge": True})


# ----------------------------------------------------------------------
# Measurement fusion


def fuse_measurements(row, healthy_alpha=(1, 2, 3), healthy_vc=(1, 2, 3)):
    """Average the healthy redundant channels.

    ``row`` is ``[alpha_1, alpha_2, alpha_3, V_z, V_c1, V_c2, V_c3]``; the
    healthy sets hold channel numbers 1..3.  Returns ``(ybar, n_alpha, n_vc)``.
    """
    ha = sorted(healthy_alpha)
    hv = sorted(healthy_vc)
    if not ha or not hv:
        raise NoHealthySensors("no healthy AOA" if not ha else "no healthy VCAS")
    row = np.asarray(row, dtype=float)
    a = np.mean(row[[i - 1 for i in ha]])
    v = np.mean(row[[3 + i for i in hv]])
    return np.array([a, row[3], v]), len(ha), len(hv)


# ----------------------------------------------------------------------
# Problem


@dataclass
class HorizonWindow:
    """Fused measurements ``y`` (N,3), parameters per sample, prior state."""

    y: np.ndarray
    params: FlightParams
    x_prior: np.ndarray
    t_s: float = 0.04
    n_alpha: int = 3
    n_vc: int = 3
    k_last: int = 0

    @property
    def N(self):
        return len(self.y)


def z_layout(N):
    """Index arrays ``(x_idx (N,3), u_idx (N-1,3))`` into the stacked vector."""
    x_idx = np.array([[6 * i + j for j in range(3)] for i in range(N)], dtype=int)
    u_idx = np.array([[6 * i + 3 + j for j in range(3)] for i in range(N - 1)], dtype=int).reshape(-1, 3)
    return x_idx, u_idx


class MheProblem:
    """Stacked horizon NLP with dense Jacobians."""

    def __init__(self, window: HorizonWindow, weights: Weights, bounds: Bounds):
        y = np.asarray(window.y, dtype=float)
        if y.ndim != 2 or y.shape[1] != NY or y.shape[0] < 1:
            raise DimensionMismatch("window measurements must have shape (N, 3)")
        N = y.shape[0]
        if np.shape(window.params.V_g) != (N,):
            raise DimensionMismatch("parameter window length differs from measurements")
        if np.shape(window.x_prior) != (NX,):
            raise DimensionMismatch("prior must have 3 entries")
        self.window = window
        self.weights = weights
        self.bounds = bounds
        self.N = N
        self.t_s = window.t_s
        self.n_z = NX * N + NU * (N - 1)
        self.x_idx, self.u_idx = z_layout(N)
        self.params = window.params
        self.params_head = FlightParams(*(np.asarray(v)[:-1] for v in window.params))

        R = weights.R(window.n_alpha, window.n_vc)
        blocks = [weights.P()]
        info = [np.asarray(window.x_prior, float)]
        for i in range(N - 1):
            blocks += [weights.Q(), R]
            info += [np.zeros(NU), y[i]]
        blocks.append(R)
        info.append(y[N - 1])
        self.V = np.concatenate(blocks)
        self.Vinv = 1.0 / self.V
        self.info = np.concatenate(info)
        # row positions inside F1 / I
        self.rows_u = np.array([3 + 6 * i + np.arange(3) for i in range(N - 1)], dtype=int).reshape(-1, 3)
        self.rows_y = np.array([6 + 6 * i + np.arange(3) for i in range(N - 1)] + [[6 * N - 3 + j for j in range(3)]],
                               dtype=int)

        xlb, xub, ulb, uub = bounds.effective()
        self.lb = np.empty(self.n_z)
        self.ub = np.empty(self.n_z)
        self.lb[self.x_idx] = xlb
        self.ub[self.x_idx] = xub
        if N > 1:
            self.lb[self.u_idx] = ulb
            self.ub[self.u_idx] = uub

    # -- pieces of the compact form --------------------------------------
    def split(self, z):
        z = np.asarray(z, dtype=float)
        return z[self.x_idx], z[self.u_idx]

    def stack(self, xs, us):
        z = np.empty(self.n_z)
        z[self.x_idx] = xs
        if self.N > 1:
            z[self.u_idx] = us
        return z

    def F1(self, z):
        xs, us = self.split(z)
        out = np.empty(6 * self.N)
        out[:3] = xs[0]
        if self.N > 1:
            out[self.rows_u] = us
        out[self.rows_y] = am.output_h(xs, self.params)
        return out

    def F2(self, z):
        if self.N == 1:
            return np.zeros(0)
        xs, us = self.split(z)
        return (am.step_F(xs[:-1], us, self.params_head, self.t_s) - xs[1:]).ravel()

    def jacobians(self, z):
        """Return ``(J1, J2)`` as dense arrays."""
        xs, us = self.split(z)
        N = self.N
        u_full = np.zeros((N, 3))
        if N > 1:
            u_full[:-1] = us
        Fx, Fu, Hx = am.jacobians(xs, u_full, self.params, self.t_s)
        J1 = np.zeros((6 * N, self.n_z))
        J1[0:3, 0:3] = np.eye(3)
        for i in range(N - 1):
            J1[3 + 6 * i:6 + 6 * i, 6 * i + 3:6 * i + 6] = np.eye(3)
            J1[6 + 6 * i:9 + 6 * i, 6 * i:6 * i + 3] = Hx[i]
        J1[6 * N - 3:6 * N, 6 * (N - 1):6 * N - 3] = Hx[N - 1]
        J2 = np.zeros((3 * (N - 1), self.n_z))
        for i in range(N - 1):
            J2[3 * i:3 * i + 3, 6 * i:6 * i + 3] = Fx[i]
            J2[3 * i:3 * i + 3, 6 * i + 3:6 * i + 6] = Fu[i]
            J2[3 * i:3 * i + 3, 6 * i + 6:6 * i + 9] = -np.eye(3)
        return J1, J2

    def with_info(self, info):
        """Shallow copy with a replaced information vector."""
        info = np.asarray(info, dtype=float)
        if info.shape != self.info.shape:
            raise DimensionMismatch("information vector has wrong length")
        other = copy.copy(self)
        other.info = info.copy()
        return other

    def objective(self, z):
        r = self.info - self.F1(z)
        return 0.5 * r @ (self.Vinv * r)

    def initial_guess(self):
        """Prior replicated along the horizon with zero inputs."""
        xs = np.empty((self.N, 3))
        xs[0] = self.window.x_prior
        for i in range(1, self.N):
            xs[i] = am.step_F(xs[i - 1], np.zeros(3), self.params.__class__(*(np.asarray(v)[i - 1] for v in self.params)),
                              self.t_s)
        return self.stack(xs, np.zeros((self.N - 1, 3)))


def build_problem(window: HorizonWindow, weights: Weights, bounds: Bounds) -> MheProblem:
    return MheProblem(window, weights, bounds)


# ----------------------------------------------------------------------
# Solution


@dataclass
class ActiveBound:
    index: int
    side: str
    stage: int
    variable: str
    multiplier: float


@dataclass
class MheSolution:
    z: np.ndarray
    lam: np.ndarray
    mu_lower: np.ndarray
    mu_upper: np.ndarray
    active: list
    kkt: dict
    iterations: int
    wall_time: float
    converged: bool
    problem: Optional[MheProblem] = field(default=None, repr=False)
    # (merit before, merit after, step length) per SQP iteration, same rho
    merit_history: list = field(default_factory=list, repr=False)

    @property
    def states(self):
        return self.z[self.problem.x_idx]

    @property
    def inputs(self):
        return self.z[self.problem.u_idx]

    @property
    def x_last(self):
        return self.states[-1]

    def active_rows(self):
        """Rows ``J_a`` of the active bounds (+e_i upper, -e_i lower)."""
        Ja = np.zeros((len(self.active), len(self.z)))
        for r, a in enumerate(self.active):
            Ja[r, a.index] = 1.0 if a.side == "upper" else -1.0
        return Ja


def kkt_report(problem: MheProblem, z, lam, mu_l, mu_u):
    r = problem.info - problem.F1(z)
    J1, J2 = problem.jacobians(z)
    grad = -J1.T @ (problem.Vinv * r)
    eq_term = J2.T @ lam if len(lam) else np.zeros_like(grad)
    stat = grad + eq_term - mu_l + mu_u
    scale = max(1.0, np.max(np.abs(grad)), np.max(np.abs(eq_term)), np.max(mu_l, initial=0), np.max(mu_u, initial=0))
    lb, ub = problem.lb, problem.ub
    fl, fu = np.isfinite(lb), np.isfinite(ub)
    comp = 0.0
    if fl.any():
        comp = max(comp, np.max(np.abs(mu_l[fl] * (z[fl] - lb[fl]))))
    if fu.any():
        comp = max(comp, np.max(np.abs(mu_u[fu] * (ub[fu] - z[fu]))))
    viol = max(np.max(np.where(fl, lb - z, 0.0), initial=0.0), np.max(np.where(fu, z - ub, 0.0), initial=0.0))
    return {
        "stationarity": float(np.max(np.abs(stat)) / scale),
        "stationarity_abs": float(np.max(np.abs(stat))),
        "equality": float(np.max(np.abs(problem.F2(z)), initial=0.0)),
        "complementarity": float(comp),
        "bound_violation": float(max(viol, 0.0)),
        "dual_sign": float(min(np.min(mu_l, initial=0.0), np.min(mu_u, initial=0.0))),
        "objective": float(0.5 * r @ (problem.Vinv * r)),
    }


def _active_list(problem, z, mu_l, mu_u, opts):
    out = []
    N = problem.N
    names_x = am.STATE_NAMES
    names_u = am.INPUT_NAMES
    for i in range(problem.n_z):
        stage, off = divmod(i, 6)
        var = names_x[off] if off < 3 else names_u[off - 3]
        for side, bnd, mu in (("lower", problem.lb[i], mu_l[i]), ("upper", problem.ub[i], mu_u[i])):
            if not np.isfinite(bnd):
                continue
            slack = z[i] - bnd if side == "lower" else bnd - z[i]
            if slack <= opts.tol_act_rel * (1 + abs(bnd)) and mu >= opts.tol_act_mult:
                out.append(ActiveBound(i, side, stage, var, float(mu)))
    return out


def _safe_merit(problem, z, rho):
    try:
        r = problem.info - problem.F1(z)
        c = problem.F2(z)
    except (ComplexAirspeed, DegenerateSpeed, FloatingPointError):
        return np.inf
    val = 0.5 * r @ (problem.Vinv * r) + rho * np.sum(np.abs(c))
    return val if np.isfinite(val) else np.inf


def solve(problem: MheProblem, z0=None, options: SolverOptions = SolverOptions()) -> MheSolution:
    """Gauss-Newton SQP with an L1 merit line search."""
    t_start = time.perf_counter()
    opts = options
    lb, ub = problem.lb, problem.ub
    z = problem.initial_guess() if z0 is None else np.array(z0, dtype=float)
    if z.shape != (problem.n_z,):
        raise DimensionMismatch("initial guess has wrong length")
    z = np.clip(z, lb, ub)
    Vinv = problem.Vinv
    rho = 0.0
    lam = np.zeros(3 * (problem.N - 1))
    mu_l = np.zeros(problem.n_z)
    mu_u = np.zeros(problem.n_z)
    max_it = opts.max_iter_converge if opts.converge else opts.max_sqp_iter
    converged = False
    it = 0
    d_prev = np.inf
    history = []
    for it in range(1, max_it + 1):
        F1 = problem.F1(z)
        r = problem.info - F1
        c = problem.F2(z)
        J1, J2 = problem.jacobians(z)
        WJ = Vinv[:, None] * J1
        H = J1.T @ WJ
        g = -(WJ.T @ r)
        qp = solve_box_qp(H, g, J2, -c, lb - z, ub - z, tol=opts.qp_tol)
        d = qp.d
        lam, mu_l, mu_u = qp.y, qp.mu_l, qp.mu_u
        d_norm = np.max(np.abs(d))
        z_scale = 1 + np.max(np.abs(z))
        # a step that no longer shrinks at roundoff level is as good as zero
        step_small = d_norm <= opts.tol_step * z_scale or (d_norm <= 1e-8 * z_scale and d_norm >= 0.5 * d_prev)
        d_prev = d_norm

        rho = max(rho, 1.1 * np.max(np.abs(lam), initial=0.0))
        m0 = 0.5 * r @ (Vinv * r) + rho * np.sum(np.abs(c))
        slope = g @ d - rho * np.sum(np.abs(c))

        def accept(trial, t):
            return _safe_merit(problem, trial, rho) <= m0 + 1e-4 * t * min(slope, 0.0) + 1e-14 * abs(m0)

        # near the solution the predicted decrease drops below the roundoff
        # of the merit itself and the Armijo test becomes noise
        noise_level = -slope <= 1e-10 * (1 + abs(m0)) and d_norm <= 1e-4 * z_scale
        t = 1.0
        while not (noise_level or accept(z + t * d, t)) and t >= 1e-10:
            t *= 0.5
        z_new = z + t * d
        if t == 1.0:
            z_new[qp.active_upper] = ub[qp.active_upper]
            z_new[qp.active_lower] = lb[qp.active_lower]
        z = np.clip(z_new, lb, ub)
        history.append((m0, _safe_merit(problem, z, rho), t))
        if step_small:
            converged = True
            break

    kkt = kkt_report(problem, z, lam, mu_l, mu_u)
    if not opts.converge:
        converged = converged or (kkt["stationarity"] <= opts.tol_stat and kkt["equality"] <= opts.tol_eq
                                  and kkt["complementarity"] <= opts.tol_comp)
    sol = MheSolution(z=z, lam=lam, mu_lower=mu_l, mu_upper=mu_u,
                      active=_active_list(problem, z, mu_l, mu_u, opts), kkt=kkt,
                      iterations=it, wall_time=time.perf_counter() - t_start,
                      converged=converged, problem=problem, merit_history=history)
    if opts.strict and opts.converge and not converged:
        raise MaxIterationsExceeded("SQP did not converge", sol)
    return sol


def predict_one_step(solution: MheSolution, params_prev: FlightParams, params_next: FlightParams, t_s=None):
    """One-step-ahead output prediction from the filtered estimate with u = 0."""
    t_s = solution.problem.t_s if t_s is None else t_s
    x_pred = am.step_F(solution.x_last, np.zeros(3), params_prev, t_s)
    return am.output_h(x_pred, params_next)


# ----------------------------------------------------------------------
# Estimator


class MovingHorizonEstimator:
    """Sliding-window estimator owning its warm-start workspace.

    Samples are pushed as raw triplex rows; every solve re-fuses the whole
    window with the current healthy sets so that ``R`` always matches the
    current channel counts.
    """

    def __init__(self, weights=Weights(), bounds=Bounds(), t_s=0.04, horizon=5,
                 options=SolverOptions()):
        if horizon < 1:
            raise ValueError("horizon must be >= 1")
        self.weights = weights
        self.bounds = bounds
        self.t_s = t_s
        self.horizon = horizon
        self.options = options
        self.reset()

    def reset(self):
        self.rows = deque(maxlen=self.horizon)
        self.params = deque(maxlen=self.horizon)
        self.k = -1
        self.x_prior = None
        self.solution = None
        self.window_times = deque(maxlen=self.horizon)

    def copy(self):
        return copy.deepcopy(self)

    def _window(self, healthy_alpha, healthy_vc):
        ys = []
        na = nv = 3
        for row in self.rows:
            y, na, nv = fuse_measurements(row, healthy_alpha, healthy_vc)
            ys.append(y)
        p = FlightParams(*(np.array([pp[i] for pp in self.params], dtype=float) for i in range(6)))
        return HorizonWindow(y=np.array(ys), params=p, x_prior=self.x_prior.copy(), t_s=self.t_s,
                             n_alpha=na, n_vc=nv, k_last=self.k)

    def update(self, row, params: FlightParams, healthy_alpha=(1, 2, 3), healthy_vc=(1, 2, 3)):
        """Append one sample, solve the horizon problem, return the solution."""
        row = np.asarray(row, dtype=float)
        self.k += 1
        full = len(self.rows) == self.horizon
        prev = self.solution
        if self.x_prior is None:
            y0, _, _ = fuse_measurements(row, healthy_alpha, healthy_vc)
            self.x_prior = np.array([y0[0], 0.0, 0.0])
        elif full:
            # arrival: previous smoothed estimate of the new first state
            self.x_prior = prev.states[1].copy()
        self.rows.append(row)
        self.params.append(tuple(float(v) for v in params))
        self.window_times.append(self.k)

        problem = MheProblem(self._window(healthy_alpha, healthy_vc), self.weights, self.bounds)
        z0 = None
        if prev is not None:
            xs, us = prev.states, prev.inputs
            p_last = FlightParams(*self.params[-2])
            x_next = am.step_F(xs[-1], np.zeros(3), p_last, self.t_s)
            if full:
                xs = np.vstack([xs[1:], x_next])
                us = np.vstack([us[1:], np.zeros((1, 3))])
            else:
                xs = np.vstack([xs, x_next])
                us = np.vstack([us, np.zeros((1, 3))])
            z0 = problem.stack(xs, us)
        self.solution = solve(problem, z0, self.options)
        return self.solution

    def predict(self, params_next: FlightParams):
        """Output prediction for the next sample given its parameters."""
        if self.solution is None:
            raise RuntimeError("no solution yet")
        return predict_one_step(self.solution, FlightParams(*self.params[-1]), params_next, self.t_s)
