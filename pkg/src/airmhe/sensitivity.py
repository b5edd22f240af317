"""
Linearized KKT sensitivity of the horizon problem to perturbations of the
information vector, and the resulting fault sensitivity of the one-step
predicted residual.

With ``H = J1' V^-1 J1`` and equality rows ``C`` (dynamics, optionally
stacked with active-bound rows ``J_a``)::

    X = H^-1 - H^-1 C' (C H^-1 C')^-1 C H^-1
    dz = X J1' V^-1 eps

``X`` is also computed as ``Pi^-1 P Pi^-1`` with ``Pi = H^(1/2)`` and ``P``
the orthogonal projector onto the null space of ``C Pi^-1``.

The predicted residual responds to a perturbation ``eps_{k-1}`` of the
previous information vector and to the current fault ``f_k`` through
``S = [-Phi J1 X J1' V^-1, I]`` where ``Phi = dnu/dI`` and
``nu(I) = h(F(P_s zhat(I), 0, Theta_{k-1}), Theta_k)``.
"""

import json
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import scipy.linalg

from . import airmodel as am
from .errors import ActiveSetChanged, LicqViolation, SingularKkt
from .mhe import MheProblem, MheSolution, SolverOptions, solve
from .qp import solve_box_qp

RANK_TOL = 1e-10


def numerical_rank(M, tol=RANK_TOL):
    if M.shape[0] == 0:
        return 0
    s = np.linalg.svd(M, compute_uv=False)
    return int(np.sum(s > tol * s[0])) if s[0] > 0 else 0


def check_licq(C, what="constraint Jacobian"):
    r = numerical_rank(C)
    if r < C.shape[0]:
        raise LicqViolation(f"{what} has rank {r} < {C.shape[0]} rows")


@dataclass
class StackedSystem:
    """Dense stacked quantities at a solution of the horizon problem."""

    z: np.ndarray
    info: np.ndarray
    V: np.ndarray
    J1: np.ndarray
    J2: np.ndarray
    Ja: np.ndarray
    H: np.ndarray
    shift: float = 0.0
    problem: Optional[MheProblem] = field(default=None, repr=False)

    @property
    def Vinv(self):
        return 1.0 / self.V

    @property
    def J2a(self):
        return np.vstack([self.J2, self.Ja])

    def constraints(self, active):
        return self.J2a if active else self.J2


def gauss_newton_hessian(J1, V):
    """``J1' V^-1 J1`` with a Levenberg shift only if Cholesky fails."""
    H = J1.T @ (J1 / V[:, None])
    H = 0.5 * (H + H.T)
    try:
        np.linalg.cholesky(H)
        return H, 0.0
    except np.linalg.LinAlgError:
        shift = 1e-10 * np.trace(H) / H.shape[0]
        return H + shift * np.eye(H.shape[0]), shift


def assemble(problem: MheProblem, solution: Optional[MheSolution] = None, z=None, Ja=None) -> StackedSystem:
    """Jacobians and Hessian at ``z`` (defaults to the solution's primal).

    Active-bound rows come from the solution report unless given.
    """
    if z is None:
        z = solution.z
    z = np.asarray(z, dtype=float)
    if Ja is None:
        Ja = solution.active_rows() if solution is not None else np.zeros((0, problem.n_z))
    J1, J2 = problem.jacobians(z)
    check_licq(J2, "J2")
    if Ja.shape[0]:
        check_licq(np.vstack([J2, Ja]), "J2a")
    H, shift = gauss_newton_hessian(J1, problem.V)
    return StackedSystem(z=z, info=problem.info.copy(), V=problem.V.copy(), J1=J1, J2=J2, Ja=Ja,
                         H=H, shift=shift, problem=problem)


# ----------------------------------------------------------------------
# X by two routes


def compute_X_schur(H, C):
    """Reduced inverse via the Schur complement of the KKT matrix."""
    n = H.shape[0]
    try:
        cf = scipy.linalg.cho_factor(H)
    except np.linalg.LinAlgError as exc:
        raise SingularKkt("Hessian is not positive definite") from exc
    Hinv = scipy.linalg.cho_solve(cf, np.eye(n))
    if C.shape[0] == 0:
        return 0.5 * (Hinv + Hinv.T)
    HC = Hinv @ C.T
    S = C @ HC
    try:
        X = Hinv - HC @ np.linalg.solve(S, HC.T)
    except np.linalg.LinAlgError as exc:
        raise SingularKkt("singular Schur complement") from exc
    return 0.5 * (X + X.T)


def sqrt_pair(H):
    """``(Pi, Pi^-1)`` with ``Pi = H^(1/2)`` from a symmetric eigendecomposition."""
    w, Q = np.linalg.eigh(H)
    if w[0] <= 0:
        raise SingularKkt("Hessian is not positive definite")
    r = np.sqrt(w)
    return (Q * r) @ Q.T, (Q / r) @ Q.T


def projector(H, C):
    """Orthogonal projector onto the null space of ``C Pi^-1`` and ``Pi^-1``."""
    _, Pi_inv = sqrt_pair(H)
    n = H.shape[0]
    if C.shape[0] == 0:
        return np.eye(n), Pi_inv
    B = Pi_inv @ C.T
    P = np.eye(n) - B @ np.linalg.solve(B.T @ B, B.T)
    return P, Pi_inv


def compute_X_projector(H, C):
    P, Pi_inv = projector(H, C)
    X = Pi_inv @ P @ Pi_inv
    return 0.5 * (X + X.T)


def compute_X(system: StackedSystem, active=False, route="schur"):
    C = system.constraints(active)
    if route == "schur":
        return compute_X_schur(system.H, C)
    if route == "projector":
        return compute_X_projector(system.H, C)
    raise ValueError(f"unknown route {route!r}")


def solve_kkt_linearized(system: StackedSystem, eps, active=False):
    """Solve the full linearized KKT system for a perturbation ``eps``.

    Returns ``(dz, dlam, dmu_a)`` from a dense LU of the saddle-point
    matrix; ``dz`` is cross-checked against ``X J1' V^-1 eps``.
    """
    eps = np.asarray(eps, dtype=float)
    C = system.constraints(active)
    n, m = system.H.shape[0], C.shape[0]
    K = np.zeros((n + m, n + m))
    K[:n, :n] = system.H
    K[:n, n:] = C.T
    K[n:, :n] = C
    rhs = np.zeros(n + m)
    rhs[:n] = system.J1.T @ (system.Vinv * eps)
    # symmetric equilibration: the AOA and wind blocks differ by ~1e8
    s = np.ones(n + m)
    s[:n] = 1.0 / np.sqrt(np.maximum(np.abs(np.diag(system.H)), 1e-300))
    rown = np.sqrt(np.sum((C * s[:n]) ** 2, axis=1))
    s[n:] = 1.0 / np.where(rown > 0, rown, 1.0)
    try:
        sol = scipy.linalg.solve(K * s[:, None] * s[None, :], rhs * s) * s
    except np.linalg.LinAlgError as exc:
        raise SingularKkt(str(exc)) from exc
    dz = sol[:n]
    m2 = system.J2.shape[0]
    return dz, sol[n:n + m2], sol[n + m2:]


# ----------------------------------------------------------------------
# Prediction chain


def prediction_gain(system: StackedSystem, params_prev, params_next, t_s=None):
    """``G = dh/dx (x_pred) * dF/dx (x_last) * P_s`` (3 x n_z)."""
    prob = system.problem
    t_s = prob.t_s if t_s is None else t_s
    x_last = system.z[prob.x_idx[-1]]
    Fx, _, _ = am.jacobians(x_last, np.zeros(3), params_prev, t_s)
    x_pred = am.step_F(x_last, np.zeros(3), params_prev, t_s)
    _, _, Hx = am.jacobians(x_pred, np.zeros(3), params_next, t_s)
    G = np.zeros((3, prob.n_z))
    G[:, prob.x_idx[-1]] = Hx @ Fx
    return G


def compute_phi(system: StackedSystem, params_prev, params_next, X=None, rows=None):
    """``Phi = G X J1' V^-1``; ``rows`` selects output components."""
    if X is None:
        X = compute_X(system)
    Phi = prediction_gain(system, params_prev, params_next) @ X @ (system.J1.T * system.Vinv)
    return Phi if rows is None else Phi[list(rows)]


def nu(problem: MheProblem, info, params_prev, params_next, z0, options=None):
    """Output prediction after re-solving the horizon problem with ``info``."""
    options = options or SolverOptions(converge=True, max_iter_converge=100, tol_step=1e-13)
    sol = solve(problem.with_info(info), z0, options)
    x_pred = am.step_F(sol.x_last, np.zeros(3), params_prev, problem.t_s)
    return am.output_h(x_pred, params_next), sol


def sensitivity_matrices(Phi, J1, V, X):
    """Flat and factored forms of ``S = [-Phi J1 X J1' V^-1, I]``."""
    Vinv = 1.0 / V
    p = Phi.shape[0]
    M = J1 @ X @ (J1.T * Vinv)
    flat = np.hstack([-Phi @ M, np.eye(p)])
    n_i = len(V)
    left = np.hstack([Phi, np.eye(p)])
    mid = scipy.linalg.block_diag(np.diag(V) - J1 @ X @ J1.T, np.eye(p))
    right = np.block([[np.diag(Vinv), np.zeros((n_i, p))], [-Phi, np.eye(p)]])
    factored = left @ mid @ right
    return flat, factored


@dataclass
class SensitivityReport:
    X: np.ndarray
    X_a: np.ndarray
    X_projector: np.ndarray
    X_a_projector: np.ndarray
    Phi: np.ndarray
    S: np.ndarray
    S_a: np.ndarray
    S_factored: np.ndarray
    S_a_factored: np.ndarray
    eig_X_minus_Xa: np.ndarray
    eig_gram_diff: np.ndarray
    eig_middle_diff: np.ndarray
    n_active: int
    active: list
    licq: bool = True
    hessian_shift: float = 0.0

    def summary(self):
        return {
            "n_active": self.n_active,
            "licq": self.licq,
            "hessian_shift": self.hessian_shift,
            "min_eig_X_minus_Xa": float(self.eig_X_minus_Xa.min()),
            "min_eig_Sa_gram_minus_S_gram": float(self.eig_gram_diff.min()),
            "max_eig_Sa_gram_minus_S_gram": float(self.eig_gram_diff.max()),
            "min_eig_middle_factor_diff": float(self.eig_middle_diff.min()),
            "route_gap_X": float(np.max(np.abs(self.X - self.X_projector))),
            "route_gap_X_a": float(np.max(np.abs(self.X_a - self.X_a_projector))),
            "form_gap_S": float(np.max(np.abs(self.S - self.S_factored))),
            "form_gap_S_a": float(np.max(np.abs(self.S_a - self.S_a_factored))),
        }

    def to_json(self):
        def mat(a):
            a = np.atleast_2d(a)
            return {"shape": list(a.shape), "data": a.ravel().tolist()}
        out = {k: mat(getattr(self, k)) for k in ("X", "X_a", "Phi", "S", "S_a")}
        out["active"] = [dict(index=a.index, side=a.side, stage=a.stage, variable=a.variable,
                              multiplier=a.multiplier) for a in self.active]
        out["summary"] = self.summary()
        return json.dumps(out)


def sym_eigs(A):
    return np.linalg.eigvalsh(0.5 * (A + A.T))


def analyze(system: StackedSystem, params_prev, params_next, active=None, rows=None) -> SensitivityReport:
    """Full report at one solution: both X routes, Phi and both S forms."""
    X = compute_X(system, False)
    X_a = compute_X(system, True)
    Xp = compute_X(system, False, "projector")
    Xap = compute_X(system, True, "projector")
    Phi = compute_phi(system, params_prev, params_next, X, rows)
    S, Sf = sensitivity_matrices(Phi, system.J1, system.V, X)
    Sa, Saf = sensitivity_matrices(Phi, system.J1, system.V, X_a)
    mid = system.J1 @ (X - X_a) @ system.J1.T
    return SensitivityReport(X=X, X_a=X_a, X_projector=Xp, X_a_projector=Xap, Phi=Phi, S=S, S_a=Sa,
                             S_factored=Sf, S_a_factored=Saf, eig_X_minus_Xa=sym_eigs(X - X_a),
                             eig_gram_diff=sym_eigs(Sa @ Sa.T - S @ S.T), eig_middle_diff=sym_eigs(mid),
                             n_active=system.Ja.shape[0], active=list(active or []),
                             hessian_shift=system.shift)


# ----------------------------------------------------------------------
# Random linear instances for the ordering checks


@dataclass
class LinearInstance:
    """Linear-Gaussian horizon problem ``min 1/2|I - J1 z|_{V^-1}^2, J2 z = 0``."""

    A: np.ndarray
    B: np.ndarray
    Cy: np.ndarray
    V: np.ndarray
    J1: np.ndarray
    J2: np.ndarray
    info: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    N: int

    @property
    def H(self):
        return self.J1.T @ (self.J1 / self.V[:, None])

    def solve(self):
        """Constrained minimiser and the QP result carrying multipliers."""
        g = -self.J1.T @ (self.info / self.V)
        res = solve_box_qp(self.H, g, self.J2, np.zeros(self.J2.shape[0]), self.lb, self.ub, tol=1e-12)
        return res.d, res


def linear_instance(rng, n=3, N=3, n_bounds=None):
    """Random stable dynamics, PD diagonal weights and bounds that bite.

    Bounds are placed slightly inside the unconstrained optimum on up to
    three randomly chosen coordinates, so the constrained solution has
    between zero and three active bounds.
    """
    nz = n * N + n * (N - 1)
    Q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    A = Q @ np.diag(rng.uniform(0.3, 0.95, n)) @ Q.T
    B = rng.normal(size=(n, n)) * 0.5
    Cy = rng.normal(size=(n, n)) + 2 * np.eye(n)
    ny = n
    rows_total = n + (N - 1) * (n + ny) + ny
    J1 = np.zeros((rows_total, nz))
    J1[:n, :n] = np.eye(n)
    V = [rng.uniform(0.2, 2.0, n)]
    for i in range(N - 1):
        r0 = n + i * (n + ny)
        J1[r0:r0 + n, i * 2 * n + n:i * 2 * n + 2 * n] = np.eye(n)
        J1[r0 + n:r0 + n + ny, i * 2 * n:i * 2 * n + n] = Cy
        V += [rng.uniform(0.2, 2.0, n), rng.uniform(0.2, 2.0, ny)]
    J1[rows_total - ny:, (N - 1) * 2 * n:(N - 1) * 2 * n + n] = Cy
    V.append(rng.uniform(0.2, 2.0, ny))
    V = np.concatenate(V)
    J2 = np.zeros((n * (N - 1), nz))
    for i in range(N - 1):
        c = i * 2 * n
        J2[i * n:(i + 1) * n, c:c + n] = A
        J2[i * n:(i + 1) * n, c + n:c + 2 * n] = B
        J2[i * n:(i + 1) * n, c + 2 * n:c + 3 * n] = -np.eye(n)
    info = rng.normal(size=rows_total)
    lb = np.full(nz, -np.inf)
    ub = np.full(nz, np.inf)
    inst = LinearInstance(A, B, Cy, V, J1, J2, info, lb, ub, N)
    z_free = inst.solve()[0]
    k = rng.integers(0, 4) if n_bounds is None else n_bounds
    for j in rng.choice(nz, size=k, replace=False):
        gap = 0.05 + 0.2 * rng.random()
        if rng.random() < 0.5:
            ub[j] = z_free[j] - gap
        else:
            lb[j] = z_free[j] + gap
    return inst


def active_rows_from_qp(res, nz, mult_tol=1e-8):
    rows = []
    for i in np.flatnonzero(res.active_upper & (res.mu_u >= mult_tol)):
        rows.append((int(i), 1.0))
    for i in np.flatnonzero(res.active_lower & (res.mu_l >= mult_tol)):
        rows.append((int(i), -1.0))
    Ja = np.zeros((len(rows), nz))
    for r, (i, s) in enumerate(rows):
        Ja[r, i] = s
    return Ja


@dataclass
class OrderingCheck:
    seed: int
    n_active: int
    licq_skip: bool
    min_eig_chain: float = np.inf  # min over X_prev - X_next
    min_eig_gram: float = np.inf  # min over Gram(S_next) - Gram(S_prev)
    min_eig_middle: float = np.inf  # min over middle-factor differences
    max_symmetry: float = 0.0
    min_eig_X: float = np.inf
    dump: dict = field(default_factory=dict)


def ordering_check(seed, n=3, N=3):
    """Check ``X_{a'} <= X_a <= X`` and the Gram ordering along a nested chain.

    The chain is empty set, first active bound, first two, ... of the
    active set of the constrained solution.  ``G`` maps the last state to
    the predicted output with a random linear output/step pair.
    """
    rng = np.random.default_rng(seed)
    inst = linear_instance(rng, n, N)
    z, res = inst.solve()
    nz = len(z)
    Ja_full = active_rows_from_qp(res, nz)
    chk = OrderingCheck(seed=seed, n_active=Ja_full.shape[0], licq_skip=False)
    H = inst.H
    G = np.zeros((n, nz))
    G[:, (N - 1) * 2 * n:(N - 1) * 2 * n + n] = inst.Cy @ inst.A
    prev_X = prev_S = prev_mid = None
    for r in range(Ja_full.shape[0] + 1):
        C = np.vstack([inst.J2, Ja_full[:r]])
        try:
            check_licq(C)
        except LicqViolation:
            chk.licq_skip = True
            return chk
        X = compute_X_schur(H, C)
        chk.max_symmetry = max(chk.max_symmetry, float(np.max(np.abs(X - X.T))))
        chk.min_eig_X = min(chk.min_eig_X, float(sym_eigs(X).min()))
        Phi = G @ compute_X_schur(H, inst.J2) @ (inst.J1.T / inst.V)
        S, _ = sensitivity_matrices(Phi, inst.J1, inst.V, X)
        mid = np.diag(inst.V) - inst.J1 @ X @ inst.J1.T
        if prev_X is not None:
            chk.min_eig_chain = min(chk.min_eig_chain, float(sym_eigs(prev_X - X).min()))
            chk.min_eig_gram = min(chk.min_eig_gram, float(sym_eigs(S @ S.T - prev_S @ prev_S.T).min()))
            chk.min_eig_middle = min(chk.min_eig_middle, float(sym_eigs(mid - prev_mid).min()))
        prev_X, prev_S, prev_mid = X, S, mid
    if chk.min_eig_gram < -1e-8:
        chk.dump = {"A": inst.A.tolist(), "B": inst.B.tolist(), "Cy": inst.Cy.tolist(), "V": inst.V.tolist(),
                    "info": inst.info.tolist(), "lb": inst.lb.tolist(), "ub": inst.ub.tolist()}
    return chk


def verify_ordering(seeds, n=3, N=3, tol=-1e-8):
    """Batch of :func:`ordering_check` with aggregate verdicts."""
    checks = [ordering_check(s, n, N) for s in seeds]
    used = [c for c in checks if not c.licq_skip]
    chain_bad = [c.seed for c in used if c.min_eig_chain < tol]
    gram_bad = [c.seed for c in used if c.min_eig_gram < tol]
    mid_bad = [c.seed for c in used if c.min_eig_middle < tol]
    return {
        "instances": len(checks),
        "licq_skipped": len(checks) - len(used),
        "active_counts": np.bincount([c.n_active for c in used], minlength=4).tolist(),
        "chain_counterexamples": chain_bad,
        "gram_counterexamples": gram_bad,
        "middle_factor_counterexamples": mid_bad,
        "min_eig_chain": min((c.min_eig_chain for c in used), default=np.inf),
        "min_eig_gram": min((c.min_eig_gram for c in used), default=np.inf),
        "min_eig_middle": min((c.min_eig_middle for c in used), default=np.inf),
        "checks": checks,
    }


# ----------------------------------------------------------------------
# First-order validation on the nonlinear problem


@dataclass
class FirstOrderReport:
    scales: np.ndarray
    remainders: np.ndarray
    ratios: np.ndarray
    predicted_norms: np.ndarray
    active_base: list
    active_changed: bool


def _active_key(sol):
    return sorted((a.index, a.side) for a in sol.active)


def first_order_validation(problem: MheProblem, eps, z_base=None, scales=(1.0, 0.5, 0.25, 0.125),
                           options=None, raise_on_change=True) -> FirstOrderReport:
    """Compare actual and predicted solution changes for ``scale * eps``.

    The prediction ``X J1' V^-1 eps`` is exact to first order when the
    base residual is zero, so callers should pass a model-consistent
    base (``problem.info == F1(z_base)``).
    """
    options = options or SolverOptions(converge=True, max_iter_converge=100, tol_step=1e-14)
    base = solve(problem, z_base, options)
    system = assemble(problem, base)
    X = compute_X(system, active=system.Ja.shape[0] > 0)
    gain = X @ (system.J1.T * system.Vinv)
    rem, pred_n = [], []
    key0 = _active_key(base)
    changed = False
    for s in scales:
        sol = solve(problem.with_info(problem.info + s * eps), base.z, options)
        if _active_key(sol) != key0:
            changed = True
            if raise_on_change:
                raise ActiveSetChanged(f"active set changed at scale {s}",
                                       {"scale": s, "base": key0, "perturbed": _active_key(sol)})
        dz = sol.z - base.z
        pred = gain @ (s * eps)
        rem.append(np.linalg.norm(dz - pred))
        pred_n.append(np.linalg.norm(pred))
    rem = np.array(rem)
    return FirstOrderReport(scales=np.array(scales), remainders=rem, ratios=rem[:-1] / rem[1:],
                            predicted_norms=np.array(pred_n), active_base=key0, active_changed=changed)


# ----------------------------------------------------------------------
# Random nonlinear horizon problems


def random_params(rng, n):
    """Plausible level-flight parameter samples (SI)."""
    theta = rng.uniform(-0.1, 0.15)
    return am.FlightParams(
        V_g=np.full(n, rng.uniform(80.0, 140.0)) + rng.normal(0, 0.5, n),
        theta=theta + rng.normal(0, 0.002, n),
        q=rng.normal(0, 0.01, n),
        n_x=rng.normal(0, 0.5, n) + am.ISA.g * np.sin(theta),
        n_z=-am.ISA.g * np.cos(theta) + rng.normal(0, 0.3, n),
        z=np.full(n, rng.uniform(0.0, 6000.0)),
    )


def random_problem(rng, N=5, weights=None, bounds=None, noise=0.0, t_s=0.04):
    """Horizon problem built around a trajectory of the estimator model.

    Returns ``(problem, z_true)``.  With ``noise == 0`` the information
    vector equals ``F1(z_true)``, so ``z_true`` is the exact minimiser
    with zero residual.
    """
    from .mhe import Bounds, HorizonWindow, Weights
    weights = weights or Weights()
    bounds = bounds or Bounds.unconstrained()
    params = random_params(rng, N)
    xs = np.empty((N, 3))
    xs[0] = [params.theta[0] + rng.normal(0, 0.03), rng.uniform(-10, 10), rng.uniform(-3, 3)]
    us = np.column_stack([rng.normal(0, 1e-3, N - 1), rng.normal(0, 1.0, N - 1), rng.normal(0, 0.5, N - 1)])
    for i in range(N - 1):
        xs[i + 1] = am.step_F(xs[i], us[i], params.index(i), t_s)
    y = am.output_h(xs, params)
    window = HorizonWindow(y=y, params=params, x_prior=xs[0].copy(), t_s=t_s)
    problem = MheProblem(window, weights, bounds)
    z_true = problem.stack(xs, us)
    info = problem.F1(z_true)
    if noise:
        info = info + noise * rng.normal(size=info.shape) * np.sqrt(problem.V)
    return problem.with_info(info), z_true
