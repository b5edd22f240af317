"""
Property suites and independent oracles.

Each suite returns a :class:`SuiteResult` with the worst observed metric,
the tolerance it was held to and dumps of failing instances.  The suites
back ``airmhe verify`` and the acceptance tests.
"""

import itertools
import time
from dataclasses import dataclass, field

import numpy as np

from . import airmodel as am
from . import sensitivity as ks
from .errors import LicqViolation, SingularKkt
from .mhe import Bounds, MheProblem, SolverOptions, solve

CONVERGED = SolverOptions(converge=True, max_iter_converge=100, tol_step=1e-14)


@dataclass
class SuiteResult:
    name: str
    passed: bool
    metric: float
    tolerance: float
    cases: int
    seconds: float = 0.0
    detail: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)

    def line(self):
        tag = "PASS" if self.passed else "FAIL"
        return f"{tag}  {self.name:<28} worst={self.metric:.3e}  tol={self.tolerance:.1e}  cases={self.cases}"


def _timed(fn):
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = time.perf_counter() - t0
        return res
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


# ----------------------------------------------------------------------
# Finite differences


def central_difference(f, x, rel=1e-6):
    """Central differences with step ``rel * (1 + |x_j|)``; columns per input."""
    x = np.asarray(x, dtype=float)
    f0 = np.atleast_1d(f(x))
    D = np.zeros((len(f0), len(x)))
    for j in range(len(x)):
        h = rel * (1 + abs(x[j]))
        e = np.zeros_like(x)
        e[j] = h
        D[:, j] = (np.atleast_1d(f(x + e)) - np.atleast_1d(f(x - e))) / (2 * h)
    return D


def rel_err(A, B):
    """Max-norm error of ``A`` relative to the max entry of ``B`` (floor 1)."""
    return float(np.max(np.abs(A - B)) / max(1.0, np.max(np.abs(B))))


def random_point(rng):
    """State, input and a pair of parameter samples in the flight envelope."""
    p = ks.random_params(rng, 2)
    x = np.array([p.theta[0] + rng.normal(0, 0.05), rng.uniform(-30, 30), rng.uniform(-10, 10)])
    u = np.array([rng.normal(0, 0.01), rng.normal(0, 2.0), rng.normal(0, 2.0)])
    return x, u, p.index(0), p.index(1)


# ----------------------------------------------------------------------
# Constrained horizon instances


def tightened_problem(rng, N=5, n_bounds=None, noise=1.0):
    """Noisy horizon problem with 0..3 wind/acceleration bounds that cut off
    the unconstrained optimum, so most of them are active at the solution.

    The bounds are placed around a target wind trajectory that obeys the
    linear wind dynamics, which keeps the bounded problem strictly feasible.
    """
    problem, _ = ks.random_problem(rng, N=N, noise=noise)
    free = solve(problem, None, CONVERGED)
    lb = np.full(problem.n_z, -np.inf)
    ub = np.full(problem.n_z, np.inf)
    target = free.z.copy()
    wind = lambda i: slice(6 * i + 1, 6 * i + 3)
    accel = lambda i: slice(6 * i + 4, 6 * i + 6)
    target[wind(0)] += rng.choice([-1.0, 1.0], 2) * rng.uniform(0.05, 0.2, 2) * (1 + np.abs(free.z[wind(0)]))
    for i in range(N - 1):
        target[accel(i)] += rng.uniform(-0.2, 0.2, 2) * (1 + np.abs(free.z[accel(i)]))
        target[wind(i + 1)] = target[wind(i)] + problem.t_s * target[accel(i)]
    delta = target - free.z
    cand = [i for i in range(problem.n_z)
            if i % 3 != 0 and abs(delta[i]) > 1e-2 * (1 + abs(free.z[i]))]
    k = rng.integers(0, 4) if n_bounds is None else n_bounds
    for j in rng.choice(cand, size=min(k, len(cand)), replace=False):
        # a quarter of the shift stays as slack on the target side
        if delta[j] < 0:
            ub[j] = target[j] + 0.25 * abs(delta[j])
        else:
            lb[j] = target[j] - 0.25 * abs(delta[j])
    out = problem.with_info(problem.info)
    out.lb, out.ub = lb, ub
    return out


def _eq_newton(problem: MheProblem, fix, z0, iters=60):
    """Gauss-Newton on the full KKT matrix with ``fix`` bounds as equalities.

    ``fix`` is a list of ``(index, value, sign)``; returns ``(z, bound
    multipliers with the solver's sign convention)`` or ``None``.
    """
    z = np.array(z0, dtype=float)
    for i, v, _ in fix:
        z[i] = v
    n = problem.n_z
    na = len(fix)
    mult = np.zeros(na)
    for _ in range(iters):
        r = problem.info - problem.F1(z)
        J1, J2 = problem.jacobians(z)
        E = np.zeros((na, n))
        for row, (i, _, s) in enumerate(fix):
            E[row, i] = s
        C = np.vstack([J2, E])
        m = C.shape[0]
        K = np.block([[J1.T @ (problem.Vinv[:, None] * J1), C.T], [C, np.zeros((m, m))]])
        rhs = np.concatenate([J1.T @ (problem.Vinv * r), -problem.F2(z), np.zeros(na)])
        try:
            sol = np.linalg.solve(K, rhs)
        except np.linalg.LinAlgError:
            return None
        d = sol[:n]
        mult = sol[n + J2.shape[0]:]
        z = z + d
        if np.max(np.abs(d)) <= 1e-14 * (1 + np.max(np.abs(z))):
            break
    return z, mult


def enumerate_oracle(problem: MheProblem, z0, tol=1e-9):
    """Global constrained minimiser by enumerating active subsets of the
    finite bounds; every candidate is a dense equality-constrained solve."""
    finite = [(i, problem.lb[i], -1.0) for i in np.flatnonzero(np.isfinite(problem.lb))]
    finite += [(i, problem.ub[i], 1.0) for i in np.flatnonzero(np.isfinite(problem.ub))]
    best = None
    for r in range(len(finite) + 1):
        for fix in itertools.combinations(finite, r):
            if len({i for i, _, _ in fix}) < len(fix):
                continue
            out = _eq_newton(problem, list(fix), z0)
            if out is None:
                continue
            z, mult = out
            scale = 1 + np.abs(z)
            if np.any(z < problem.lb - tol * scale) or np.any(z > problem.ub + tol * scale):
                continue
            if np.any(mult < -1e-8):
                continue
            obj = problem.objective(z)
            if best is None or obj < best[0] - 1e-14 * abs(obj):
                best = (obj, z, fix)
    return best


# ----------------------------------------------------------------------
# Suites


@_timed
def suite_kkt_residual(seed=0, cases=100, options=CONVERGED, tol_stat=1e-6, tol_comp=1e-8):
    """Stationarity and complementarity of every accepted converged solve."""
    rng = np.random.default_rng(seed)
    worst_s = worst_c = 0.0
    fails = []
    for c in range(cases):
        prob = tightened_problem(rng)
        sol = solve(prob, None, options)
        k = sol.kkt
        worst_s = max(worst_s, k["stationarity"])
        worst_c = max(worst_c, k["complementarity"])
        if k["stationarity"] > tol_stat or k["complementarity"] > tol_comp or k["equality"] > 1e-8:
            fails.append({"case": c, **k})
    return SuiteResult("kkt_residual", not fails, worst_s, tol_stat, cases,
                       detail={"max_stationarity": worst_s, "max_complementarity": worst_c}, failures=fails)


@_timed
def suite_kkt_oracle(seed=1, cases=30, tol=1e-7):
    """Horizon-3 solver solutions against the enumeration oracle."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    fails = []
    n_active = []
    for c in range(cases):
        prob = tightened_problem(rng, N=3)
        sol = solve(prob, None, CONVERGED)
        best = enumerate_oracle(prob, prob.initial_guess())
        n_active.append(len(sol.active))
        if best is None:
            fails.append({"case": c, "reason": "oracle found no candidate"})
            continue
        err = float(np.max(np.abs(sol.z - best[1]) / (1 + np.abs(best[1]))))
        worst = max(worst, err)
        if err > tol:
            fails.append({"case": c, "error": err, "oracle_active": [int(i) for i, _, _ in best[2]],
                          "solver_active": [a.index for a in sol.active]})
    return SuiteResult("kkt_oracle", not fails, worst, tol, cases,
                       detail={"active_counts": np.bincount(n_active, minlength=4).tolist()}, failures=fails)


@_timed
def suite_jacobians(seed=2, cases=1000, tol=1e-5):
    """Model Jacobians against central differences."""
    rng = np.random.default_rng(seed)
    t_s = 0.04
    worst = 0.0
    fails = []
    for c in range(cases):
        x, u, p0, p1 = random_point(rng)
        Fx, Fu, Hx = am.jacobians(x, u, p0, t_s)
        errs = (rel_err(Fx, central_difference(lambda v: am.step_F(v, u, p0, t_s), x)),
                rel_err(Fu, central_difference(lambda v: am.step_F(x, v, p0, t_s), u)),
                rel_err(Hx, central_difference(lambda v: am.output_h(v, p0), x)))
        worst = max(worst, *errs)
        if max(errs) > tol:
            fails.append({"case": c, "x": x.tolist(), "u": u.tolist(), "errors": errs})
    return SuiteResult("jacobian_fd", not fails, worst, tol, cases, failures=fails)


@_timed
def suite_stacked_jacobians(seed=3, cases=50, tol=1e-5):
    """Stacked ``J1``, ``J2`` against central differences of ``F1``, ``F2``."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    fails = []
    for c in range(cases):
        prob, z = ks.random_problem(rng, noise=1.0)
        z = z + 0.01 * rng.normal(size=z.shape)
        J1, J2 = prob.jacobians(z)
        e = max(rel_err(J1, central_difference(prob.F1, z)), rel_err(J2, central_difference(prob.F2, z)))
        worst = max(worst, e)
        if e > tol:
            fails.append({"case": c, "error": e})
    return SuiteResult("stacked_jacobian_fd", not fails, worst, tol, cases, failures=fails)


def phi_fd_error(rng, N=3):
    """Relative error of the analytic ``Phi`` against differences of ``nu``.

    The base information vector is replaced by ``F1(zhat)`` so the
    Gauss-Newton Hessian is the exact Hessian at the base point.
    """
    prob, _ = ks.random_problem(rng, N=N, noise=1.0)
    sol = solve(prob, None, CONVERGED)
    base = prob.with_info(prob.F1(sol.z))
    sol = solve(base, sol.z, CONVERGED)
    system = ks.assemble(base, sol)
    extra = ks.random_params(rng, 1)
    pp, pn = prob.params.index(-1), extra.index(0)
    Phi = ks.compute_phi(system, pp, pn)
    D = central_difference(lambda info: ks.nu(prob, info, pp, pn, sol.z)[0], base.info)
    return float(np.max(np.abs(D - Phi)) / np.max(np.abs(Phi)))


@_timed
def suite_phi(seed=4, cases=100, tol=1e-4):
    rng = np.random.default_rng(seed)
    errs = [phi_fd_error(rng) for _ in range(cases)]
    fails = [{"case": i, "error": e} for i, e in enumerate(errs) if e > tol]
    return SuiteResult("phi_fd", not fails, max(errs), tol, cases, failures=fails)


@_timed
def suite_projector(seed=5, cases=100, tol=1e-9):
    """Projector identities and Schur/projector agreement for ``X`` and ``X_a``."""
    worst = {"idempotent": 0.0, "symmetric": 0.0, "annihilates": 0.0, "routes": 0.0}
    fails = []
    skipped = 0
    for c in range(cases):
        inst = ks.linear_instance(np.random.default_rng(seed * 1000 + c))
        _, res = inst.solve()
        Ja = ks.active_rows_from_qp(res, inst.H.shape[0])
        for C in (inst.J2, np.vstack([inst.J2, Ja])):
            try:
                ks.check_licq(C)
            except LicqViolation:
                skipped += 1
                continue
            P, Pi_inv = ks.projector(inst.H, C)
            Xs = ks.compute_X_schur(inst.H, C)
            Xp = ks.compute_X_projector(inst.H, C)
            m = {"idempotent": np.max(np.abs(P @ P - P)), "symmetric": np.max(np.abs(P - P.T)),
                 "annihilates": np.max(np.abs(P @ Pi_inv @ C.T)),
                 "routes": np.max(np.abs(Xs - Xp)) / max(1.0, np.max(np.abs(Xs)))}
            for k, v in m.items():
                worst[k] = max(worst[k], float(v))
            if max(m.values()) > tol:
                fails.append({"case": c, **{k: float(v) for k, v in m.items()}})
    return SuiteResult("projector", not fails, max(worst.values()), tol, cases,
                       detail={**worst, "licq_skipped": skipped}, failures=fails)


@_timed
def suite_nested_projectors(seed=6, cases=100, tol=-1e-10):
    """``P_{a'} <= P_a <= P`` along the nested chain of active rows."""
    worst = np.inf
    fails = []
    for c in range(cases):
        inst = ks.linear_instance(np.random.default_rng(seed * 1000 + c))
        _, res = inst.solve()
        Ja = ks.active_rows_from_qp(res, inst.H.shape[0])
        prev = None
        for r in range(Ja.shape[0] + 1):
            C = np.vstack([inst.J2, Ja[:r]])
            try:
                ks.check_licq(C)
            except LicqViolation:
                break
            P, _ = ks.projector(inst.H, C)
            if prev is not None:
                e = float(ks.sym_eigs(prev - P).min())
                worst = min(worst, e)
                if e < tol:
                    fails.append({"case": c, "min_eig": e})
            prev = P
    return SuiteResult("nested_projectors", not fails, worst, tol, cases, failures=fails)


def ordering_batch(seeds=range(100)):
    return ks.verify_ordering(list(seeds))


@_timed
def suite_ordering_chain(seeds=range(100), tol=-1e-8, batch=None):
    b = batch or ordering_batch(seeds)
    bad = b["chain_counterexamples"]
    return SuiteResult("ordering_X_chain", not bad, b["min_eig_chain"], tol, b["instances"],
                       detail={"licq_skipped": b["licq_skipped"], "active_counts": b["active_counts"]},
                       failures=[{"seed": s} for s in bad])


@_timed
def suite_ordering_gram(seeds=range(100), tol=-1e-8, batch=None):
    b = batch or ordering_batch(seeds)
    bad = b["gram_counterexamples"]
    dumps = {c.seed: c.dump for c in b["checks"]}
    return SuiteResult("ordering_gram", not bad, b["min_eig_gram"], tol, b["instances"],
                       detail={"counterexamples": len(bad), "middle_factor_min_eig": b["min_eig_middle"]},
                       failures=[{"seed": s, "instance": dumps[s]} for s in bad])


@_timed
def suite_s_forms(seed=7, cases=50, tol=1e-9):
    """Flat and factored sensitivity forms agree; ``S_a == S`` with no active rows."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    fails = []
    for c in range(cases):
        prob, _ = ks.random_problem(rng, noise=1.0)
        sol = solve(prob, None, CONVERGED)
        system = ks.assemble(prob, sol)
        pp, pn = prob.params.index(-1), prob.params.index(-1)
        rep = ks.analyze(system, pp, pn)
        e = max(rel_err(rep.S, rep.S_factored), rel_err(rep.S_a, rep.S_a_factored))
        if system.Ja.shape[0] == 0:
            e = max(e, float(np.max(np.abs(rep.S - rep.S_a))))
        worst = max(worst, e)
        if e > tol:
            fails.append({"case": c, "error": e})
    return SuiteResult("s_forms", not fails, worst, tol, cases, failures=fails)


@_timed
def suite_first_order(seed=8, cases=10, lo=2.0, hi=8.0):
    """Remainder ratios per halving of the perturbation stay within ``[lo, hi]``."""
    rng = np.random.default_rng(seed)
    ratios = []
    fails = []
    for c in range(cases):
        prob, z0 = ks.random_problem(rng)
        eps = 3.0 * rng.normal(size=prob.info.shape) * np.sqrt(prob.V)
        rep = ks.first_order_validation(prob, eps, z0)
        ratios.extend(rep.ratios.tolist())
        if np.any(rep.ratios < lo) or np.any(rep.ratios > hi):
            fails.append({"case": c, "ratios": rep.ratios.tolist()})
    worst = float(max(abs(np.log2(r / 4.0)) for r in ratios))
    return SuiteResult("first_order_scaling", not fails, worst, 1.0, cases,
                       detail={"min_ratio": min(ratios), "max_ratio": max(ratios)}, failures=fails)


@_timed
def suite_unbounded_equivalence(seed=9, cases=50, tol=0.0):
    """Constrained mode with infinite bounds solves exactly like unconstrained mode."""
    rng = np.random.default_rng(seed)
    inf = (np.inf,) * 3
    open_box = Bounds(x_lb=tuple(-v for v in inf), x_ub=inf, u_lb=tuple(-v for v in inf), u_ub=inf)
    worst = 0.0
    for _ in range(cases):
        prob, _ = ks.random_problem(rng, noise=1.0)
        a = solve(prob, None)
        b = solve(MheProblem(prob.window, prob.weights, open_box).with_info(prob.info), None)
        worst = max(worst, float(np.max(np.abs(a.z - b.z))))
    return SuiteResult("unbounded_equivalence", worst <= tol, worst, tol, cases)


def run_property_suites(seed=0, options=None, quick=False):
    """Run every suite; ``options`` overrides the solver options of the
    KKT-residual suite (used as a negative control)."""
    n = 20 if quick else 100
    batch = ordering_batch(range(n))
    out = [
        suite_kkt_residual(seed, cases=n, options=options or CONVERGED),
        suite_kkt_oracle(seed + 1, cases=10 if quick else 30),
        suite_jacobians(seed + 2, cases=200 if quick else 1000),
        suite_stacked_jacobians(seed + 3, cases=10 if quick else 50),
        suite_phi(seed + 4, cases=10 if quick else 100),
        suite_projector(seed + 5, cases=n),
        suite_nested_projectors(seed + 6, cases=n),
        suite_ordering_chain(batch=batch),
        suite_ordering_gram(batch=batch),
        suite_s_forms(seed + 7, cases=10 if quick else 50),
        suite_first_order(seed + 8, cases=3 if quick else 10),
        suite_unbounded_equivalence(seed + 9, cases=10 if quick else 50),
    ]
    return out
