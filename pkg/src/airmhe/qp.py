"""
Dense convex QP with equality rows and simple bounds::

    min  1/2 d'Hd + g'd   s.t.  A d = b,  lb <= d <= ub

solved by a Mehrotra predictor-corrector interior-point method followed
by an active-set polish.  The polish re-solves the equality-constrained
QP with the identified active bounds fixed, which gives exact
complementarity and makes the "no active bound" answer identical to the
plain equality-constrained solve.

Multiplier convention: stationarity reads
``H d + g + A' y - mu_l + mu_u = 0`` with ``mu_l, mu_u >= 0``.
"""

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import QpSubproblemInfeasible, SingularKkt


@dataclass
class QpResult:
    d: np.ndarray
    y: np.ndarray
    mu_l: np.ndarray
    mu_u: np.ndarray
    active_lower: np.ndarray
    active_upper: np.ndarray
    iterations: int
    polished: bool


def _lu(K):
    # exact zero pivots are reported by the callers, not as warnings
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
            return scipy.linalg.lu_factor(K, check_finite=False)
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise SingularKkt(str(exc)) from exc


def _kkt_solve(K, rhs):
    lu = _lu(K)
    if np.any(np.diag(lu[0]) == 0):
        raise SingularKkt("singular KKT matrix")
    sol = scipy.linalg.lu_solve(lu, rhs, check_finite=False)
    # one step of iterative refinement
    sol += scipy.linalg.lu_solve(lu, rhs - K @ sol, check_finite=False)
    return sol


def solve_eqp(H, g, A, b, fix_idx=(), fix_val=(), fix_sign=()):
    """Equality-constrained QP with some variables pinned at bound values.

    ``fix_sign`` is +1 for an upper bound and -1 for a lower bound; the
    returned bound multipliers are non-negative exactly when the pinned
    set is optimal.
    """
    n = H.shape[0]
    m = A.shape[0]
    fix_idx = np.asarray(fix_idx, dtype=int)
    na = len(fix_idx)
    E = np.zeros((na, n))
    if na:
        E[np.arange(na), fix_idx] = np.asarray(fix_sign, dtype=float)
    C = np.vstack([A, E]) if na else A
    K = np.zeros((n + m + na, n + m + na))
    K[:n, :n] = H
    K[:n, n:] = C.T
    K[n:, :n] = C
    rhs = np.concatenate([-g, b, np.asarray(fix_sign, dtype=float) * np.asarray(fix_val, dtype=float)])
    # symmetric diagonal scaling keeps the alpha-block (weights ~1e8) and
    # wind-block (weights ~1) commensurate
    s = np.ones(n + m + na)
    dH = np.sqrt(np.maximum(np.abs(np.diag(H)), 1e-12))
    s[:n] = 1.0 / dH
    rown = np.sqrt(np.sum((C * s[:n]) ** 2, axis=1)) if C.shape[0] else np.zeros(0)
    s[n:] = 1.0 / np.where(rown > 0, rown, 1.0)
    Ks = K * s[:, None] * s[None, :]
    sol = _kkt_solve(Ks, rhs * s) * s
    d = sol[:n]
    if na:
        d[fix_idx] = fix_val
    return d, sol[n:n + m], sol[n + m:]


def solve_box_qp(H, g, A, b, lb, ub, tol=1e-10, max_iter=60):
    """Interior-point solve followed by active-set polish.

    Parameters
    ----------
    H : ndarray (n, n)
        Symmetric positive definite Hessian.
    g : ndarray (n,)
    A : ndarray (m, n)
        Full row rank equality matrix.
    b : ndarray (m,)
    lb, ub : ndarray (n,)
        Bounds; infinite entries are ignored.  ``lb <= 0 <= ub`` is not
        required but the box must be non-empty.
    """
    n = H.shape[0]
    L = np.flatnonzero(np.isfinite(lb))
    U = np.flatnonzero(np.isfinite(ub))
    if np.any(lb > ub):
        raise QpSubproblemInfeasible("empty box")

    # the unconstrained minimiser is optimal whenever it is feasible
    d, y, _ = solve_eqp(H, g, A, b)
    if np.all(d[L] >= lb[L]) and np.all(d[U] <= ub[U]):
        z = np.zeros(n)
        no = np.zeros(n, dtype=bool)
        return QpResult(d, y, z, z.copy(), no, no.copy(), 0, True)

    d, y, zl, zu, it, diverged = _interior_point(H, g, A, b, lb, ub, L, U, tol, max_iter)
    res = None if diverged else _polish(H, g, A, b, lb, ub, L, U, d, y, zl, zu)
    if res is not None:
        res.iterations = it
        return res
    if diverged:
        # diverging multipliers with slacks pinned at zero: no feasible step
        raise QpSubproblemInfeasible("interior point diverged; bounds and equalities are inconsistent")
    mu_l = np.zeros(n)
    mu_u = np.zeros(n)
    mu_l[L] = zl
    mu_u[U] = zu
    act_l = np.zeros(n, dtype=bool)
    act_u = np.zeros(n, dtype=bool)
    act_l[L] = (d[L] - lb[L]) < zl
    act_u[U] = (ub[U] - d[U]) < zu
    return QpResult(d, y, mu_l, mu_u, act_l, act_u, it, False)


def _interior_point(H, g, A, b, lb, ub, L, U, tol, max_iter):
    n = H.shape[0]
    m = A.shape[0]
    scale = max(1.0, np.max(np.abs(g)), np.max(np.abs(np.diag(H))) ** 0.5)

    d = np.zeros(n)
    span = np.where(np.isfinite(lb) & np.isfinite(ub), ub - lb, np.inf)
    margin = np.minimum(1e-2 * np.maximum(1.0, np.maximum(np.abs(np.nan_to_num(lb, posinf=0, neginf=0)),
                                                           np.abs(np.nan_to_num(ub, posinf=0, neginf=0)))),
                        0.25 * span)
    d = np.maximum(d, np.where(np.isfinite(lb), lb + margin, -np.inf))
    d = np.minimum(d, np.where(np.isfinite(ub), ub - margin, np.inf))
    y = np.zeros(m)
    sl = d[L] - lb[L]
    su = ub[U] - d[U]
    eps_l = np.finfo(float).eps * (1 + np.abs(lb[L]))
    eps_u = np.finfo(float).eps * (1 + np.abs(ub[U]))
    zl = np.ones(len(L))
    zu = np.ones(len(U))
    nc = len(L) + len(U)

    K = np.zeros((n + m, n + m))
    K[:n, n:] = A.T
    K[n:, :n] = A
    dH = np.sqrt(np.maximum(np.abs(np.diag(H)), 1e-12))
    s = np.ones(n + m)
    s[:n] = 1.0 / dH
    rown = np.sqrt(np.sum((A * s[:n]) ** 2, axis=1))
    s[n:] = 1.0 / np.where(rown > 0, rown, 1.0)

    it = 0
    diverged = False
    for it in range(1, max_iter + 1):
        rd = H @ d + g + A.T @ y
        rd[L] -= zl
        rd[U] += zu
        rp = A @ d - b
        mu = (sl @ zl + su @ zu) / nc
        if not (np.all(np.isfinite(rd)) and np.isfinite(mu)) or mu > 1e100:
            diverged = True
            break
        if (np.max(np.abs(rd)) <= tol * scale and np.max(np.abs(rp), initial=0.0) <= tol * max(1.0, np.max(np.abs(b), initial=0.0))
                and mu <= tol * 1e-2 * scale):
            break

        sig = np.zeros(n)
        sig[L] += zl / sl
        sig[U] += zu / su
        K[:n, :n] = H + np.diag(sig)
        lu = _lu(K * s[:, None] * s[None, :])
        if np.any(np.diag(lu[0]) == 0):
            raise SingularKkt("singular interior-point system")

        def direction(rl, ru):
            rhs = np.zeros(n + m)
            rhs[:n] = -rd
            rhs[L] -= rl / sl
            rhs[U] += ru / su
            rhs[n:] = -rp
            sol = scipy.linalg.lu_solve(lu, rhs * s, check_finite=False) * s
            dd = sol[:n]
            dy = sol[n:]
            dzl = (-rl - zl * dd[L]) / sl
            dzu = (-ru + zu * dd[U]) / su
            return dd, dy, dzl, dzu

        def max_step(dd, dzl, dzu):
            a = 1.0
            dsl = dd[L]
            dsu = -dd[U]
            for v, dv in ((sl, dsl), (su, dsu), (zl, dzl), (zu, dzu)):
                neg = dv < 0
                if np.any(neg):
                    a = min(a, np.min(-v[neg] / dv[neg]))
            return a

        # predictor
        dd, dy, dzl, dzu = direction(sl * zl, su * zu)
        a_aff = max_step(dd, dzl, dzu)
        mu_aff = ((sl + a_aff * dd[L]) @ (zl + a_aff * dzl) + (su - a_aff * dd[U]) @ (zu + a_aff * dzu)) / nc
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
        # corrector
        rl = sl * zl + dd[L] * dzl - sigma * mu
        ru = su * zu + (-dd[U]) * dzu - sigma * mu
        dd, dy, dzl, dzu = direction(rl, ru)
        a = min(1.0, 0.995 * max_step(dd, dzl, dzu))
        d = d + a * dd
        y = y + a * dy
        zl = zl + a * dzl
        zu = zu + a * dzu
        sl = d[L] - lb[L]
        su = ub[U] - d[U]
        # slacks cannot be resolved below the roundoff of the bound itself
        sl = np.maximum(sl, eps_l)
        su = np.maximum(su, eps_u)
    return d, y, zl, zu, it, diverged


def _polish(H, g, A, b, lb, ub, L, U, d, y, zl, zu, max_rounds=20):
    n = H.shape[0]
    act_l = np.zeros(n, dtype=bool)
    act_u = np.zeros(n, dtype=bool)
    act_l[L] = (d[L] - lb[L]) < zl
    act_u[U] = (ub[U] - d[U]) < zu
    act_l &= ~act_u
    seen = set()
    for _ in range(max_rounds):
        key = (act_l.tobytes(), act_u.tobytes())
        if key in seen:
            return None
        seen.add(key)
        idx_l = np.flatnonzero(act_l)
        idx_u = np.flatnonzero(act_u)
        fix_idx = np.concatenate([idx_u, idx_l])
        fix_val = np.concatenate([ub[idx_u], lb[idx_l]])
        fix_sign = np.concatenate([np.ones(len(idx_u)), -np.ones(len(idx_l))])
        try:
            dp, yp, w = solve_eqp(H, g, A, b, fix_idx, fix_val, fix_sign)
        except SingularKkt:
            return None
        mu_u = np.zeros(n)
        mu_l = np.zeros(n)
        mu_u[idx_u] = w[:len(idx_u)]
        mu_l[idx_l] = w[len(idx_u):]
        viol_l = np.isfinite(lb) & ~act_l & (dp < lb - 1e-12 * (1 + np.abs(lb)))
        viol_u = np.isfinite(ub) & ~act_u & (dp > ub + 1e-12 * (1 + np.abs(ub)))
        neg_l = act_l & (mu_l < 0)
        neg_u = act_u & (mu_u < 0)
        if not (viol_l.any() or viol_u.any() or neg_l.any() or neg_u.any()):
            dp = np.clip(dp, lb, ub)
            return QpResult(dp, yp, mu_l, mu_u, act_l.copy(), act_u.copy(), 0, True)
        act_l = (act_l & ~neg_l) | viol_l
        act_u = (act_u & ~neg_u) | viol_u
    return None
