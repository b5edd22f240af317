import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from airmhe.errors import QpSubproblemInfeasible
from airmhe.qp import solve_box_qp, solve_eqp


def random_qp(seed, n=5, m=2, box=1.0):
    rng = np.random.default_rng(seed)
    M = rng.standard_normal((n, n))
    H = M @ M.T + 0.1 * np.eye(n)
    g = 3 * rng.standard_normal(n)
    A = rng.standard_normal((m, n))
    b = 0.2 * rng.standard_normal(m)
    lb = np.full(n, -box)
    ub = np.full(n, box)
    lb[rng.random(n) < 0.3] = -np.inf
    ub[rng.random(n) < 0.3] = np.inf
    return H, g, A, b, lb, ub


def enumerate_box_qp(H, g, A, b, lb, ub):
    """Brute-force oracle: try every assignment of free / lower / upper."""
    n, m = H.shape[0], A.shape[0]
    best = None
    for pattern in itertools.product((0, -1, 1), repeat=n):
        if any((p == -1 and not np.isfinite(lb[i])) or (p == 1 and not np.isfinite(ub[i]))
               for i, p in enumerate(pattern)):
            continue
        fixed = [i for i, p in enumerate(pattern) if p]
        E = np.zeros((len(fixed), n))
        E[np.arange(len(fixed)), fixed] = 1.0
        C = np.vstack([A, E])
        K = np.block([[H, C.T], [C, np.zeros((len(C), len(C)))]])
        rhs = np.concatenate([-g, b, [lb[i] if pattern[i] < 0 else ub[i] for i in fixed]])
        try:
            sol = np.linalg.solve(K, rhs)
        except np.linalg.LinAlgError:
            continue
        d = sol[:n]
        if np.any(d < lb - 1e-9) or np.any(d > ub + 1e-9):
            continue
        # bound multiplier of x_i = v is minus the row multiplier; sign must
        # push the variable into the box
        nu = sol[n + m:]
        ok = all((nu[j] <= 1e-9 if pattern[i] < 0 else nu[j] >= -1e-9) for j, i in enumerate(fixed))
        if ok:
            val = 0.5 * d @ H @ d + g @ d
            if best is None or val < best[0]:
                best = (val, d)
    return best[1]


def kkt_residuals(res, H, g, A, b, lb, ub):
    stat = H @ res.d + g + A.T @ res.y - res.mu_l + res.mu_u
    gl = np.where(np.isfinite(lb), res.d - lb, 0.0)
    gu = np.where(np.isfinite(ub), ub - res.d, 0.0)
    return {
        "stat": np.max(np.abs(stat)),
        "eq": np.max(np.abs(A @ res.d - b)),
        "primal": max(0.0, -np.min(gl), -np.min(gu)),
        "dual": max(0.0, -np.min(res.mu_l), -np.min(res.mu_u)),
        "comp": max(np.max(np.abs(res.mu_l * gl)), np.max(np.abs(res.mu_u * gu))),
    }


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_box_qp_satisfies_kkt(seed):
    H, g, A, b, lb, ub = random_qp(seed)
    res = solve_box_qp(H, g, A, b, lb, ub)
    r = kkt_residuals(res, H, g, A, b, lb, ub)
    assert r["stat"] < 1e-8 and r["eq"] < 1e-10 and r["primal"] < 1e-10
    assert r["dual"] < 1e-10 and r["comp"] < 1e-8


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_box_qp_matches_enumeration(seed):
    H, g, A, b, lb, ub = random_qp(seed)
    res = solve_box_qp(H, g, A, b, lb, ub)
    ref = enumerate_box_qp(H, g, A, b, lb, ub)
    assert np.max(np.abs(res.d - ref)) < 1e-8


def test_infinite_box_is_plain_eqp():
    H, g, A, b, _, _ = random_qp(3)
    inf = np.full(5, np.inf)
    res = solve_box_qp(H, g, A, b, -inf, inf)
    d, y, _ = solve_eqp(H, g, A, b)
    assert np.array_equal(res.d, d) and np.array_equal(res.y, y)
    assert not res.active_lower.any() and not res.active_upper.any()


def test_loose_box_is_plain_eqp():
    H, g, A, b, _, _ = random_qp(4)
    d, y, _ = solve_eqp(H, g, A, b)
    big = np.full(5, 10 * np.max(np.abs(d)) + 1)
    res = solve_box_qp(H, g, A, b, -big, big)
    assert np.array_equal(res.d, d)


def test_eqp_pinned_multiplier_sign():
    # min 1/2 d^2 - d with d <= 0.5: the upper bound binds with multiplier 0.5
    H = np.eye(1)
    g = np.array([-1.0])
    A = np.zeros((0, 1))
    d, _, nu = solve_eqp(H, g, A, np.zeros(0), fix_idx=[0], fix_val=[0.5], fix_sign=[1])
    assert d[0] == 0.5
    assert nu[0] == pytest.approx(0.5)
    res = solve_box_qp(H, g, A, np.zeros(0), np.array([-np.inf]), np.array([0.5]))
    assert res.d[0] == 0.5 and res.mu_u[0] == pytest.approx(0.5) and res.active_upper[0]


def test_empty_box_rejected():
    H, g, A, b, _, _ = random_qp(1)
    with pytest.raises(QpSubproblemInfeasible):
        solve_box_qp(H, g, A, b, np.ones(5), np.zeros(5))


def test_box_inconsistent_with_equalities_rejected():
    # d2 = d0 + d1 cannot hold with d0, d1 >= 1 and d2 <= 0
    A = np.array([[1.0, 1.0, -1.0]])
    lb = np.array([1.0, 1.0, -np.inf])
    ub = np.array([np.inf, np.inf, 0.0])
    with pytest.raises(QpSubproblemInfeasible):
        solve_box_qp(np.eye(3), np.ones(3), A, np.zeros(1), lb, ub)
